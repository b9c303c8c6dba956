"""Pretrained-encoder interface plus deterministic toy stand-ins.

Two encoder families feed the pipeline: a joint image-text encoder
("CLIP"-style, emits D-dim embeddings for both modalities) and a style
feature extractor ("VGG"-style, emits a strided spatial feature map).
The toy handles satisfy the same interface from fixed-seed, bias-free
random convolutions with ReLU, so byte-identical inputs give bitwise
identical outputs and scaling an input by a > 0 scales the style feature
map by exactly a.

Real backends load from weight files named by CONRF_CLIP_WEIGHTS /
CONRF_VGG_WEIGHTS and need the optional torch/transformers extra; when
anything is missing they raise CapabilityError rather than silently
substituting.
"""

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CapabilityError


@dataclass
class EmbeddingVector:
    values: np.ndarray       # (D,)
    modality: str            # "image" | "text"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.isfinite(self.values).all():
            raise ValueError("embedding contains non-finite values")


@dataclass
class StyleFeatureMap:
    values: np.ndarray       # (C, H', W')
    layer: str


def _resize_bilinear(img, out_h, out_w):
    """Deterministic bilinear resize of (H, W, C) to (out_h, out_w, C)."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    a = img[y0][:, x0] * (1 - fy) * (1 - fx) + img[y0][:, x1] * (1 - fy) * fx
    b = img[y1][:, x0] * fy * (1 - fx) + img[y1][:, x1] * fy * fx
    return a + b


def _to_chw(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    return image.transpose(2, 0, 1)


class ToyImageEncoder:
    """Joint-space toy image encoder.

    Bias-free conv stack with signed full-wave rectification
    (concat(relu(f), relu(-f)), positively homogeneous).  First-layer
    filters are zero-sum over their taps, so any gray patch embeds to the
    zero vector and hues land in well-separated directions; this is what
    makes cosine selection masks on the toy scene meaningful.
    """

    modality = "image"

    def __init__(self, seed, width=32, input_size=32):
        self.name = f"toy-image-{seed}-{width}"
        self.width = int(width)
        self.input_size = int(input_size)
        rng = np.random.default_rng([seed, 101])
        c1 = 24
        self.w1 = rng.normal(0, np.sqrt(2.0 / (3 * 9)), size=(c1, 3, 3, 3))
        self.w1 -= self.w1.mean(axis=(1, 2, 3), keepdims=True)
        self.proj = rng.normal(0, np.sqrt(1.0 / (2 * c1)), size=(2 * c1, self.width))

    def encode(self, image):
        x = _resize_bilinear(np.asarray(image, dtype=np.float64),
                             self.input_size, self.input_size)
        x = _to_chw(x)[None]
        from . import kernels
        # valid conv: zero-padding would break the gray -> 0 guarantee
        f = kernels.conv2d_forward(x, self.w1, 2, 0)
        h = np.concatenate([np.maximum(f, 0.0), np.maximum(-f, 0.0)], axis=1)
        pooled = h.mean(axis=(2, 3))[0]
        return EmbeddingVector(pooled @ self.proj, "image")


class ToyTextEncoder:
    """Toy text encoder sharing the toy image space via caption bindings.

    Bound captions return their paired image embedding plus small fixed
    noise; unbound text hashes to a reproducible pseudo-random vector.
    """

    modality = "text"

    def __init__(self, seed, width=32):
        self.name = f"toy-text-{seed}-{width}"
        self.width = int(width)
        self.seed = seed
        self._bindings = {}

    def bind(self, caption, embedding, noise_scale=0.02):
        values = np.asarray(embedding.values if isinstance(embedding, EmbeddingVector)
                            else embedding, dtype=np.float64)
        digest = int.from_bytes(hashlib.sha256(caption.encode()).digest()[:8], "big")
        noise = np.random.default_rng([self.seed, digest]).normal(size=values.shape)
        scale = noise_scale * np.linalg.norm(values) / max(np.linalg.norm(noise), 1e-12)
        self._bindings[caption] = values + scale * noise

    def encode(self, text):
        if not isinstance(text, str) or not text.strip():
            raise ValueError("text prompt must be a non-empty string")
        if text in self._bindings:
            return EmbeddingVector(self._bindings[text].copy(), "text")
        digest = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")
        rng = np.random.default_rng([self.seed, 202, digest])
        return EmbeddingVector(rng.normal(size=self.width), "text")


class ToyStyleEncoder:
    """VGG-style toy extractor: three bias-free conv+ReLU stages.

    Layer strides are 1, 2, 4; the top layer is the style feature map.
    Bias-free filters with ReLU make the map positively homogeneous in
    the input, and backprop through it works in-graph for training.
    """

    def __init__(self, seed, channels=(16, 24, 32)):
        self.name = f"toy-style-{seed}-{'x'.join(map(str, channels))}"
        self.channels = int(channels[-1])
        self.layer_channels = tuple(int(c) for c in channels)
        self.stride = 4
        self.layers = ("relu1", "relu2", "relu3")
        rng = np.random.default_rng([seed, 303])
        cs = (3,) + self.layer_channels
        self.weights = [
            ad.Tensor(rng.normal(0, np.sqrt(2.0 / (cs[i] * 9)),
                                 size=(cs[i + 1], cs[i], 3, 3)))
            for i in range(3)
        ]

    def features_graph(self, x, n_layers=3):
        """x: (B, 3, H, W) Tensor; returns the first n_layers activation maps."""
        outs = []
        h = x
        for i, w in enumerate(self.weights[:n_layers]):
            h = ad.relu(ad.conv2d(h, w, stride=1 if i == 0 else 2, pad=1))
            outs.append(h)
        return outs

    def features(self, image):
        with ad.no_grad():
            x = ad.Tensor(_to_chw(image)[None])
            top = self.features_graph(x, 3)[-1]
        return StyleFeatureMap(top.data[0], "relu3")


def make_toy_encoders(seed, width=32, style_channels=(16, 24, 32), pairs=None):
    """Toy (image, text, style) handles sharing one joint space.

    pairs: optional [(image, caption)] fixtures; each caption binds to its
    image's embedding (plus small noise) so paired cosines exceed 0.9.
    """
    image = ToyImageEncoder(seed, width=width)
    text = ToyTextEncoder(seed, width=width)
    style = ToyStyleEncoder(seed, channels=style_channels)
    for img, caption in pairs or ():
        text.bind(caption, image.encode(img))
    return image, text, style


def from_config(spec):
    """(image, text, style) handles from a config dict.

    Toy spec: {"kind": "toy", "seed", "width", "style_channels",
    "bindings": {caption: [embedding floats]}}.  Real spec: {"kind": "real"}
    (weights located via environment, may raise CapabilityError).
    """
    kind = spec.get("kind", "toy")
    if kind == "toy":
        image, text, style = make_toy_encoders(
            spec.get("seed", 0), width=spec.get("width", 512),
            style_channels=tuple(spec.get("style_channels", (64, 128, 256))))
        for caption, values in (spec.get("bindings") or {}).items():
            text._bindings[caption] = np.asarray(values, dtype=np.float64)
        return image, text, style
    if kind == "real":
        return load_real_encoders()
    raise ValueError(f"unknown encoder kind {kind!r}")


# -- op-level wrappers ---------------------------------------------------

def encode_image_joint(handle, image):
    return handle.encode(image)


def encode_text_joint(handle, text):
    return handle.encode(text)


def extract_style_features(handle, image):
    return handle.features(image)


# -- real backends (optional capability) ----------------------------------

CLIP_WEIGHTS_ENV = "CONRF_CLIP_WEIGHTS"
VGG_WEIGHTS_ENV = "CONRF_VGG_WEIGHTS"


def _require(env):
    path = os.environ.get(env, "")
    if not path or not os.path.exists(path):
        raise CapabilityError(
            f"{env} does not point to a weight file; real encoders unavailable "
            "(tests and desk-scale training use the toy handles)")
    return path


class RealClipEncoder:
    """ViT-B/32 joint encoder via transformers; D=512, preprocessing pinned
    to 224x224 bicubic resize + CLIP channel normalization."""

    width = 512

    def __init__(self):
        path = _require(CLIP_WEIGHTS_ENV)
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise CapabilityError(f"install the [real] extra for CLIP support: {e}") from e
        self._torch = torch
        self.model = CLIPModel.from_pretrained(path).eval()
        self.processor = CLIPProcessor.from_pretrained(path)
        self.name = "clip-vit-b32"

    def encode(self, image):
        import torch
        pil = (np.asarray(image) * 255).astype(np.uint8)
        inputs = self.processor(images=pil, return_tensors="pt")
        with torch.no_grad():
            out = self.model.get_image_features(**inputs)[0]
        return EmbeddingVector(out.numpy().astype(np.float64), "image")

    def encode_text(self, text):
        import torch
        if not text.strip():
            raise ValueError("text prompt must be a non-empty string")
        inputs = self.processor(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            out = self.model.get_text_features(**inputs)[0]
        return EmbeddingVector(out.numpy().astype(np.float64), "text")


class RealClipTextEncoder:
    modality = "text"

    def __init__(self, joint):
        self.joint = joint
        self.name = joint.name + "-text"
        self.width = joint.width

    def encode(self, text):
        return self.joint.encode_text(text)


class RealVggStyleEncoder:
    """VGG19 features through relu3_1 (C=256, stride 4), torchvision layout."""

    channels = 256
    stride = 4
    layers = ("relu1_1", "relu2_1", "relu3_1")

    def __init__(self):
        path = _require(VGG_WEIGHTS_ENV)
        try:
            import torch
            import torch.nn as tnn
        except ImportError as e:
            raise CapabilityError(f"install the [real] extra for VGG support: {e}") from e
        cfg = [(3, 64), (64, 64), "pool", (64, 128), (128, 128), "pool", (128, 256)]
        layers, idx = [], 0
        state = torch.load(path, map_location="cpu", weights_only=True)
        for item in cfg:
            if item == "pool":
                layers.append(tnn.MaxPool2d(2))
                idx += 1
                continue
            conv = tnn.Conv2d(item[0], item[1], 3, padding=1)
            conv.weight.data = state[f"features.{idx}.weight"]
            conv.bias.data = state[f"features.{idx}.bias"]
            layers += [conv, tnn.ReLU()]
            idx += 2
        self.net = tnn.Sequential(*layers).eval()
        self.name = "vgg19-relu3_1"

    def features(self, image):
        import torch
        mean = np.array([0.485, 0.456, 0.406])
        std = np.array([0.229, 0.224, 0.225])
        x = (_to_chw((np.asarray(image) - mean) / std))[None]
        with torch.no_grad():
            out = self.net(torch.from_numpy(x).float())
        return StyleFeatureMap(out[0].numpy().astype(np.float64), "relu3_1")

    def features_graph(self, x, n_layers=3):
        raise CapabilityError(
            "the real VGG backend is inference-only; train with toy handles")


def load_real_encoders():
    """(image, text, style) handles backed by pretrained weights, or raise."""
    clip = RealClipEncoder()
    return clip, RealClipTextEncoder(clip), RealVggStyleEncoder()
