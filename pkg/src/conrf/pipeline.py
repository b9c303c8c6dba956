"""Shared inference path: checkpoint + encoders -> stylized renders.

The CLI and the HTTP service both call render_stylized so equivalent
requests produce bitwise-identical pixels.  Inference applies the style
transform at every ray sample before compositing; local mode mixes two
styles through a text-selected cosine mask gated by accumulated opacity.
"""

import hashlib
import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .encoders import from_config
from .errors import CapabilityError, ConfigError
from .field import render_rays_graph
from .scene_io import Camera, RayBatch
from .selection import local_transfer, mask_from_similarity, similarity_map
from .style import StyleStatistics, map_embedding_to_style, transfer_per_point
from .toydata import _look_at
from .training import Checkpoint, load_checkpoint

MASK_ACC_GATE = 0.5


@dataclass
class PipelineState:
    checkpoint: Checkpoint
    image_encoder: object
    text_encoder: object
    style_encoder: object
    dataset: object = None
    style_images: dict = dc_field(default_factory=dict)   # id -> image array
    _stats_cache: dict = dc_field(default_factory=dict)

    @property
    def config(self):
        return self.checkpoint.config

    @property
    def supports_selection(self):
        return self.checkpoint.field.clip_grid is not None \
            and self.checkpoint.stage == "select"


def load_pipeline(checkpoint_path, dataset=None):
    ckpt = load_checkpoint(checkpoint_path)
    if ckpt.mapping is None or ckpt.decoder is None:
        raise ConfigError(
            f"checkpoint {checkpoint_path} has no mapping network/decoder; "
            "run the stylization training stage first")
    image_h, text_h, style_h = from_config(ckpt.config.encoders)
    return PipelineState(ckpt, image_h, text_h, style_h, dataset=dataset)


def register_style_image(state, image):
    """Store a style image under its content hash; returns the id."""
    image = np.asarray(image, dtype=np.float64)
    sid = hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()[:16]
    state.style_images[sid] = image
    return sid


def resolve_style(state, spec):
    """StyleStatistics from a style spec.

    spec: {"text": prompt} | {"image": array or path} | {"image_id": id}
    | {"stats": {"mu": [...], "sigma": [...]}}.
    """
    if isinstance(spec, StyleStatistics):
        return spec
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ConfigError(f"style spec must set exactly one source, got {spec!r}")
    kind, value = next(iter(spec.items()))
    if kind == "stats":
        return StyleStatistics(np.asarray(value["mu"]), np.asarray(value["sigma"]))
    if kind == "text":
        emb = state.text_encoder.encode(value)
        return map_embedding_to_style(state.checkpoint.mapping, emb)
    if kind in ("image", "image_id"):
        if kind == "image_id":
            if value not in state.style_images:
                raise ConfigError(f"unknown style image id {value!r}")
            image = state.style_images[value]
        elif isinstance(value, str):
            with Image.open(value) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        else:
            image = np.asarray(value, dtype=np.float64)
        key = hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()
        if key not in state._stats_cache:
            emb = state.image_encoder.encode(image)
            state._stats_cache[key] = map_embedding_to_style(
                state.checkpoint.mapping, emb)
        return state._stats_cache[key]
    raise ConfigError(f"unknown style source {kind!r}")


def resolve_camera(state, pose):
    """Camera from {"view": i} (needs a dataset) or an explicit pose dict."""
    if isinstance(pose, Camera):
        return pose
    if "view" in pose and pose["view"] is not None:
        if state.dataset is None:
            raise ConfigError("view-indexed poses need a loaded dataset")
        idx = int(pose["view"])
        if not 0 <= idx < len(state.dataset):
            raise ConfigError(f"view index {idx} out of range")
        return state.dataset.cameras[idx]
    try:
        c2w = np.asarray(pose["c2w"], dtype=np.float64)
        if c2w.shape == (4, 4):
            c2w = c2w[:3]
        width = int(pose["width"])
        height = int(pose["height"])
        focal = float(pose["focal"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"explicit pose needs c2w, focal, width, height: {e}") from e
    ref = state.dataset.cameras[0] if state.dataset else None
    near = float(pose.get("near", ref.near if ref else 1.6))
    far = float(pose.get("far", ref.far if ref else 4.8))
    try:
        return Camera(focal=focal, cx=width / 2, cy=height / 2, width=width,
                      height=height, c2w=c2w, near=near, far=far)
    except ValueError as e:
        raise ConfigError(f"invalid pose: {e}") from e


def orbit_cameras(state, count):
    """Ring of poses matching the dataset cameras' radius and elevation."""
    if state.dataset is None:
        raise ConfigError("orbit rendering needs a loaded dataset")
    cams = state.dataset.cameras
    center = (state.dataset.bbox[0] + state.dataset.bbox[1]) / 2.0
    offsets = [c.position - center for c in cams]
    radius = float(np.median([np.linalg.norm(o) for o in offsets]))
    elevation = float(np.median([np.arcsin(np.clip(o[2] / np.linalg.norm(o), -1, 1))
                                 for o in offsets]))
    ref = cams[0]
    out = []
    for k in range(count):
        angle = 2.0 * np.pi * k / count
        pos = center + radius * np.array([
            np.cos(angle) * np.cos(elevation),
            np.sin(angle) * np.cos(elevation),
            np.sin(elevation)])
        out.append(Camera(focal=ref.focal, cx=ref.cx, cy=ref.cy,
                          width=ref.width, height=ref.height,
                          c2w=_look_at(pos, target=center),
                          near=ref.near, far=ref.far))
    return out


def scale_camera(camera, resolution):
    """Same pose and field of view at a different square output resolution."""
    resolution = int(resolution)
    if resolution <= 0 or resolution % 4:
        raise ConfigError("output resolution must be a positive multiple of 4")
    scale = resolution / max(camera.width, camera.height)
    return Camera(focal=camera.focal * scale, cx=resolution / 2,
                  cy=resolution / 2, width=resolution, height=resolution,
                  c2w=camera.c2w, near=camera.near, far=camera.far)


def _lattice_rays(camera, stride):
    hc, wc = camera.height // stride, camera.width // stride
    ys, xs = np.mgrid[0:hc, 0:wc]
    px = xs.ravel() * stride + (stride - 1) / 2.0
    py = ys.ravel() * stride + (stride - 1) / 2.0
    origins, dirs = camera.rays_through(px, py)
    n = px.shape[0]
    return RayBatch(origins, dirs, np.full(n, camera.near),
                    np.full(n, camera.far),
                    np.stack([px, py], axis=-1)), (hc, wc)


def render_stylized(state, camera, style, style2=None, content_text=None,
                    threshold=None, n_samples=None):
    """Render one stylized view.

    Exactly one style gives global stylization; two styles require a
    content prompt and stylize the selected/unselected regions separately.
    Returns image (uint8), optional selection mask and similarity map,
    accumulated weights, depth, and a timing breakdown.
    """
    t_start = time.perf_counter()
    cfg = state.config
    if (style2 is None) != (content_text is None):
        raise ConfigError(
            "local stylization needs both a second style and a content prompt")
    local = style2 is not None
    if local and not state.supports_selection:
        raise CapabilityError(
            "checkpoint has no trained selection head; run train-select first")
    threshold = cfg.threshold if threshold is None else float(threshold)
    if not -1.0 <= threshold <= 1.0:
        raise ConfigError("threshold must lie in [-1, 1]")

    stats1 = resolve_style(state, style)
    stats2 = resolve_style(state, style2) if local else None
    t_stats = time.perf_counter()

    rays, (hc, wc) = _lattice_rays(camera, cfg.patch_stride)
    heads = ("feature", "clip") if local else ("feature",)
    with ad.no_grad():
        out = render_rays_graph(state.checkpoint.field, rays, heads=heads,
                                n_samples=n_samples or cfg.n_samples,
                                keep_samples=True)
    weights = out["weights"].data
    feats = out["feature_samples"].data
    acc = out["acc"].data
    t_render = time.perf_counter()

    mask = similarity = None
    if local:
        emb = state.text_encoder.encode(content_text)
        similarity = similarity_map(emb, out["clip"].data)
        sel = mask_from_similarity(similarity, threshold)
        # a selection only applies where the ray actually hits a surface
        mask = sel.mask * (acc >= MASK_ACC_GATE)
        styled = local_transfer(weights, feats, mask, stats1, stats2)
    else:
        styled = transfer_per_point(weights, feats, stats1)

    c = styled.shape[1]
    feature_image = styled.reshape(hc, wc, c).transpose(2, 0, 1)
    with ad.no_grad():
        rgb = state.checkpoint.decoder.forward_graph(
            ad.Tensor(feature_image[None])).data[0].transpose(1, 2, 0)
    image = (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    t_decode = time.perf_counter()

    return {
        "image": image,
        "mask": None if mask is None else mask.reshape(hc, wc),
        "similarity": None if similarity is None else similarity.reshape(hc, wc),
        "acc": acc.reshape(hc, wc),
        "depth": out["depth"].reshape(hc, wc),
        "timings": {
            "style_ms": round(1e3 * (t_stats - t_start), 2),
            "render_ms": round(1e3 * (t_render - t_stats), 2),
            "decode_ms": round(1e3 * (t_decode - t_render), 2),
            "total_ms": round(1e3 * (t_decode - t_start), 2),
        },
    }


def render_stylized_sequence(state, cameras, style, **kw):
    """Stylized renders plus full-resolution depth/opacity for warping."""
    images, depths, accs = [], [], []
    for cam in cameras:
        out = render_stylized(state, cam, style, **kw)
        images.append(np.asarray(out["image"], dtype=np.float64) / 255.0)
        rays, (h, w) = _lattice_rays(cam, stride=1)
        with ad.no_grad():
            full = render_rays_graph(state.checkpoint.field, rays, heads=(),
                                     n_samples=state.config.n_samples)
        depths.append(full["depth"].reshape(h, w))
        accs.append(full["acc"].data.reshape(h, w))
    return images, depths, accs
