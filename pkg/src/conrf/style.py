"""Style statistics, the embedding-to-style mapping network, feature
transfer, and the feature-to-RGB decoder.

A style is a per-channel (mean, std) pair.  Transfer is the channelwise
affine map F_cs = F_c * sigma + w_r * mu on rendered features, where the
accumulated ray weight w_r keeps empty rays from receiving the mean.  The
per-point variant applies the affine map to every ray sample before
compositing; the two are algebraically identical and tested as such.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoders import EmbeddingVector, StyleFeatureMap
from .nn import Conv2d, Linear, Module

STATS_EPS = 1e-8
SOFTPLUS_ONE = float(np.log(np.e - 1.0))   # raw value the sigma head needs for sigma=1


@dataclass
class StyleStatistics:
    mu: np.ndarray       # (C,)
    sigma: np.ndarray    # (C,), nonnegative

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu/sigma width mismatch")
        if not (np.isfinite(self.mu).all() and np.isfinite(self.sigma).all()):
            raise ValueError("style statistics must be finite")
        if (self.sigma < 0).any():
            raise ValueError("sigma must be nonnegative")

    @property
    def width(self):
        return self.mu.shape[0]

    @classmethod
    def identity(cls, width):
        return cls(np.zeros(width), np.ones(width))


def channel_stats_graph(x, eps=STATS_EPS):
    """Per-channel spatial mean/std of a (B, C, H, W) Tensor, in-graph.

    Population variance; eps sits inside the square root.
    """
    mu = x.mean(axis=(2, 3))
    var = ((x - mu.reshape((*mu.shape, 1, 1))) ** 2).mean(axis=(2, 3))
    return mu, ad.sqrt(var + eps)


def stats_from_feature_map(fmap):
    """StyleStatistics from a (C, H', W') style feature map."""
    values = fmap.values if isinstance(fmap, StyleFeatureMap) else np.asarray(fmap)
    mu = values.mean(axis=(1, 2))
    var = ((values - mu[:, None, None]) ** 2).mean(axis=(1, 2))
    return StyleStatistics(mu, np.sqrt(var + STATS_EPS))


class MappingNetwork(Module):
    """MLP from the joint embedding space to style statistics.

    Two linear heads produce mu and a softplus-mapped sigma.  Heads start
    at zero weight with the sigma bias preloaded so a fresh network emits
    the identity style (sigma=1, mu=0) for every embedding.
    """

    def __init__(self, embed_dim, out_channels, rng, hidden=512, n_layers=3):
        self.embed_dim = int(embed_dim)
        self.out_channels = int(out_channels)
        self.hidden_width = int(hidden)
        self.n_layers = int(n_layers)
        dims = [self.embed_dim] + [self.hidden_width] * n_layers
        self.trunk = [Linear(dims[i], dims[i + 1], rng) for i in range(n_layers)]
        self.mu_head = Linear(self.hidden_width, self.out_channels, rng)
        self.sigma_head = Linear(self.hidden_width, self.out_channels, rng)
        for head in (self.mu_head, self.sigma_head):
            head.weight.data[:] = 0.0
        self.sigma_head.bias.data[:] = SOFTPLUS_ONE

    def manifest(self):
        return {"embed_dim": self.embed_dim, "out_channels": self.out_channels,
                "hidden": self.hidden_width, "n_layers": self.n_layers}

    @classmethod
    def from_manifest(cls, m, rng=None):
        return cls(m["embed_dim"], m["out_channels"],
                   rng or np.random.default_rng(0), m["hidden"], m["n_layers"])

    def forward_graph(self, emb):
        """emb: (B, D) Tensor -> (mu (B, C), sigma (B, C)) Tensors."""
        h = emb
        for layer in self.trunk:
            h = ad.relu(layer(h))
        return self.mu_head(h), ad.softplus(self.sigma_head(h))


def map_embedding_to_style(net, emb):
    """Style statistics predicted from an image or text embedding."""
    values = emb.values if isinstance(emb, EmbeddingVector) else np.asarray(emb)
    if values.shape != (net.embed_dim,):
        raise ValueError(
            f"embedding width {values.shape} does not match network input {net.embed_dim}")
    with ad.no_grad():
        mu, sigma = net.forward_graph(ad.Tensor(values[None]))
    return StyleStatistics(mu.data[0], sigma.data[0])


def _stats_arrays(stats):
    if isinstance(stats, StyleStatistics):
        return stats.mu, stats.sigma
    return stats  # (mu, sigma) pair of arrays or Tensors


def transfer_deferred(f_c, w_r, stats):
    """Channelwise affine transfer on rendered features.

    f_c: (..., C) rendered feature, w_r: (...) accumulated weights.
    Works on numpy arrays or Tensors (in-graph).
    """
    mu, sigma = _stats_arrays(stats)
    if any(isinstance(v, ad.Tensor) for v in (f_c, mu, sigma, w_r)):
        f = ad.as_tensor(f_c)
        w = ad.as_tensor(w_r)
        return f * sigma + w.reshape((*w.shape, 1)) * mu
    return f_c * sigma + np.asarray(w_r)[..., None] * mu


def transfer_per_point(weights, features, stats):
    """Stylize every ray sample, then composite.

    weights: (B, N), features: (B, N, C).  Equals transfer_deferred of the
    composited feature by linearity.
    """
    mu, sigma = _stats_arrays(stats)
    if any(isinstance(v, ad.Tensor) for v in (features, mu, sigma, weights)):
        w = ad.as_tensor(weights)
        f = ad.as_tensor(features)
        styled = f * sigma + mu
        return (w.reshape((*w.shape, 1)) * styled).sum(axis=1)
    styled = features * sigma + mu
    return (np.asarray(weights)[..., None] * styled).sum(axis=1)


@dataclass
class FeatureImage:
    values: np.ndarray   # (C, H, W)
    provenance: str = "rendered"   # "rendered" | "encoder"


class Decoder(Module):
    """Convolutional upsampler from stylized features to RGB in [0, 1].

    Two nearest-upsample + conv stages give a fixed stride of 4, matching
    the ray-subsampling stride used when rendering feature patches.
    """

    stride = 4

    def __init__(self, in_channels, rng, widths=(128, 64)):
        self.in_channels = int(in_channels)
        self.widths = tuple(int(w) for w in widths)
        w1, w2 = self.widths
        self.conv1 = Conv2d(self.in_channels, w1, 3, rng)
        self.conv2 = Conv2d(w1, w2, 3, rng)
        self.conv3 = Conv2d(w2, 3, 3, rng)

    def manifest(self):
        return {"in_channels": self.in_channels, "widths": list(self.widths)}

    @classmethod
    def from_manifest(cls, m, rng=None):
        return cls(m["in_channels"], rng or np.random.default_rng(0), m["widths"])

    def forward_graph(self, x):
        """x: (B, C, H, W) Tensor -> (B, 3, 4H, 4W) Tensor in [0, 1]."""
        h = ad.relu(self.conv1(x))
        h = ad.upsample2d(h, 2)
        h = ad.relu(self.conv2(h))
        h = ad.upsample2d(h, 2)
        return ad.sigmoid(self.conv3(h))


def decode(decoder, feature_image):
    """Decode a (C, H, W) stylized feature image to (4H, 4W, 3) RGB."""
    values = (feature_image.values if isinstance(feature_image, FeatureImage)
              else np.asarray(feature_image))
    with ad.no_grad():
        out = decoder.forward_graph(ad.Tensor(values[None]))
    return out.data[0].transpose(1, 2, 0)
