"""Grid-based radiance/feature field and its volume renderer.

The backbone is a dense trilinear voxel grid per head (density, RGB,
feature, CLIP-feature), all sharing the density for compositing.  Density
uses a shifted softplus so a fresh field is near-transparent; RGB uses a
sigmoid.  Rendering composites each head as sum_i w_i * value_i with the
weights of the standard emission-absorption model.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import ConfigError
from .nn import Module
from .scene_io import RayBatch

DEPTH_EPS = 1e-8


@dataclass
class SampleBatch:
    positions: np.ndarray   # (B, N, 3)
    deltas: np.ndarray      # (B, N) bin widths, scene units
    tvals: np.ndarray       # (B, N) distances along the ray


@dataclass
class RenderBundle:
    acc: np.ndarray                 # (B,) accumulated weight
    depth: np.ndarray               # (B,) expected termination distance
    feature: np.ndarray = None      # (B, C)
    clip: np.ndarray = None         # (B, D)
    rgb: np.ndarray = None          # (B, 3)


def sample_points(rays, n_samples, stratified=False, rng=None):
    """Partition [near, far] into n_samples bins, one sample per bin.

    Unjittered samples sit at bin centers; stratified jitter draws uniformly
    inside each bin from `rng`.  deltas are the (equal) bin widths.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    b = len(rays)
    near, far = rays.near[:, None], rays.far[:, None]
    width = (far - near) / n_samples
    if stratified:
        rng = rng or np.random.default_rng()
        u = rng.random((b, n_samples))
    else:
        u = 0.5
    edges = near + width * np.arange(n_samples)[None, :]
    tvals = edges + u * width
    positions = rays.origins[:, None, :] + tvals[..., None] * rays.directions[:, None, :]
    deltas = np.broadcast_to(width, (b, n_samples)).copy()
    return SampleBatch(positions, deltas, tvals)


def compute_weights(densities, deltas):
    """Per-sample compositing weights and residual transmittance.

    w_i = exp(-sum_{j<i} sigma_j delta_j) * (1 - exp(-sigma_i delta_i));
    the weights plus the returned transmittance sum to 1 per ray.
    """
    densities = np.asarray(densities, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    squeeze = densities.ndim == 1
    if squeeze:
        densities, deltas = densities[None], deltas[None]
    w, t = kernels.composite_scan(np.ascontiguousarray(densities * deltas))
    return (w[0], t[0]) if squeeze else (w, t)


class FeatureField(Module):
    """Learnable voxel grids over a scene bounding box."""

    def __init__(self, bbox, resolution=64, feature_channels=256,
                 feature_resolution=None, clip_channels=None, clip_resolution=None,
                 with_rgb=True, density_shift=-4.0):
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        self.resolution = int(resolution)
        self.feature_channels = int(feature_channels)
        self.feature_resolution = int(feature_resolution or resolution)
        self.clip_channels = int(clip_channels) if clip_channels else 0
        self.clip_resolution = int(clip_resolution or max(self.resolution // 2, 2))
        self.density_shift = float(density_shift)

        r, rf = self.resolution, self.feature_resolution
        self.density_grid = ad.Tensor(np.zeros((r, r, r, 1)), requires_grad=True)
        self.rgb_grid = (ad.Tensor(np.zeros((r, r, r, 3)), requires_grad=True)
                         if with_rgb else None)
        self.feature_grid = ad.Tensor(
            np.zeros((rf, rf, rf, self.feature_channels)), requires_grad=True)
        if self.clip_channels:
            rc = self.clip_resolution
            self.clip_grid = ad.Tensor(
                np.zeros((rc, rc, rc, self.clip_channels)), requires_grad=True)
        else:
            self.clip_grid = None

    # -- meta -------------------------------------------------------------
    def manifest(self):
        return {
            "bbox": self.bbox.tolist(),
            "resolution": self.resolution,
            "feature_channels": self.feature_channels,
            "feature_resolution": self.feature_resolution,
            "clip_channels": self.clip_channels,
            "clip_resolution": self.clip_resolution,
            "with_rgb": self.rgb_grid is not None,
            "density_shift": self.density_shift,
            "density_activation": "softplus",
        }

    @classmethod
    def from_manifest(cls, m):
        return cls(bbox=np.asarray(m["bbox"]), resolution=m["resolution"],
                   feature_channels=m["feature_channels"],
                   feature_resolution=m["feature_resolution"],
                   clip_channels=m["clip_channels"] or None,
                   clip_resolution=m["clip_resolution"],
                   with_rgb=m["with_rgb"], density_shift=m["density_shift"])

    def head(self, name):
        grid = {"feature": self.feature_grid, "clip": self.clip_grid,
                "rgb": self.rgb_grid}.get(name)
        if grid is None:
            raise ConfigError(f"field has no {name!r} head")
        return grid

    # -- queries ------------------------------------------------------------
    def _coords(self, resolution, pts):
        lo, hi = self.bbox
        u = (pts - lo) / (hi - lo) * (resolution - 1)
        u = np.clip(u, 0.0, resolution - 1 - 1e-9)
        idx = np.floor(u).astype(np.int64)
        frac = u - idx
        return ((np.ascontiguousarray(idx[:, 0]), np.ascontiguousarray(idx[:, 1]),
                 np.ascontiguousarray(idx[:, 2])),
                (np.ascontiguousarray(frac[:, 0]), np.ascontiguousarray(frac[:, 1]),
                 np.ascontiguousarray(frac[:, 2])))

    def _inside(self, pts):
        lo, hi = self.bbox
        return ((pts >= lo) & (pts <= hi)).all(axis=-1).astype(np.float64)

    def query_density(self, pts):
        """Activated density at (M, 3) points; zero outside the bbox."""
        (ix, iy, iz), (fx, fy, fz) = self._coords(self.resolution, pts)
        raw = ad.trilinear_sample(self.density_grid, ix, iy, iz, fx, fy, fz)
        sigma = ad.softplus(raw + self.density_shift).reshape((-1,))
        return sigma * self._inside(pts)

    def query_head(self, name, pts):
        grid = self.head(name)
        res = {"feature": self.feature_resolution, "clip": self.clip_resolution,
               "rgb": self.resolution}[name]
        (ix, iy, iz), (fx, fy, fz) = self._coords(res, pts)
        out = ad.trilinear_sample(grid, ix, iy, iz, fx, fy, fz)
        if name == "rgb":
            out = ad.sigmoid(out)
        return out


def query_field(field, positions):
    """Density and main-head features at (M, 3) points (numpy in/out)."""
    pts = np.asarray(positions, dtype=np.float64)
    with ad.no_grad():
        sigma = field.query_density(pts).data
        feats = field.query_head("feature", pts).data
    return sigma, feats


def render_rays_graph(field, rays, heads=("feature",), n_samples=64,
                      stratified=False, rng=None, samples=None,
                      keep_samples=False):
    """Differentiable render; returns a dict of Tensors plus sample info.

    Each requested head renders as sum_i w_i * value_i.  'acc' is the
    accumulated weight, 'trans' the residual transmittance; 'depth' is
    computed outside the graph (no gradients flow through it).  With
    keep_samples, per-sample head values are kept as '<head>_samples'
    (B, N, C) for per-point style transfer.
    """
    for h in heads:
        field.head(h)
    batch = samples or sample_points(rays, n_samples, stratified, rng)
    b, n = batch.deltas.shape
    flat = batch.positions.reshape(-1, 3)

    sigma = field.query_density(flat).reshape((b, n))
    w, trans = ad.composite(sigma * batch.deltas)
    acc = w.sum(axis=1)

    out = {"weights": w, "trans": trans, "acc": acc, "samples": batch}
    for h in heads:
        vals = field.query_head(h, flat)
        c = vals.shape[1]
        per_sample = vals.reshape((b, n, c))
        out[h] = (w.reshape((b, n, 1)) * per_sample).sum(axis=1)
        if keep_samples:
            out[f"{h}_samples"] = per_sample
    out["depth"] = (w.data * batch.tvals).sum(axis=1) / np.maximum(acc.data, DEPTH_EPS)
    return out


def render(field, rays, heads=("feature",), n_samples=64, stratified=False,
           rng=None, chunk=8192):
    """Inference-mode render of a ray batch into a RenderBundle (numpy)."""
    pieces = []
    with ad.no_grad():
        for start in range(0, len(rays), chunk):
            sl = slice(start, start + chunk)
            sub = RayBatch(rays.origins[sl], rays.directions[sl],
                           rays.near[sl], rays.far[sl], rays.pixels[sl])
            pieces.append(render_rays_graph(field, sub, heads, n_samples,
                                            stratified, rng))
    def cat(key):
        return np.concatenate([p[key].data if isinstance(p[key], ad.Tensor) else p[key]
                               for p in pieces], axis=0)

    return RenderBundle(
        acc=cat("acc"), depth=cat("depth"),
        feature=cat("feature") if "feature" in heads else None,
        clip=cat("clip") if "clip" in heads else None,
        rgb=cat("rgb") if "rgb" in heads else None,
    )
