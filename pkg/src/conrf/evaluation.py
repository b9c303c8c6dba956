"""Multi-view stylization consistency metrics.

A stylized view is warped into a nearby (short-range) or distant
(long-range) view by forward-splatting its rendered depth, then compared
against the target view with masked SSIM and, when a perceptual handle is
available, masked LPIPS.  Depth reprojection replaces optical-flow
warping: the field already provides depth, and no external flow model is
needed; absolute numbers are therefore not comparable to flow-based
reports.
"""

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import correlate

from .errors import CapabilityError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01) ** 2
SSIM_C2 = (0.03) ** 2
DEPTH_AGREEMENT_REL = 0.01


def psnr(a, b, mask=None):
    """Peak signal-to-noise ratio for [0, 1] images, optionally masked."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    diff = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if diff.ndim == 3 and mask.ndim == 2:
            mask = mask[..., None] & np.ones(diff.shape, dtype=bool)
        diff = diff[mask]
    return float(-10.0 * np.log10(max(diff.mean(), 1e-12)))


@dataclass
class WarpResult:
    image: np.ndarray        # (H, W, 3) warped source
    valid: np.ndarray        # (H, W) bool, reprojection + depth agreement
    source_view: int = -1
    target_view: int = -1


@dataclass
class ConsistencyReport:
    short_range: dict
    long_range: dict
    pairs: list = dc_field(default_factory=list)
    pair_policy: dict = dc_field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "pair_policy": self.pair_policy,
            "short_range": self.short_range,
            "long_range": self.long_range,
            "pairs": self.pairs,
        }, indent=1)

    def table(self):
        lines = ["range       metric   value",
                 "-----------------------------"]
        for name, scores in (("short", self.short_range), ("long", self.long_range)):
            for metric, value in sorted(scores.items()):
                lines.append(f"{name:<11} {metric:<8} {value:.4f}")
        return "\n".join(lines)


def warp_by_depth(image, depth, src_camera, tgt_camera, tgt_depth=None,
                  src_mask=None, src_view=-1, tgt_view=-1):
    """Forward-splat a source view into a target camera using its depth.

    Z-buffering resolves collisions (nearest surviving).  When tgt_depth
    is given, validity additionally requires the reprojected distance to
    agree with the target's depth within 1% relative.  src_mask (e.g. an
    opacity mask) restricts which source pixels contribute.
    """
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    ys, xs = np.mgrid[0:h, 0:w]
    origins, dirs = src_camera.rays_through(xs.ravel().astype(np.float64),
                                            ys.ravel().astype(np.float64))
    points = origins + depth.ravel()[:, None] * dirs
    proj, z_axis = tgt_camera.project(points)
    px = np.round(proj[:, 0]).astype(np.int64)
    py = np.round(proj[:, 1]).astype(np.int64)

    ok = (z_axis > 0) & (px >= 0) & (px < tgt_camera.width) \
        & (py >= 0) & (py < tgt_camera.height)
    if src_mask is not None:
        ok &= np.asarray(src_mask, dtype=bool).ravel()

    dist = np.linalg.norm(points - tgt_camera.position, axis=-1)
    warped = np.zeros((tgt_camera.height, tgt_camera.width, 3))
    zbuf = np.full((tgt_camera.height, tgt_camera.width), np.inf)
    idx = np.flatnonzero(ok)
    # far-to-near ordering makes the nearest splat win deterministically
    idx = idx[np.argsort(-dist[idx], kind="stable")]
    src_flat = image.reshape(-1, 3)
    warped[py[idx], px[idx]] = src_flat[idx]
    zbuf[py[idx], px[idx]] = dist[idx]

    valid = np.isfinite(zbuf)
    if tgt_depth is not None:
        tgt_depth = np.asarray(tgt_depth, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.abs(zbuf - tgt_depth) / np.maximum(tgt_depth, 1e-12)
        valid &= rel <= DEPTH_AGREEMENT_REL
    return WarpResult(warped, valid, src_view, tgt_view)


def _gaussian_kernel():
    half = SSIM_WINDOW // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2 * SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()

_SSIM_KERNEL = _gaussian_kernel()


def _filter(img):
    return correlate(img, _SSIM_KERNEL, mode="reflect")


def masked_ssim(a, b, mask):
    """Mean SSIM (11x11 Gaussian window, standard constants) over a mask.

    Color images average the per-channel SSIM maps before masking.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if not mask.any():
        raise ValueError("mask selects no pixels")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    maps = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mu_x, mu_y = _filter(x), _filter(y)
        var_x = _filter(x * x) - mu_x ** 2
        var_y = _filter(y * y) - mu_y ** 2
        cov = _filter(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        maps.append(num / den)
    ssim_map = np.mean(maps, axis=0)
    return float(ssim_map[mask].mean())


def masked_lpips(a, b, mask, handle=None):
    """Perceptual distance over the valid region via a pluggable handle.

    The handle maps two (H, W, 3) images to a per-pixel distance map.
    Without a handle the metric is unavailable (CapabilityError), never 0.
    """
    if handle is None:
        raise CapabilityError("no perceptual-metric handle configured")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no pixels")
    dist_map = np.asarray(handle(a, b), dtype=np.float64)
    return float(dist_map[mask].mean())


class FeatureLpipsHandle:
    """Perceptual-distance handle backed by any style feature extractor."""

    def __init__(self, style_handle):
        self.style_handle = style_handle
        self.name = f"feature-l2({style_handle.name})"

    def __call__(self, a, b):
        fa = self.style_handle.features(a).values
        fb = self.style_handle.features(b).values
        dist = np.sqrt(((fa - fb) ** 2).mean(axis=0))
        reps = (np.asarray(a).shape[0] // dist.shape[0],
                np.asarray(a).shape[1] // dist.shape[1])
        return np.kron(dist, np.ones(reps))


def consistency_report(images, depths, cameras, acc_masks=None,
                       pair_policy="both", long_stride=7, lpips_handle=None):
    """Short/long-range consistency over a rendered view sequence.

    Short-range pairs are adjacent indices; long-range pairs sit
    `long_stride` apart.  Means are over valid (reprojected, depth-agreeing)
    pixels only.
    """
    if len(images) < 2:
        raise ValueError("need at least 2 views")
    pairs = {"short": [], "long": []}
    if pair_policy in ("short", "both"):
        pairs["short"] = [(i, i + 1) for i in range(len(images) - 1)]
    if pair_policy in ("long", "both"):
        pairs["long"] = [(i, i + long_stride) for i in
                         range(len(images) - long_stride)]
        if not pairs["long"] and len(images) >= 2:
            pairs["long"] = [(0, len(images) - 1)]

    rows = []
    summary = {}
    for name, plist in pairs.items():
        ssims, lpips_vals = [], []
        for i, j in plist:
            warp = warp_by_depth(
                images[i], depths[i], cameras[i], cameras[j],
                tgt_depth=depths[j],
                src_mask=None if acc_masks is None else acc_masks[i],
                src_view=i, tgt_view=j)
            valid = warp.valid
            if acc_masks is not None:
                valid = valid & np.asarray(acc_masks[j], dtype=bool)
            if not valid.any():
                continue
            row = {"range": name, "source": i, "target": j,
                   "valid_fraction": float(valid.mean())}
            row["ssim"] = masked_ssim(warp.image, images[j], valid)
            ssims.append(row["ssim"])
            if lpips_handle is not None:
                row["lpips"] = masked_lpips(warp.image, images[j], valid,
                                            lpips_handle)
                lpips_vals.append(row["lpips"])
            rows.append(row)
        if ssims:
            summary[name] = {"ssim": float(np.mean(ssims))}
            if lpips_vals:
                summary[name]["lpips"] = float(np.mean(lpips_vals))

    return ConsistencyReport(
        short_range=summary.get("short", {}),
        long_range=summary.get("long", {}),
        pairs=rows,
        pair_policy={"policy": pair_policy, "long_stride": long_stride,
                     "lpips": getattr(lpips_handle, "name", None)})
