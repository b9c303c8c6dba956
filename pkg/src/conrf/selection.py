"""Local stylization support: multi-spatial CLIP features over sliding
windows, text-driven similarity masks, and masked two-style mixing.

The sliding pass embeds every window with the joint image encoder and
averages, per pixel, the embeddings of all windows containing that pixel.
Window placement right/bottom-aligns the final window on each axis so
every pixel is covered at least once.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ConsistencyError

MASK_DEFAULT_THRESHOLD = 0.5


@dataclass
class MultiSpatialFeatureMap:
    features: np.ndarray     # (D, H, W) per-pixel averaged embeddings
    counts: np.ndarray       # (H, W) windows covering each pixel
    window_sizes: tuple
    stride: int


@dataclass
class SelectionMask:
    mask: np.ndarray         # (H, W) in {0, 1}
    threshold: float
    similarity: np.ndarray   # (H, W) cosine values


def _window_starts(extent, size, stride):
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)   # right/bottom-aligned final window
    return starts


def multi_spatial_features(image, handle, window_sizes=(32,), stride=None):
    """Per-pixel average of joint embeddings over all covering windows."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    window_sizes = tuple(int(s) for s in window_sizes)
    for s in window_sizes:
        if s > min(h, w):
            raise ConfigError(f"window {s} larger than image {h}x{w}")
    feats = None
    counts = np.zeros((h, w), dtype=np.float64)
    for size in window_sizes:
        step = stride if stride is not None else max(size // 2, 1)
        for y0 in _window_starts(h, size, step):
            for x0 in _window_starts(w, size, step):
                emb = handle.encode(image[y0:y0 + size, x0:x0 + size]).values
                if feats is None:
                    feats = np.zeros((emb.shape[0], h, w), dtype=np.float64)
                feats[:, y0:y0 + size, x0:x0 + size] += emb[:, None, None]
                counts[y0:y0 + size, x0:x0 + size] += 1.0
    return MultiSpatialFeatureMap(feats / counts, counts, window_sizes,
                                  stride if stride is not None else -1)


def _cache_key(image, handle, window_sizes, stride):
    payload = {
        "image": hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest(),
        "encoder": handle.name,
        "windows": list(window_sizes),
        "stride": stride if stride is not None else "half",
    }
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]
    return digest, payload


def cached_multi_spatial_features(image, handle, cache_dir,
                                  window_sizes=(32,), stride=None, tag=None):
    """multi_spatial_features with an on-disk cache.

    Cache entries are keyed by image hash, encoder name, and window layout;
    a JSON sidecar carries the manifest and any mismatch forces a recompute.
    """
    os.makedirs(cache_dir, exist_ok=True)
    key, payload = _cache_key(image, handle, window_sizes, stride)
    stem = os.path.join(cache_dir, tag or key)
    npz, sidecar = stem + ".npz", stem + ".json"
    if os.path.exists(npz) and os.path.exists(sidecar):
        try:
            with open(sidecar) as f:
                if json.load(f) == payload:
                    data = np.load(npz)
                    return MultiSpatialFeatureMap(
                        data["features"], data["counts"],
                        tuple(window_sizes),
                        stride if stride is not None else -1)
        except (json.JSONDecodeError, KeyError):
            pass
    result = multi_spatial_features(image, handle, window_sizes, stride)
    np.savez(npz, features=result.features, counts=result.counts)
    with open(sidecar, "w") as f:
        json.dump(payload, f)
    return result


def _view_tag(dataset, split, idx, handle, window_sizes, stride):
    key = _cache_key(dataset.images[idx], handle, window_sizes, stride)[0][:8]
    return f"{dataset.name}_{split}_{idx:03d}_{key}"


def precompute_clip_targets(dataset, handle, cache_dir, window_sizes=(32,),
                            stride=None, split="train"):
    """Multi-spatial maps for every view of a split (the CLIP-head targets)."""
    maps = []
    for idx in dataset.view_indices(split):
        maps.append(cached_multi_spatial_features(
            dataset.images[idx], handle, cache_dir, window_sizes, stride,
            tag=_view_tag(dataset, split, idx, handle, window_sizes, stride)))
    return maps


def load_clip_targets(dataset, handle, cache_dir, window_sizes=(32,),
                      stride=None, split="train"):
    """Load cached multi-spatial maps; missing entries are an error.

    Selection-volume training requires the preprocessing pass to have run
    (`conrf cache-clip` or precompute_clip_targets).
    """
    maps = []
    for idx in dataset.view_indices(split):
        stem = os.path.join(cache_dir or "",
                            _view_tag(dataset, split, idx, handle, window_sizes, stride))
        if not (cache_dir and os.path.exists(stem + ".npz")
                and os.path.exists(stem + ".json")):
            raise ConsistencyError(
                f"multi-spatial cache missing for view {idx} under {cache_dir!r}; "
                "run the preprocessing pass first (conrf cache-clip)")
        maps.append(cached_multi_spatial_features(
            dataset.images[idx], handle, cache_dir, window_sizes, stride,
            tag=_view_tag(dataset, split, idx, handle, window_sizes, stride)))
    return maps


def similarity_map(content_embedding, clip_features):
    """Cosine similarity between one embedding and (..., D) rendered features.

    Both operands are L2-normalized here; zero vectors map to similarity 0.
    """
    emb = np.asarray(
        content_embedding.values if hasattr(content_embedding, "values")
        else content_embedding, dtype=np.float64)
    feats = np.asarray(clip_features, dtype=np.float64)
    emb_norm = np.linalg.norm(emb)
    if emb_norm < 1e-12:
        return np.zeros(feats.shape[:-1])
    feat_norm = np.linalg.norm(feats, axis=-1)
    z = feats @ (emb / emb_norm)
    out = np.zeros_like(z)
    np.divide(z, feat_norm, out=out, where=feat_norm > 1e-12)
    return np.clip(out, -1.0, 1.0)


def mask_from_similarity(z, threshold=MASK_DEFAULT_THRESHOLD, soft=False, softness=0.1):
    """Select the region similar to the prompt: mask = (z >= t).

    soft=True returns sigmoid((z - t) / softness) instead of a hard mask.
    """
    if not -1.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [-1, 1], got {threshold}")
    z = np.asarray(z, dtype=np.float64)
    if soft:
        mask = 1.0 / (1.0 + np.exp(-(z - threshold) / softness))
    else:
        mask = (z >= threshold).astype(np.float64)
    return SelectionMask(mask, float(threshold), z)


def local_transfer(weights, features, mask, stats1, stats2):
    """Masked mixing of two per-point style transfers.

    weights (B, N), features (B, N, C), mask (B,) aligned to the rendered
    pixel lattice.  mask==1 regions get stats1, the rest stats2.
    """
    from .style import transfer_per_point
    mask = mask.mask if isinstance(mask, SelectionMask) else np.asarray(mask)
    mask = mask.reshape(-1).astype(np.float64)
    if mask.shape[0] != np.asarray(weights.data if isinstance(weights, ad.Tensor)
                                   else weights).shape[0]:
        raise ValueError("mask length does not match the ray batch")
    t1 = transfer_per_point(weights, features, stats1)
    t2 = transfer_per_point(weights, features, stats2)
    if isinstance(t1, ad.Tensor):
        m = ad.Tensor(mask[:, None])
        return t1 * m + t2 * (1.0 - mask[:, None])
    return t1 * mask[:, None] + t2 * (1.0 - mask[:, None])
