"""Scene and style-corpus loading plus camera ray generation.

Supported scene layouts:
  * LLFF forward-facing: ``poses_bounds.npy`` (N x 17 float64: flattened
    3x5 pose-plus-hwf matrix and near/far per image) next to ``images/``.
  * Blender-style 360: ``transforms[_split].json`` with ``camera_angle_x``
    and per-frame 4x4 ``transform_matrix`` (row-major, OpenGL axes).

All cameras use the right-up-backwards (OpenGL) convention: the camera
looks along -z in its own frame.  LLFF poses are stored with
[down, right, backwards] rotation columns; the loader rewrites them to
[right, up, backwards] (new_x = old_y, new_y = -old_x).  A reprojection
fixture in the tests pins this convention.

Images are float64 in [0, 1] everywhere downstream.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConsistencyError, SceneFormatError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Camera:
    focal: float            # pixels
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray         # (3, 4) camera-to-world
    near: float
    far: float

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (3, 4):
            raise ValueError(f"c2w must be 3x4, got {self.c2w.shape}")
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        if not (self.near > 0 and self.far > self.near):
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if not np.isfinite(self.c2w).all():
            raise ValueError("pose contains non-finite values")
        r = self.c2w[:, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-5:
            raise ValueError("rotation block is not orthonormal")

    @property
    def position(self):
        return self.c2w[:, 3]

    @property
    def forward(self):
        # looks along -z of the camera frame
        return -self.c2w[:, 2]

    def rays_through(self, px, py):
        """World-space rays through image-plane positions (px, py).

        px/py are float pixel coordinates; the center of integer pixel
        (x, y) sits at (x + 0.5, y + 0.5).
        """
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        dirs_cam = np.stack([
            (px + 0.5 - self.cx) / self.focal,
            -(py + 0.5 - self.cy) / self.focal,
            -np.ones_like(px),
        ], axis=-1)
        dirs = dirs_cam @ self.c2w[:, :3].T
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs

    def project(self, points):
        """Project world points to float pixel coordinates (inverse of rays_through)."""
        pts = (np.asarray(points, dtype=np.float64) - self.position) @ self.c2w[:, :3]
        z = -pts[..., 2]
        px = self.focal * pts[..., 0] / z + self.cx - 0.5
        py = -self.focal * pts[..., 1] / z + self.cy - 0.5
        return np.stack([px, py], axis=-1), z


@dataclass
class SceneDataset:
    images: list            # H x W x 3 float64 in [0, 1]
    cameras: list
    bbox: np.ndarray        # (2, 3) min/max corners
    splits: list            # 'train' / 'val' per view
    name: str = "scene"

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ConsistencyError(
                f"{len(self.images)} images but {len(self.cameras)} cameras")
        if len(self.images) < 2:
            raise ConsistencyError("a scene needs at least 2 views")
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise ConsistencyError(f"views disagree on resolution: {shapes}")

    def __len__(self):
        return len(self.images)

    @property
    def height(self):
        return self.images[0].shape[0]

    @property
    def width(self):
        return self.images[0].shape[1]

    def view_indices(self, split=None):
        if split is None:
            return list(range(len(self.images)))
        return [i for i, s in enumerate(self.splits) if s == split]


@dataclass
class RayBatch:
    origins: np.ndarray     # (B, 3)
    directions: np.ndarray  # (B, 3) unit
    near: np.ndarray        # (B,)
    far: np.ndarray         # (B,)
    pixels: np.ndarray      # (B, 2) float (x, y) source coordinates

    def __post_init__(self):
        norms = np.linalg.norm(self.directions, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ValueError("ray directions must be unit length")
        if not (self.far > self.near).all():
            raise ValueError("far must exceed near for every ray")

    def __len__(self):
        return self.origins.shape[0]


def _load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return arr


def _downsample(img, factor):
    if factor == 1:
        return img
    h, w = img.shape[:2]
    h, w = h - h % factor, w - w % factor
    img = img[:h, :w]
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))


def _list_images(directory):
    if not os.path.isdir(directory):
        raise SceneFormatError(f"image directory not found: {directory}")
    names = sorted(f for f in os.listdir(directory)
                   if f.lower().endswith(IMAGE_EXTENSIONS))
    return [os.path.join(directory, f) for f in names]


def _frustum_bbox(cameras):
    """Bounding box over all camera frustum corners at near and far."""
    pts = []
    for cam in cameras:
        corners_x = np.array([0.0, cam.width - 1.0, 0.0, cam.width - 1.0])
        corners_y = np.array([0.0, 0.0, cam.height - 1.0, cam.height - 1.0])
        origins, dirs = cam.rays_through(corners_x, corners_y)
        for depth in (cam.near, cam.far):
            pts.append(origins + depth * dirs)
        pts.append(cam.position[None])
    pts = np.concatenate(pts, axis=0)
    return np.stack([pts.min(axis=0), pts.max(axis=0)])


def _convergence_bbox(cameras):
    """Box around the least-squares intersection point of the optical axes."""
    a_rows, b_rows = [], []
    for cam in cameras:
        d = cam.forward
        a_rows.append(np.eye(3) - np.outer(d, d))
        b_rows.append((np.eye(3) - np.outer(d, d)) @ cam.position)
    a = np.sum(a_rows, axis=0)
    b = np.sum(b_rows, axis=0)
    center = np.linalg.lstsq(a, b, rcond=None)[0]
    dists = [np.linalg.norm(cam.position - center) for cam in cameras]
    half = 0.5 * float(np.median(dists))
    return np.stack([center - half, center + half])


def load_llff_scene(root, downsample=1, holdout=8, name=None):
    """Load an LLFF forward-facing scene; every `holdout`-th view tags as val."""
    pose_path = os.path.join(root, "poses_bounds.npy")
    if not os.path.exists(pose_path):
        raise SceneFormatError(f"missing LLFF pose file: {pose_path}")
    arr = np.load(pose_path)
    if arr.ndim != 2 or arr.shape[1] != 17:
        raise SceneFormatError(
            f"LLFF pose file must be N x 17, got shape {arr.shape}")
    poses = arr[:, :15].reshape(-1, 3, 5)
    bounds = arr[:, 15:]

    paths = _list_images(os.path.join(root, "images"))
    if len(paths) != poses.shape[0]:
        raise ConsistencyError(
            f"{len(paths)} images but {poses.shape[0]} pose rows in {root}")

    images, cameras, splits = [], [], []
    for i, path in enumerate(paths):
        img = _downsample(_load_image(path)[:, :, :3], downsample)
        h_file, w_file, focal = poses[i, :, 4]
        # [down, right, back] columns -> [right, up, back]
        rot = poses[i, :, :3]
        rot = np.stack([rot[:, 1], -rot[:, 0], rot[:, 2]], axis=1)
        c2w = np.concatenate([rot, poses[i, :, 3:4]], axis=1)
        h, w = img.shape[:2]
        cam = Camera(
            focal=float(focal) * w / w_file,
            cx=w / 2.0, cy=h / 2.0, width=w, height=h,
            c2w=c2w,
            near=float(bounds[i, 0]) * 0.9,
            far=float(bounds[i, 1]) * 1.1,
        )
        images.append(img)
        cameras.append(cam)
        splits.append("val" if holdout and i % holdout == 0 and i > 0 else "train")

    return SceneDataset(images, cameras, _frustum_bbox(cameras),
                        splits, name=name or os.path.basename(os.path.normpath(root)))


def load_blender_scene(root, split="train", near=2.0, far=6.0, downsample=1, name=None):
    """Load a Blender-style 360 scene split, compositing alpha onto white."""
    manifest = os.path.join(root, f"transforms_{split}.json")
    if not os.path.exists(manifest):
        manifest = os.path.join(root, "transforms.json")
    if not os.path.exists(manifest):
        raise SceneFormatError(f"no transforms manifest found under {root}")
    try:
        with open(manifest) as f:
            meta = json.load(f)
        angle_x = float(meta["camera_angle_x"])
        frames = meta["frames"]
        near = float(meta.get("near", near))
        far = float(meta.get("far", far))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise SceneFormatError(f"malformed manifest {manifest}: {e}") from e

    images, cameras, splits = [], [], []
    for frame in frames:
        rel = frame["file_path"]
        path = os.path.join(root, rel)
        if not os.path.splitext(path)[1]:
            path += ".png"
        if not os.path.exists(path):
            raise SceneFormatError(f"frame image not found: {path}")
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        if arr.shape[-1] == 4:
            rgb, alpha = arr[..., :3], arr[..., 3:]
            arr = rgb * alpha + (1.0 - alpha)
        arr = _downsample(arr, downsample)
        h, w = arr.shape[:2]
        m = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4):
            raise SceneFormatError(f"transform_matrix must be 4x4 in {manifest}")
        cam = Camera(
            focal=0.5 * w / np.tan(0.5 * angle_x),
            cx=w / 2.0, cy=h / 2.0, width=w, height=h,
            c2w=m[:3, :4], near=near, far=far,
        )
        images.append(arr)
        cameras.append(cam)
        splits.append(split)

    bbox = _convergence_bbox(cameras) if len(cameras) >= 3 else _frustum_bbox(cameras)
    return SceneDataset(images, cameras, bbox, splits,
                        name=name or os.path.basename(os.path.normpath(root)))


def generate_rays(dataset, view_index, pixels=None):
    """Rays through pixel centers of one view.

    pixels: (B, 2) integer (x, y) array, or None for the full image in
    row-major order.
    """
    if not 0 <= view_index < len(dataset):
        raise IndexError(f"view index {view_index} out of range for {len(dataset)} views")
    cam = dataset.cameras[view_index]
    if pixels is None:
        ys, xs = np.mgrid[0:cam.height, 0:cam.width]
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    pixels = np.asarray(pixels)
    origins, dirs = cam.rays_through(pixels[:, 0].astype(np.float64),
                                     pixels[:, 1].astype(np.float64))
    n = pixels.shape[0]
    return RayBatch(origins, dirs,
                    np.full(n, cam.near), np.full(n, cam.far),
                    pixels.astype(np.float64))


def generate_patch_rays(dataset, view_index, stride):
    """One ray per stride x stride pixel cell, through the cell center.

    Returns (RayBatch, (h_cells, w_cells)).  Used to render feature patches
    whose decoder upsamples by the same stride.
    """
    if not 0 <= view_index < len(dataset):
        raise IndexError(f"view index {view_index} out of range for {len(dataset)} views")
    cam = dataset.cameras[view_index]
    hc, wc = cam.height // stride, cam.width // stride
    ys, xs = np.mgrid[0:hc, 0:wc]
    px = xs.ravel() * stride + (stride - 1) / 2.0
    py = ys.ravel() * stride + (stride - 1) / 2.0
    origins, dirs = cam.rays_through(px, py)
    n = px.shape[0]
    batch = RayBatch(origins, dirs, np.full(n, cam.near), np.full(n, cam.far),
                     np.stack([px, py], axis=-1))
    return batch, (hc, wc)


class StyleCorpus:
    """Deterministically shuffled directory of style images.

    Every yield is (resolution, resolution, 3) float64 in [0, 1]; grayscale
    sources are replicated to 3 channels.
    """

    def __init__(self, root, resolution=256, seed=0):
        paths = []
        for dirpath, _, files in sorted(os.walk(root)):
            for f in sorted(files):
                if f.lower().endswith(IMAGE_EXTENSIONS):
                    paths.append(os.path.join(dirpath, f))
        if not paths:
            raise SceneFormatError(f"style corpus {root} contains no readable images")
        order = np.random.default_rng(seed).permutation(len(paths))
        self.paths = [paths[i] for i in order]
        self.root = root
        self.resolution = int(resolution)
        self.seed = seed

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        with Image.open(self.paths[i]) as im:
            im = im.convert("RGB").resize((self.resolution, self.resolution),
                                          Image.BILINEAR)
            return np.asarray(im, dtype=np.float64) / 255.0

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def load_style_corpus(root, resolution=256, seed=0):
    return StyleCorpus(root, resolution=resolution, seed=seed)
