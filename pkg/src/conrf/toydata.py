"""Bundled synthetic data: a raytraced two-object scene and a style corpus.

The scene is a red sphere and a blue box on a transparent background,
written in the Blender-manifest layout so the regular loader ingests it.
Ground-truth object masks ship alongside for the selection regression.
Everything is deterministic: closed-form ray intersections, fixed light.
"""

import json
import os

import numpy as np
from PIL import Image

SPHERE_CENTER = np.array([-0.62, 0.0, 0.05])
SPHERE_RADIUS = 0.52
SPHERE_ALBEDO = np.array([0.88, 0.16, 0.14])
BOX_CENTER = np.array([0.62, 0.0, 0.0])
BOX_HALF = np.array([0.46, 0.46, 0.46])
BOX_ALBEDO = np.array([0.15, 0.28, 0.88])
LIGHT_DIR = np.array([0.45, 0.8, 0.4]) / np.linalg.norm([0.45, 0.8, 0.4])

CAMERA_RADIUS = 3.1
CAMERA_ANGLE_X = 0.8
NEAR, FAR = 1.6, 4.8


def _look_at(position, target=np.zeros(3), up=np.array([0.0, 0.0, 1.0])):
    back = position - target
    back = back / np.linalg.norm(back)
    right = np.cross(up, back)
    if np.linalg.norm(right) < 1e-8:     # looking straight along `up`
        right = np.cross(np.array([0.0, 1.0, 0.0]), back)
    right = right / np.linalg.norm(right)
    true_up = np.cross(back, right)
    return np.concatenate([np.stack([right, true_up, back], axis=1),
                           position[:, None]], axis=1)


def _intersect_sphere(origins, dirs):
    oc = origins - SPHERE_CENTER
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - SPHERE_RADIUS ** 2
    disc = b * b - c
    hit = disc > 0
    t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
    t = np.where(t > 1e-6, t, np.inf)
    return t


def _intersect_box(origins, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t0 = (BOX_CENTER - BOX_HALF - origins) * inv
    t1 = (BOX_CENTER + BOX_HALF - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    hit = (tmax > np.maximum(tmin, 1e-6))
    return np.where(hit, np.where(tmin > 1e-6, tmin, np.inf), np.inf)


def _box_normal(points):
    local = (points - BOX_CENTER) / BOX_HALF
    axis = np.argmax(np.abs(local), axis=-1)
    normals = np.zeros_like(points)
    normals[np.arange(len(points)), axis] = np.sign(
        local[np.arange(len(points)), axis])
    return normals


def raytrace(c2w, width, height, focal):
    """Render one view; returns (rgb, alpha, label, depth) arrays.

    label: 0 background, 1 sphere, 2 box.  depth is ray distance.
    """
    ys, xs = np.mgrid[0:height, 0:width]
    dirs_cam = np.stack([
        (xs + 0.5 - width / 2.0) / focal,
        -(ys + 0.5 - height / 2.0) / focal,
        -np.ones_like(xs, dtype=np.float64),
    ], axis=-1)
    dirs = (dirs_cam.reshape(-1, 3) @ c2w[:, :3].T)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(c2w[:, 3], dirs.shape)

    t_sphere = _intersect_sphere(origins, dirs)
    t_box = _intersect_box(origins, dirs)
    t = np.minimum(t_sphere, t_box)
    label = np.where(t_sphere < t_box, 1, 2)
    label = np.where(np.isinf(t), 0, label)

    points = origins + t[:, None] * dirs
    rgb = np.zeros((len(dirs), 3))
    for obj, albedo in ((1, SPHERE_ALBEDO), (2, BOX_ALBEDO)):
        sel = label == obj
        if not sel.any():
            continue
        if obj == 1:
            normals = points[sel] - SPHERE_CENTER
            normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
        else:
            normals = _box_normal(points[sel])
        lambert = np.clip(normals @ LIGHT_DIR, 0.0, 1.0)
        rgb[sel] = albedo * (0.35 + 0.65 * lambert)[:, None]

    alpha = (label > 0).astype(np.float64)
    depth = np.where(np.isinf(t), 0.0, t)
    shape = (height, width)
    return (rgb.reshape(*shape, 3), alpha.reshape(shape),
            label.reshape(shape), depth.reshape(shape))


def _ring_pose(angle, elevation, radius=CAMERA_RADIUS):
    pos = np.array([radius * np.cos(angle) * np.cos(elevation),
                    radius * np.sin(angle) * np.cos(elevation),
                    radius * np.sin(elevation)])
    return _look_at(pos)


def make_toy_scene(out_dir, n_views=16, resolution=64, n_val=4):
    """Write the two-object scene in Blender layout; returns the directory.

    Emits transforms_train.json / transforms_val.json, the frame PNGs
    (RGBA), and masks/<split>_###.png object-label images.
    """
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    focal = 0.5 * resolution / np.tan(0.5 * CAMERA_ANGLE_X)

    for split, count, offset in (("train", n_views, 0.0), ("val", n_val, 0.5)):
        os.makedirs(os.path.join(out_dir, split), exist_ok=True)
        frames = []
        for k in range(count):
            angle = 2.0 * np.pi * (k + offset) / count
            elevation = 0.42 + 0.1 * np.sin(3.0 * angle)
            c2w = _ring_pose(angle, elevation)
            rgb, alpha, label, _ = raytrace(c2w, resolution, resolution, focal)
            rgba = np.concatenate([rgb, alpha[..., None]], axis=-1)
            rel = f"{split}/r_{k:03d}"
            Image.fromarray((rgba * 255).round().astype(np.uint8)).save(
                os.path.join(out_dir, rel + ".png"))
            Image.fromarray(label.astype(np.uint8)).save(
                os.path.join(out_dir, "masks", f"{split}_{k:03d}.png"))
            m = np.concatenate([c2w, [[0, 0, 0, 1]]], axis=0)
            frames.append({"file_path": rel, "transform_matrix": m.tolist()})
        with open(os.path.join(out_dir, f"transforms_{split}.json"), "w") as f:
            json.dump({"camera_angle_x": CAMERA_ANGLE_X, "near": NEAR, "far": FAR,
                       "frames": frames}, f, indent=1)
    return out_dir


def load_toy_masks(scene_dir, split="train"):
    mask_dir = os.path.join(scene_dir, "masks")
    names = sorted(f for f in os.listdir(mask_dir) if f.startswith(split))
    out = []
    for name in names:
        with Image.open(os.path.join(mask_dir, name)) as im:
            out.append(np.asarray(im, dtype=np.int64))
    return out


def make_toy_styles(out_dir, n=64, resolution=64, seed=0):
    """Procedural style corpus: smooth color gradients plus sinusoid texture."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:resolution, 0:resolution] / resolution
    for k in range(n):
        c0, c1 = rng.random(3), rng.random(3)
        direction = rng.normal(size=2)
        direction /= np.linalg.norm(direction)
        ramp = (xs * direction[0] + ys * direction[1] + 1.0) / 2.0
        freq = rng.uniform(2.0, 12.0, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        tex = 0.5 + 0.25 * np.sin(2 * np.pi * freq[0] * xs + phase[0]) \
                  + 0.25 * np.sin(2 * np.pi * freq[1] * ys + phase[1])
        img = ramp[..., None] * c0 + (1 - ramp[..., None]) * c1
        img = np.clip(img * (0.55 + 0.45 * tex[..., None]), 0.0, 1.0)
        Image.fromarray((img * 255).round().astype(np.uint8)).save(
            os.path.join(out_dir, f"style_{k:03d}.png"))
    return out_dir
