import numpy as np
import pytest
from PIL import Image

from conrf.config import TrainConfig
from conrf.encoders import from_config, make_toy_encoders
from conrf.scene_io import load_blender_scene, load_style_corpus
from conrf.selection import precompute_clip_targets
from conrf.toydata import load_toy_masks, make_toy_scene, make_toy_styles
from conrf.training import (save_checkpoint, train_feature_field,
                            train_selection_volume, train_stylization)


@pytest.fixture(scope="session")
def toy_scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    return make_toy_scene(str(out), n_views=16, resolution=64, n_val=4)


@pytest.fixture(scope="session")
def toy_scene(toy_scene_dir):
    return load_blender_scene(toy_scene_dir, split="train", near=1.6, far=4.8)


@pytest.fixture(scope="session")
def toy_styles_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("styles")
    return make_toy_styles(str(out), n=48, resolution=64, seed=3)


@pytest.fixture(scope="session")
def toy_encoders():
    return make_toy_encoders(seed=5, width=16, style_channels=(12, 16, 24))


def write_png(path, array):
    """uint8 image writer for fixtures; accepts float [0,1] or uint8."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def object_crop(scene, masks, label, view=0):
    """Bounding-box crop of one toy object, for caption bindings."""
    img, m = scene.images[view], masks[view]
    ys, xs = np.where(m == label)
    return img[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


@pytest.fixture(scope="session")
def mini_checkpoints(toy_scene_dir, toy_scene, toy_styles_dir, tmp_path_factory):
    """Functionally complete (but barely trained) checkpoints for API tests."""
    out = tmp_path_factory.mktemp("ckpt")
    cfg = TrainConfig.toy(field_steps=30, distill_steps=20, style_steps=20,
                          select_steps=20, batch_rays=128, n_samples=16,
                          grid_resolution=16, feature_resolution=12,
                          clip_resolution=12)
    image_h, _, _ = from_config(cfg.encoders)
    masks = load_toy_masks(toy_scene_dir, "train")
    cfg.encoders["bindings"] = {
        "the red ball": image_h.encode(object_crop(toy_scene, masks, 1)).values.tolist(),
        "the blue box": image_h.encode(object_crop(toy_scene, masks, 2)).values.tolist(),
    }
    corpus = load_style_corpus(toy_styles_dir, resolution=64, seed=0)
    ck1 = train_feature_field(cfg, toy_scene)
    ck2 = train_stylization(cfg, ck1, toy_scene, corpus)
    cache = str(out / "clip_cache")
    precompute_clip_targets(toy_scene, image_h, cache,
                            window_sizes=cfg.window_sizes,
                            stride=cfg.window_stride or None)
    ck3 = train_selection_volume(cfg, ck2, toy_scene, cache)
    paths = {"stage1": str(out / "stage1.npz"),
             "stage2": str(out / "stage2.npz"),
             "stage3": str(out / "stage3.npz"),
             "cache": cache}
    save_checkpoint(ck1, paths["stage1"])
    save_checkpoint(ck2, paths["stage2"])
    save_checkpoint(ck3, paths["stage3"])
    return paths
