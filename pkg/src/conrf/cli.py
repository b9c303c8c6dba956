"""Command-line entry points for every pipeline stage and the service."""

import functools
import json
import os
import sys

import click
import numpy as np
from PIL import Image

from .config import TrainConfig
from .encoders import from_config
from .errors import ConRFError
from .evaluation import FeatureLpipsHandle, consistency_report
from .pipeline import (load_pipeline, orbit_cameras, render_stylized,
                       render_stylized_sequence, resolve_camera, scale_camera)
from .scene_io import load_blender_scene, load_llff_scene, load_style_corpus
from .selection import precompute_clip_targets
from .toydata import make_toy_scene, make_toy_styles
from .training import (load_checkpoint, save_checkpoint, train_feature_field,
                       train_selection_volume, train_stylization)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConRFError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(2)
    return wrapper


def load_scene(path, split="train", downsample=1):
    """Format detection: a transforms manifest means Blender, else LLFF."""
    has_manifest = os.path.exists(os.path.join(path, f"transforms_{split}.json")) \
        or os.path.exists(os.path.join(path, "transforms.json"))
    if has_manifest:
        return load_blender_scene(path, split=split, downsample=downsample)
    return load_llff_scene(path, downsample=downsample)


def parse_sets(pairs):
    overrides = {}
    for item in pairs:
        key, _, raw = item.partition("=")
        if not raw:
            raise click.BadParameter(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return overrides


def build_config(config_path, toy, sets, stage):
    overrides = parse_sets(sets)
    overrides["stage"] = stage
    if toy:
        base = TrainConfig.toy().to_dict()
        base.update(overrides)
        return TrainConfig.load(config_path, overrides=base)
    return TrainConfig.load(config_path, overrides=overrides)


def style_spec(text, image):
    if (text is None) == (image is None):
        raise click.UsageError("give exactly one of --style-text / --style-image")
    return {"text": text} if text is not None else {"image": image}


@click.group()
def main():
    """Feature radiance fields with zero-shot global/local stylization."""


@main.command("make-toy-scene")
@click.option("--out", required=True, type=click.Path())
@click.option("--views", default=16, show_default=True)
@click.option("--resolution", default=64, show_default=True)
@click.option("--val-views", default=4, show_default=True)
def cmd_make_toy_scene(out, views, resolution, val_views):
    """Write the bundled synthetic two-object scene."""
    make_toy_scene(out, n_views=views, resolution=resolution, n_val=val_views)
    click.echo(f"wrote toy scene to {out}")


@main.command("make-toy-styles")
@click.option("--out", required=True, type=click.Path())
@click.option("--count", default=64, show_default=True)
@click.option("--resolution", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_make_toy_styles(out, count, resolution, seed):
    """Write a procedural style-image corpus."""
    make_toy_styles(out, n=count, resolution=resolution, seed=seed)
    click.echo(f"wrote {count} style images to {out}")


@main.command("train-field")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--toy", is_flag=True, help="start from the desk-scale preset")
@click.option("--log", "log_path", type=click.Path())
@click.option("--set", "sets", multiple=True, help="config override key=value")
@click.option("--split", default="train", show_default=True)
@handle_errors
def cmd_train_field(scene, out, config_path, toy, log_path, sets, split):
    """Stage 1: photometric + feature-distillation training of the field."""
    cfg = build_config(config_path, toy, sets, "field")
    dataset = load_scene(scene, split=split)
    ckpt = train_feature_field(cfg, dataset, log_path=log_path)
    save_checkpoint(ckpt, out)
    click.echo(f"stage-1 checkpoint written to {out}")


@main.command("train-style")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--styles", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path())
@click.option("--style-resolution", default=64, show_default=True)
@click.option("--set", "sets", multiple=True)
@handle_errors
def cmd_train_style(scene, checkpoint, styles, out, log_path, style_resolution, sets):
    """Stage 2: train the mapping network and shared decoder."""
    prev = load_checkpoint(checkpoint)
    overrides = parse_sets(sets)
    overrides["stage"] = "stylize"
    cfg = TrainConfig.from_dict({**prev.config.to_dict(), **overrides})
    dataset = load_scene(scene)
    corpus = load_style_corpus(styles, resolution=style_resolution, seed=cfg.seed)
    ckpt = train_stylization(cfg, prev, dataset, corpus, log_path=log_path)
    save_checkpoint(ckpt, out)
    click.echo(f"stage-2 checkpoint written to {out}")


@main.command("cache-clip")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--cache", required=True, type=click.Path())
@handle_errors
def cmd_cache_clip(scene, checkpoint, cache):
    """Preprocessing pass: multi-spatial embedding targets for train-select."""
    prev = load_checkpoint(checkpoint)
    dataset = load_scene(scene)
    image_h, _, _ = from_config(prev.config.encoders)
    maps = precompute_clip_targets(
        dataset, image_h, cache, window_sizes=prev.config.window_sizes,
        stride=prev.config.window_stride or None)
    click.echo(f"cached {len(maps)} multi-spatial maps under {cache}")


@main.command("train-select")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--cache", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--log", "log_path", type=click.Path())
@click.option("--set", "sets", multiple=True)
@handle_errors
def cmd_train_select(scene, checkpoint, cache, out, log_path, sets):
    """Stage 3: distill the CLIP selection head."""
    prev = load_checkpoint(checkpoint)
    overrides = parse_sets(sets)
    overrides["stage"] = "select"
    cfg = TrainConfig.from_dict({**prev.config.to_dict(), **overrides})
    dataset = load_scene(scene)
    ckpt = train_selection_volume(cfg, prev, dataset, cache, log_path=log_path)
    save_checkpoint(ckpt, out)
    click.echo(f"stage-3 checkpoint written to {out}")


@main.command("bind-text")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--caption", required=True)
@click.option("--image", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@handle_errors
def cmd_bind_text(checkpoint, caption, image, out):
    """Bind a caption to an image's embedding in a toy-encoder checkpoint."""
    ckpt = load_checkpoint(checkpoint)
    if ckpt.config.encoders.get("kind") != "toy":
        raise click.UsageError("bindings only apply to toy encoders")
    image_h, _, _ = from_config(ckpt.config.encoders)
    with Image.open(image) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    emb = image_h.encode(arr)
    bindings = dict(ckpt.config.encoders.get("bindings") or {})
    bindings[caption] = emb.values.tolist()
    ckpt.config.encoders["bindings"] = bindings
    save_checkpoint(ckpt, out)
    click.echo(f"bound {caption!r}; checkpoint written to {out}")


def _write_png(path, array):
    Image.fromarray(array).save(path)


@main.command("render")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--scene", type=click.Path(exists=True))
@click.option("--view", type=int)
@click.option("--pose", "pose_path", type=click.Path(exists=True),
              help="JSON file with c2w, focal, width, height")
@click.option("--style-text")
@click.option("--style-image", type=click.Path(exists=True))
@click.option("--style2-text")
@click.option("--style2-image", type=click.Path(exists=True))
@click.option("--content-text")
@click.option("--threshold", type=float)
@click.option("--out", required=True, type=click.Path())
@click.option("--path", "path_spec", help="orbit:N renders an N-view trajectory")
@click.option("--mask-out", type=click.Path())
@click.option("--samples", type=int)
@click.option("--resolution", type=int, help="square output size, multiple of 4")
@handle_errors
def cmd_render(checkpoint, scene, view, pose_path, style_text, style_image,
               style2_text, style2_image, content_text, threshold, out,
               path_spec, mask_out, samples, resolution):
    """Render stylized novel views from a trained checkpoint."""
    dataset = load_scene(scene) if scene else None
    state = load_pipeline(checkpoint, dataset=dataset)
    style = style_spec(style_text, style_image)
    style2 = None
    if style2_text is not None or style2_image is not None:
        style2 = style_spec(style2_text, style2_image)

    if path_spec:
        kind, _, count = path_spec.partition(":")
        if kind != "orbit" or not count.isdigit():
            raise click.UsageError("--path expects orbit:N")
        cameras = orbit_cameras(state, int(count))
        stem, ext = os.path.splitext(out)
        for k, cam in enumerate(cameras):
            if resolution:
                cam = scale_camera(cam, resolution)
            result = render_stylized(state, cam, style, style2=style2,
                                     content_text=content_text,
                                     threshold=threshold, n_samples=samples)
            _write_png(f"{stem}_{k:03d}{ext or '.png'}", result["image"])
        click.echo(f"wrote {len(cameras)} frames to {stem}_*.png")
        return

    if pose_path:
        with open(pose_path) as f:
            camera = resolve_camera(state, json.load(f))
    else:
        camera = resolve_camera(state, {"view": 0 if view is None else view})
    if resolution:
        camera = scale_camera(camera, resolution)
    result = render_stylized(state, camera, style, style2=style2,
                             content_text=content_text, threshold=threshold,
                             n_samples=samples)
    _write_png(out, result["image"])
    if mask_out and result["mask"] is not None:
        _write_png(mask_out, (result["mask"] * 255).astype(np.uint8))
    click.echo(f"wrote {out} ({result['timings']['total_ms']} ms)")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--style-text")
@click.option("--style-image", type=click.Path(exists=True))
@click.option("--pairs", type=click.Choice(["short", "long", "both"]),
              default="both", show_default=True)
@click.option("--long-stride", default=7, show_default=True)
@click.option("--split", default="train", show_default=True)
@click.option("--lpips", type=click.Choice(["none", "toy"]), default="none",
              show_default=True)
@click.option("--min-acc", default=0.5, show_default=True,
              help="opacity threshold for pixels entering the metrics")
@click.option("--out", required=True, type=click.Path())
@handle_errors
def cmd_eval(checkpoint, scene, style_text, style_image, pairs, long_stride,
             split, lpips, min_acc, out):
    """Multi-view consistency report for a stylized sequence."""
    dataset = load_scene(scene, split=split)
    state = load_pipeline(checkpoint, dataset=dataset)
    style = style_spec(style_text, style_image)
    images, depths, accs = render_stylized_sequence(state, dataset.cameras, style)
    handle = FeatureLpipsHandle(state.style_encoder) if lpips == "toy" else None
    masks = [a >= min_acc for a in accs] if min_acc > 0 else None
    report = consistency_report(images, depths, dataset.cameras,
                                acc_masks=masks, pair_policy=pairs,
                                long_stride=long_stride, lpips_handle=handle)
    with open(out, "w") as f:
        f.write(report.to_json())
    click.echo(report.table())
    click.echo(f"report written to {out}")


@main.command("serve")
@click.option("--checkpoint", "checkpoints", multiple=True, required=True,
              help="checkpoint path or id=path (repeatable)")
@click.option("--scene", type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--ui", "ui_dir", type=click.Path(exists=True),
              help="serve a built frontend directory at /ui")
@handle_errors
def cmd_serve(checkpoints, scene, host, port, ui_dir):
    """Serve the HTTP inference API."""
    import uvicorn

    from .service import build_states, create_app
    dataset = load_scene(scene) if scene else None
    states = build_states(checkpoints, dataset)
    uvicorn.run(create_app(states, ui_dir=ui_dir), host=host, port=port)


if __name__ == "__main__":
    main()
