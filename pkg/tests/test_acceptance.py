"""Acceptance suite: one test per release criterion, each printing a
pass/fail line.  Run with `pytest tests/test_acceptance.py -v -s`.

The training regressions pin thresholds established by this repo's own
baseline runs on the bundled two-object scene (16 views, 64x64).
"""

import base64
import io
import time

import numpy as np
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient
from PIL import Image

from conrf import autodiff as ad
from conrf.cli import main as cli_main
from conrf.config import TrainConfig
from conrf.encoders import from_config
from conrf.evaluation import consistency_report, psnr
from conrf.field import compute_weights, render
from conrf.pipeline import load_pipeline, render_stylized
from conrf.scene_io import (generate_patch_rays, generate_rays,
                            load_blender_scene, load_style_corpus)
from conrf.selection import (local_transfer, mask_from_similarity,
                             multi_spatial_features, precompute_clip_targets,
                             similarity_map)
from conrf.service import build_states, create_app
from conrf.style import StyleStatistics, decode, transfer_deferred, transfer_per_point
from conrf.toydata import load_toy_masks
from conrf.training import (render_view_rgb, save_checkpoint,
                            train_feature_field, train_selection_volume,
                            train_stylization)

from conftest import object_crop
from util_grad import fd_grad, rel_err


def check(name, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f"  ({detail})" if detail else "")
    print("\n" + line, flush=True)
    assert ok, line


# -- trained-pipeline fixtures (one baseline run shared by the regressions) --

@pytest.fixture(scope="session")
def accept(toy_scene_dir, toy_scene, toy_styles_dir, tmp_path_factory):
    """Full toy-preset pipeline; returns checkpoints, timings and paths."""
    out = tmp_path_factory.mktemp("accept")
    cfg = TrainConfig.toy()
    image_h, _, _ = from_config(cfg.encoders)
    masks = load_toy_masks(toy_scene_dir, "train")
    cfg.encoders["bindings"] = {
        "the red ball": image_h.encode(
            object_crop(toy_scene, masks, 1)).values.tolist(),
        "the blue box": image_h.encode(
            object_crop(toy_scene, masks, 2)).values.tolist(),
    }
    corpus = load_style_corpus(toy_styles_dir, resolution=64, seed=0)
    timings = {}

    t0 = time.perf_counter()
    ck1 = train_feature_field(cfg, toy_scene)
    timings["stage1"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ck2 = train_stylization(cfg, ck1, toy_scene, corpus)
    timings["stage2"] = time.perf_counter() - t0

    cfg_ablated = TrainConfig.from_dict(
        {**cfg.to_dict(), "use_style_feature_loss": False})
    ck2_ablated = train_stylization(cfg_ablated, ck1, toy_scene, corpus)

    cache = str(out / "clip_cache")
    precompute_clip_targets(toy_scene, image_h, cache,
                            window_sizes=cfg.window_sizes,
                            stride=cfg.window_stride or None)
    t0 = time.perf_counter()
    ck3 = train_selection_volume(cfg, ck2, toy_scene, cache)
    timings["stage3"] = time.perf_counter() - t0

    ckpt_path = str(out / "stage3.npz")
    save_checkpoint(ck3, ckpt_path)
    return {"cfg": cfg, "stage1": ck1, "stage2": ck2,
            "stage2_ablated": ck2_ablated, "stage3": ck3,
            "ckpt_path": ckpt_path, "timings": timings, "out_dir": out}


# -- criteria ---------------------------------------------------------------

def test_transfer_equivalence_1000_trials():
    """transfer_per_point == transfer_deferred over 1000 random trials."""
    rng = np.random.default_rng(1)
    # warm the kernels before timing
    compute_weights(np.ones((2, 4)), np.ones((2, 4)))
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        b, n, c = 8, 16, 8
        w = rng.random((b, n)) * rng.choice([0.0, 0.05, 0.9])
        feats = rng.normal(size=(b, n, c)) * rng.choice([0.1, 1.0, 10.0])
        stats = StyleStatistics(rng.normal(size=c), np.abs(rng.normal(size=c)))
        per_point = transfer_per_point(w, feats, stats)
        deferred = transfer_deferred((w[..., None] * feats).sum(axis=1),
                                     w.sum(axis=1), stats)
        denom = max(np.abs(deferred).max(), 1e-12)
        worst = max(worst, np.abs(per_point - deferred).max() / denom)
    elapsed = time.perf_counter() - t0
    check("transfer per-point == deferred (1000 trials, rel<=1e-5, <10s)",
          worst <= 1e-5 and elapsed < 10.0,
          f"worst rel err {worst:.2e}, {elapsed:.2f}s")


def test_partition_of_unity_10000_rays():
    """sum(w) + T == 1 within 1e-6; transmittance exactly monotone."""
    rng = np.random.default_rng(2)
    sigma = np.abs(rng.normal(size=(10000, 64))) * rng.uniform(0.01, 20.0, (10000, 1))
    delta = np.abs(rng.normal(size=(10000, 64))) * 0.1
    t0 = time.perf_counter()
    w, t = compute_weights(sigma, delta)
    err = np.abs(w.sum(axis=1) + t - 1.0).max()
    trans = np.exp(-np.cumsum(sigma * delta, axis=1))
    monotone = (np.diff(trans, axis=1) <= 0.0).all()
    elapsed = time.perf_counter() - t0
    check("volume rendering partition of unity (1e-6, monotone, <10s)",
          err <= 1e-6 and monotone and elapsed < 10.0,
          f"max |sum w + T - 1| = {err:.2e}, {elapsed:.2f}s")


def brute_force_multispatial(image, handle, window_sizes, stride):
    h, w = image.shape[:2]
    total = np.zeros((handle.width, h, w))
    count = np.zeros((h, w))
    for size in window_sizes:
        step = stride if stride is not None else max(size // 2, 1)
        ys = list(range(0, h - size + 1, step))
        if ys[-1] != h - size:
            ys.append(h - size)
        xs = list(range(0, w - size + 1, step))
        if xs[-1] != w - size:
            xs.append(w - size)
        for y0 in ys:
            for x0 in xs:
                emb = handle.encode(image[y0:y0 + size, x0:x0 + size]).values
                total[:, y0:y0 + size, x0:x0 + size] += emb[:, None, None]
                count[y0:y0 + size, x0:x0 + size] += 1
    return total / count, count


def test_sliding_window_oracle(toy_encoders):
    """Exact equality against brute-force enumeration on all fixtures."""
    image_h = toy_encoders[0]
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    exact = True
    for size in (8, 16):
        for _ in range(4):
            img = rng.random((size, size, 3))
            got = multi_spatial_features(img, image_h, window_sizes=(2, 3, 4))
            want, counts = brute_force_multispatial(img, image_h, (2, 3, 4), None)
            exact &= np.array_equal(got.features, want)
            exact &= np.array_equal(got.counts, counts)
    pattern = multi_spatial_features(rng.random((3, 3, 3)), image_h,
                                     window_sizes=(2,), stride=1).counts
    pattern_ok = np.array_equal(pattern, [[1, 2, 1], [2, 4, 2], [1, 2, 1]])
    elapsed = time.perf_counter() - t0
    check("multi-spatial sliding window == brute force (exact, <30s)",
          exact and pattern_ok and elapsed < 30.0,
          f"count pattern {'ok' if pattern_ok else 'WRONG'}, {elapsed:.2f}s")


def test_gradient_checks_with_toy_encoders(toy_encoders):
    """Analytic vs central-difference gradients for all four losses (<=1e-3)."""
    from conrf.training import (loss_clip_field, loss_consistency,
                                loss_style_feature, loss_stylized)
    _, _, style_h = toy_encoders
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = {}

    mu_t, sig_t = rng.normal(size=6), np.abs(rng.normal(size=6)) + 0.1
    x0 = rng.normal(size=12)

    def lf(x):
        return loss_style_feature((x[:6], np.abs(x[6:])), (mu_t, sig_t)).item()

    xt = ad.Tensor(x0, requires_grad=True)
    loss_style_feature((xt[:6], ad.absolute(xt[6:])), (mu_t, sig_t)).backward()
    worst["l_f"] = rel_err(xt.grad, fd_grad(lf, x0.copy()))

    # stylized loss through the toy style extractor on a small image
    img0 = rng.random((1, 3, 8, 8))
    t_target = rng.normal(size=(1, 24, 2, 2))
    style_stats = [(rng.normal(size=c), np.abs(rng.normal(size=c)) + 0.1)
                   for c in (12, 16, 24)]

    def stylized_value(x):
        from conrf.style import channel_stats_graph
        maps = style_h.features_graph(ad.Tensor(x), 3)
        stats = [channel_stats_graph(m) for m in maps]
        got = [(mu[0], sig[0]) for mu, sig in stats]
        top = maps[-1]
        return loss_stylized(top, t_target, got, style_stats, lam=20.0).item()

    xt = ad.Tensor(img0, requires_grad=True)
    from conrf.style import channel_stats_graph
    maps = style_h.features_graph(xt, 3)
    stats = [channel_stats_graph(m) for m in maps]
    got = [(mu[0], sig[0]) for mu, sig in stats]
    loss_stylized(maps[-1], t_target, got, style_stats, lam=20.0).backward()
    worst["l_stylized"] = rel_err(xt.grad, fd_grad(stylized_value, img0.copy()))

    a0 = rng.random((1, 3, 6, 6))
    b0 = rng.random((1, 3, 6, 6))
    xt = ad.Tensor(a0, requires_grad=True)
    loss_consistency(xt, b0).backward()
    worst["l_consis"] = rel_err(
        xt.grad, fd_grad(lambda x: loss_consistency(x, b0).item(), a0.copy()))

    r0 = rng.normal(size=(16, 8))
    targ = rng.normal(size=(16, 8))
    xt = ad.Tensor(r0, requires_grad=True)
    loss_clip_field(xt, targ).backward()
    worst["l_clip"] = rel_err(
        xt.grad, fd_grad(lambda x: loss_clip_field(x, targ).item(), r0.copy()))

    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-3 for v in worst.values()) and elapsed < 120.0
    check("gradient checks for l_f / l_stylized / l_consis / l_clip (<=1e-3, <2min)",
          ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")


def test_stage1_photometric_regression(accept, toy_scene):
    """2k-step photometric training reaches PSNR >= 25 dB on train views."""
    ck = accept["stage1"]
    cfg = accept["cfg"]
    mses = []
    for vi in range(len(toy_scene)):
        rgb, _ = render_view_rgb(ck.field, toy_scene, vi, cfg.n_samples)
        mses.append(((rgb - toy_scene.images[vi]) ** 2).mean())
    value = float(-10.0 * np.log10(np.mean(mses)))
    elapsed = accept["timings"]["stage1"]
    check("stage-1 toy regression: photometric PSNR >= 25 dB (<=45 min CPU)",
          value >= 25.0 and elapsed <= 45 * 60,
          f"PSNR {value:.2f} dB, {elapsed:.0f}s")


def test_stage1_decode_regression(accept, toy_scene):
    """Decode of unstylized rendered features: masked PSNR >= 20 dB."""
    ck = accept["stage1"]
    cfg = accept["cfg"]
    values = []
    for vi in range(len(toy_scene)):
        rays, (hc, wc) = generate_patch_rays(toy_scene, vi, cfg.patch_stride)
        bundle = render(ck.field, rays, heads=("feature",), n_samples=cfg.n_samples)
        fimg = bundle.feature.reshape(hc, wc, -1).transpose(2, 0, 1)
        out = decode(ck.decoder, fimg)
        mask = np.kron(bundle.acc.reshape(hc, wc) > 0.5,
                       np.ones((cfg.patch_stride, cfg.patch_stride), bool))
        values.append(psnr(out, toy_scene.images[vi], mask))
    mean_psnr = float(np.mean(values))
    check("stage-1 decode regression: masked PSNR >= 20 dB on the toy scene",
          mean_psnr >= 20.0, f"mean masked PSNR {mean_psnr:.2f} dB")


def test_stage2_style_feature_regression(accept):
    """Held-out style-feature loss drops >= 10x; the ablation fails this."""
    full = accept["stage2"].metrics
    ablated = accept["stage2_ablated"].metrics
    reduction = full["heldout_lf_initial"] / max(full["heldout_lf_final"], 1e-12)
    reduction_ablated = (ablated["heldout_lf_initial"]
                         / max(ablated["heldout_lf_final"], 1e-12))
    check("stage-2 toy regression: held-out l_f reduced >= 10x; ablation fails",
          reduction >= 10.0 and reduction_ablated < 10.0,
          f"full {reduction:.0f}x, ablated {reduction_ablated:.2f}x")


def test_stage3_selection_iou(accept, toy_scene_dir, toy_scene):
    """Rendered selection masks hit IoU >= 0.8 against the planted regions."""
    ck = accept["stage3"]
    cfg = accept["cfg"]
    _, text_h, _ = from_config(cfg.encoders)
    val = load_blender_scene(toy_scene_dir, split="val")
    vmasks = load_toy_masks(toy_scene_dir, "val")
    ious = []
    for caption, label in (("the red ball", 1), ("the blue box", 2)):
        emb = text_h.encode(caption)
        for vi in range(len(val)):
            rays = generate_rays(val, vi)
            bundle = render(ck.field, rays, heads=("clip",), n_samples=cfg.n_samples)
            z = similarity_map(emb, bundle.clip).reshape(val.height, val.width)
            acc = bundle.acc.reshape(val.height, val.width)
            mask = mask_from_similarity(z, 0.5).mask.astype(bool) & (acc >= 0.5)
            gt = vmasks[vi] == label
            ious.append((mask & gt).sum() / max((mask | gt).sum(), 1))
    check("stage-3 toy regression: selection mask IoU >= 0.8 at t=0.5",
          min(ious) >= 0.8, f"min IoU {min(ious):.3f}, mean {np.mean(ious):.3f}")


def test_mask_partition_exact():
    """local_transfer with M and 1-M reproduces both globals regionwise."""
    rng = np.random.default_rng(5)
    ok = True
    for _ in range(50):
        w = rng.random((20, 12)) * 0.08
        feats = rng.normal(size=(20, 12, 6))
        s1 = StyleStatistics(rng.normal(size=6), np.abs(rng.normal(size=6)))
        s2 = StyleStatistics(rng.normal(size=6), np.abs(rng.normal(size=6)))
        m = (rng.random(20) > 0.5).astype(float)
        mixed = local_transfer(w, feats, m, s1, s2)
        swapped = local_transfer(w, feats, 1.0 - m, s2, s1)
        g1 = transfer_per_point(w, feats, s1)
        g2 = transfer_per_point(w, feats, s2)
        sel = m.astype(bool)
        ok &= np.array_equal(mixed, swapped)
        ok &= np.array_equal(mixed[sel], g1[sel])
        ok &= np.array_equal(mixed[~sel], g2[~sel])
    check("mask partition reconstructs both global transfers exactly", ok)


def test_end_to_end_determinism(accept, toy_scene_dir, toy_scene, tmp_path):
    """conrf render twice -> identical PNGs; CLI and service pixel-identical."""
    runner = CliRunner()
    args = ["render", "--checkpoint", accept["ckpt_path"],
            "--scene", toy_scene_dir, "--view", "3",
            "--style-text", "a stormy nocturne"]
    p1, p2 = str(tmp_path / "a.png"), str(tmp_path / "b.png")
    r1 = runner.invoke(cli_main, args + ["--out", p1], catch_exceptions=False)
    r2 = runner.invoke(cli_main, args + ["--out", p2], catch_exceptions=False)
    assert r1.exit_code == 0 and r2.exit_code == 0
    cli_bytes_1 = open(p1, "rb").read()
    cli_bytes_2 = open(p2, "rb").read()

    states = build_states([f"main={accept['ckpt_path']}"], dataset=toy_scene)
    client = TestClient(create_app(states))
    resp = client.post("/render", json={
        "pose": {"view": 3}, "style": {"text": "a stormy nocturne"}})
    assert resp.status_code == 200
    served = base64.b64decode(resp.json()["image_b64"])
    cli_img = np.asarray(Image.open(io.BytesIO(cli_bytes_1)))
    srv_img = np.asarray(Image.open(io.BytesIO(served)))
    check("end-to-end determinism: repeat renders bitwise, CLI == service",
          cli_bytes_1 == cli_bytes_2 and np.array_equal(cli_img, srv_img),
          f"png {len(cli_bytes_1)} bytes")


def test_evaluation_sanity_short_vs_long(accept, toy_scene):
    """Unstylized sequence: short-range SSIM strictly above long-range."""
    ck = accept["stage3"]
    cfg = accept["cfg"]
    images, depths, masks = [], [], []
    for vi in range(len(toy_scene)):
        rgb, bundle = render_view_rgb(ck.field, toy_scene, vi, cfg.n_samples)
        images.append(rgb)
        depths.append(bundle.depth.reshape(toy_scene.height, toy_scene.width))
        masks.append(bundle.acc.reshape(toy_scene.height, toy_scene.width) >= 0.5)
    report = consistency_report(images, depths, toy_scene.cameras,
                                acc_masks=masks, long_stride=7)
    short, long_ = report.short_range["ssim"], report.long_range["ssim"]
    check("evaluation sanity: short-range SSIM > long-range SSIM (strict)",
          short > long_, f"short {short:.4f} vs long {long_:.4f}")
