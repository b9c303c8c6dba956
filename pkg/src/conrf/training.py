"""Losses and the three-stage optimization.

Stage 1 (field): photometric training of density+RGB grids on rays, then
feature-grid distillation toward the style extractor's top layer with a
joint decoder-reconstruction term (density frozen for the distill phase).
Stage 2 (stylize): dual-branch training of the mapping network and the
shared decoder on a style corpus; the field is frozen and content feature
patches are precomputed once.
Stage 3 (select): L1 distillation of the CLIP-feature head toward cached
multi-spatial embeddings; only the CLIP grid trains.

All losses reduce by mean except the style-feature loss, which is the
summed squared-L2 over channels.
"""

import hashlib
import io
import json
import time
import zipfile
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .encoders import from_config
from .errors import ConsistencyError
from .field import FeatureField, render, render_rays_graph
from .nn import Adam
from .scene_io import generate_patch_rays, generate_rays
from .selection import load_clip_targets
from .style import Decoder, MappingNetwork, channel_stats_graph, transfer_deferred

CHECKPOINT_VERSION = 1


# -- losses ----------------------------------------------------------------

def _pair(stats):
    """Accept StyleStatistics or a (mu, sigma) pair."""
    if hasattr(stats, "mu"):
        return stats.mu, stats.sigma
    return stats


def loss_style_feature(stats_a, stats_b):
    """Summed squared-L2 between two (mu, sigma) style representations."""
    mu_a, sig_a = (ad.as_tensor(v) for v in _pair(stats_a))
    mu_b, sig_b = (ad.as_tensor(v) for v in _pair(stats_b))
    if mu_a.shape != mu_b.shape:
        raise ValueError(
            f"style statistics widths differ: {mu_a.shape} vs {mu_b.shape}")
    d_sig = sig_a - sig_b
    d_mu = mu_a - mu_b
    return (d_sig * d_sig).sum() + (d_mu * d_mu).sum()


def loss_stylized(feat_out, feat_target, stats_out, stats_target, lam):
    """Content MSE plus lam * style MSE over per-layer (mu, sigma) pairs."""
    feat_out = ad.as_tensor(feat_out)
    l_content = ((feat_out - feat_target) ** 2).mean()
    if hasattr(stats_out, "mu") or (isinstance(stats_out, tuple) and len(stats_out) == 2
                                    and not isinstance(stats_out[0], (list, tuple))):
        stats_out, stats_target = [stats_out], [stats_target]
    l_style = None
    for got, want in zip(stats_out, stats_target):
        mu_o, sig_o = _pair(got)
        mu_t, sig_t = _pair(want)
        mu_o, sig_o = ad.as_tensor(mu_o), ad.as_tensor(sig_o)
        term = ((mu_o - mu_t) ** 2).mean() + ((sig_o - sig_t) ** 2).mean()
        l_style = term if l_style is None else l_style + term
    return l_content + lam * l_style


def loss_consistency(img_a, img_b):
    """Mean absolute difference between the two branch renderings."""
    return ad.absolute(ad.as_tensor(img_a) - img_b).mean()


def loss_clip_field(rendered, targets):
    """Mean absolute error between rendered CLIP features and cached targets."""
    return ad.absolute(ad.as_tensor(rendered) - targets).mean()


@dataclass
class LossReport:
    l_photometric: float = None
    l_content: float = None
    l_style: float = None
    l_feature: float = None
    l_consistency: float = None
    l_clip: float = None
    total: float = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


# -- infrastructure --------------------------------------------------------

class MetricsLogger:
    """Append-only JSON-lines metrics log."""

    def __init__(self, path=None):
        self.path = path
        self._t0 = time.time()

    def log(self, **fields):
        if not self.path:
            return
        fields.setdefault("wall_time", round(time.time() - self._t0, 3))
        with open(self.path, "a") as f:
            f.write(json.dumps(fields) + "\n")


class DivergenceGuard:
    """Abort after 3 consecutive non-finite losses."""

    def __init__(self, stage):
        self.stage = stage
        self.count = 0

    def check(self, step, value, report=None):
        if np.isfinite(value):
            self.count = 0
            return
        self.count += 1
        if self.count >= 3:
            raise RuntimeError(
                f"{self.stage} diverged: non-finite loss for 3 consecutive steps "
                f"(step {step}, last report {report and report.to_dict()})")


def parameter_hashes(module):
    return {name: hashlib.sha256(np.ascontiguousarray(p.data).tobytes()).hexdigest()
            for name, p in module.named_parameters()}


def _clone_module(module, cls):
    """Fresh module with copied parameters; keeps input checkpoints intact."""
    clone = cls.from_manifest(module.manifest())
    clone.load_state_dict(module.state_dict())
    return clone


def _freeze(tensors):
    prev = [(t, t.requires_grad) for t in tensors if t is not None]
    for t, _ in prev:
        t.requires_grad = False
    return prev


def _restore(prev):
    for t, flag in prev:
        t.requires_grad = flag


# -- checkpoints -----------------------------------------------------------

@dataclass
class Checkpoint:
    field: FeatureField
    config: TrainConfig
    stage: str
    step: int
    mapping: MappingNetwork = None
    decoder: Decoder = None
    rng_state: dict = None
    metrics: dict = dc_field(default_factory=dict)


def _write_deterministic_zip(path, members):
    """npz-compatible archive with pinned timestamps for bitwise round-trips."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, payload in members:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)


def save_checkpoint(ckpt, path):
    manifest = {
        "version": CHECKPOINT_VERSION,
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "config": ckpt.config.to_dict(),
        "field": ckpt.field.manifest(),
        "mapping": ckpt.mapping.manifest() if ckpt.mapping else None,
        "decoder": ckpt.decoder.manifest() if ckpt.decoder else None,
        "rng_state": ckpt.rng_state,
        "metrics": ckpt.metrics,
    }
    arrays = {"__manifest__": np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)}
    for prefix, module in (("field", ckpt.field), ("mapping", ckpt.mapping),
                           ("decoder", ckpt.decoder)):
        if module is None:
            continue
        for name, arr in module.state_dict().items():
            arrays[f"{prefix}::{name}"] = arr
    members = []
    for name in sorted(arrays):
        buf = io.BytesIO()
        np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
        members.append((name + ".npy", buf.getvalue()))
    _write_deterministic_zip(path, members)
    return path


def load_checkpoint(path):
    try:
        data = np.load(path)
        manifest = json.loads(bytes(data["__manifest__"]).decode())
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as e:
        raise ConsistencyError(f"unreadable checkpoint {path}: {e}") from e
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ConsistencyError(f"unsupported checkpoint version in {path}")

    def collect(prefix):
        return {k.split("::", 1)[1]: data[k] for k in data.files
                if k.startswith(prefix + "::")}

    try:
        fld = FeatureField.from_manifest(manifest["field"])
        fld.load_state_dict(collect("field"))
        mapping = decoder = None
        if manifest["mapping"]:
            mapping = MappingNetwork.from_manifest(manifest["mapping"])
            mapping.load_state_dict(collect("mapping"))
        if manifest["decoder"]:
            decoder = Decoder.from_manifest(manifest["decoder"])
            decoder.load_state_dict(collect("decoder"))
    except (KeyError, ValueError) as e:
        raise ConsistencyError(f"checkpoint {path} manifest/array mismatch: {e}") from e
    return Checkpoint(
        field=fld, config=TrainConfig.from_dict(manifest["config"]),
        stage=manifest["stage"], step=manifest["step"], mapping=mapping,
        decoder=decoder, rng_state=manifest.get("rng_state"),
        metrics=manifest.get("metrics") or {})


# -- shared helpers --------------------------------------------------------

def _chw(image):
    return np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None]


def _background_value(config):
    return 1.0 if config.background == "white" else 0.0


def render_view_rgb(field, dataset, view_index, n_samples, background=1.0, chunk=8192):
    """Full-resolution composited RGB render of one dataset view."""
    rays = generate_rays(dataset, view_index)
    bundle = render(field, rays, heads=("rgb",), n_samples=n_samples, chunk=chunk)
    rgb = bundle.rgb + (1.0 - bundle.acc[:, None]) * background
    return rgb.reshape(dataset.height, dataset.width, 3), bundle


def content_patches(field, dataset, views, stride, n_samples):
    """Rendered feature patch (B, C) and accumulated weights per view."""
    out = {}
    for vi in views:
        rays, (hc, wc) = generate_patch_rays(dataset, vi, stride)
        bundle = render(field, rays, heads=("feature",), n_samples=n_samples)
        out[vi] = (bundle.feature, bundle.acc, (hc, wc))
    return out


def _feature_image(flat, hc, wc):
    """(B, C) Tensor/array at the patch lattice -> (1, C, hc, wc)."""
    t = ad.as_tensor(flat)
    c = t.shape[1]
    return t.reshape((hc, wc, c)).transpose((2, 0, 1)).reshape((1, c, hc, wc))


# -- stage 1: feature field -------------------------------------------------

def train_feature_field(config, dataset, encoders=None, log_path=None):
    """Photometric pretraining plus feature distillation; returns a Checkpoint."""
    rng = np.random.default_rng([config.seed, 11])
    views = dataset.view_indices("train") or list(range(len(dataset)))
    fld = FeatureField(
        dataset.bbox, resolution=config.grid_resolution,
        feature_channels=config.feature_channels,
        feature_resolution=config.feature_resolution,
        clip_channels=config.clip_channels,
        clip_resolution=config.clip_resolution)
    decoder = Decoder(config.feature_channels,
                      np.random.default_rng([config.seed, 12]),
                      widths=config.decoder_widths)
    if config.patch_stride != Decoder.stride:
        raise ConsistencyError("patch_stride must equal the decoder stride (4)")
    _, _, style_h = encoders or from_config(config.encoders)
    bg = _background_value(config)
    logger = MetricsLogger(log_path)
    guard = DivergenceGuard("train-field")

    opt_photo = Adam([fld.density_grid, fld.rgb_grid], lr=config.lr_grids)
    last_photo = None
    for step in range(config.field_steps):
        vi = views[rng.integers(len(views))]
        xs = rng.integers(0, dataset.width, config.batch_rays)
        ys = rng.integers(0, dataset.height, config.batch_rays)
        rays = generate_rays(dataset, vi, np.stack([xs, ys], axis=1))
        gt = dataset.images[vi][ys, xs]
        out = render_rays_graph(fld, rays, heads=("rgb",),
                                n_samples=config.n_samples, stratified=True, rng=rng)
        pred = out["rgb"] + out["trans"].reshape((-1, 1)) * bg
        loss = ((pred - gt) ** 2).mean()
        opt_photo.zero_grad()
        loss.backward()
        opt_photo.step()
        last_photo = loss.item()
        guard.check(step, last_photo, LossReport(l_photometric=last_photo))
        if step % 50 == 0 or step == config.field_steps - 1:
            logger.log(stage="field", step=step, l_photometric=last_photo,
                       psnr=float(-10.0 * np.log10(max(last_photo, 1e-12))))

    # distillation phase: density/rgb frozen, feature grid + decoder learn
    opt_feat = Adam([fld.feature_grid], lr=config.lr_grids)
    opt_dec = Adam(decoder.parameters(), lr=config.lr)
    targets = {}
    for vi in views:
        fmap = style_h.features(dataset.images[vi]).values
        targets[vi] = fmap[None]    # (1, C, hc, wc)
    frozen = _freeze([fld.density_grid, fld.rgb_grid, fld.clip_grid])
    try:
        for step in range(config.distill_steps):
            vi = views[rng.integers(len(views))]
            rays, (hc, wc) = generate_patch_rays(dataset, vi, config.patch_stride)
            out = render_rays_graph(fld, rays, heads=("feature",),
                                    n_samples=config.n_samples, stratified=True, rng=rng)
            f_img = _feature_image(out["feature"], hc, wc)
            decoded = decoder.forward_graph(f_img)
            img_t = _chw(dataset.images[vi])
            recon = ((decoded - img_t) ** 2).mean()
            acc = out["acc"].data.reshape(1, 1, hc, wc)
            diff = (f_img - targets[vi]) ** 2
            distill = (diff * acc).mean() * (1.0 / max(acc.mean(), 1e-6))
            loss = recon + config.lambda_distill * distill
            opt_feat.zero_grad()
            opt_dec.zero_grad()
            loss.backward()
            opt_feat.step()
            opt_dec.step()
            guard.check(config.field_steps + step, loss.item(),
                        LossReport(l_content=recon.item(), total=loss.item()))
            if step % 50 == 0 or step == config.distill_steps - 1:
                logger.log(stage="field", phase="distill",
                           step=config.field_steps + step,
                           l_reconstruction=recon.item(), l_distill=distill.item())
    finally:
        _restore(frozen)

    return Checkpoint(
        field=fld, config=config, stage="field",
        step=config.field_steps + config.distill_steps, decoder=decoder,
        rng_state=rng.bit_generator.state,
        metrics={"final_photometric": last_photo})


# -- stage 2: stylization ----------------------------------------------------

def evaluate_style_feature_loss(mapping, styles, image_handle, style_handle):
    """Mean style-feature loss over a list of style images (no gradients)."""
    total = 0.0
    with ad.no_grad():
        for img in styles:
            stats_v = _style_layer_stats(style_handle, img)[-1]
            emb = image_handle.encode(img).values
            mu, sigma = mapping.forward_graph(ad.Tensor(emb[None]))
            value = loss_style_feature(stats_v, (mu.data[0], sigma.data[0]))
            total += float(value.data)
    return total / len(styles)


def _style_layer_stats(style_handle, image):
    """(mu, sigma) arrays for every extractor layer, bottom-up (top last).

    The top layer is the style-transfer feature space; the style loss may
    use any prefix of the stack.
    """
    with ad.no_grad():
        maps = style_handle.features_graph(ad.Tensor(_chw(image)),
                                           len(style_handle.layers))
    out = []
    for m in maps:
        mu, sigma = channel_stats_graph(m)
        out.append((mu.data[0], sigma.data[0]))
    return out


def train_stylization(config, checkpoint, dataset, corpus, encoders=None,
                      log_path=None, heldout_fraction=0.1):
    """Dual-branch training of the mapping network and shared decoder.

    The field is frozen throughout; content feature patches are rendered
    once per training view.  Returns a Checkpoint carrying the mapping
    network, with held-out style-feature-loss metrics recorded.
    """
    fld = checkpoint.field
    if checkpoint.decoder is None:
        raise ConsistencyError("stage-2 training needs the stage-1 decoder")
    decoder = _clone_module(checkpoint.decoder, Decoder)
    image_h, _, style_h = encoders or from_config(config.encoders)
    rng = np.random.default_rng([config.seed, 21])
    mapping = MappingNetwork(config.embed_dim, config.feature_channels,
                             np.random.default_rng([config.seed, 22]),
                             hidden=config.mapping_hidden,
                             n_layers=config.mapping_layers)
    logger = MetricsLogger(log_path)
    guard = DivergenceGuard("train-style")

    views = dataset.view_indices("train") or list(range(len(dataset)))
    n_hold = max(1, int(round(len(corpus) * heldout_fraction)))
    if len(corpus) <= n_hold:
        raise ConsistencyError("style corpus too small to hold out a split")
    train_ids = list(range(len(corpus) - n_hold))
    held_images = [corpus[i] for i in range(len(corpus) - n_hold, len(corpus))]

    payload_cache = {}

    def payload(i):
        if i not in payload_cache:
            img = corpus[i]
            layer_stats = _style_layer_stats(style_h, img)
            payload_cache[i] = (image_h.encode(img).values, layer_stats)
        return payload_cache[i]

    initial_lf = evaluate_style_feature_loss(mapping, held_images, image_h, style_h)
    opt = Adam(mapping.parameters() + decoder.parameters(), lr=config.lr)
    lf_weight = config.lambda_feature if config.use_style_feature_loss else 0.0

    frozen = _freeze([fld.density_grid, fld.rgb_grid, fld.feature_grid,
                      fld.clip_grid])
    try:
        patches = content_patches(fld, dataset, views, config.patch_stride,
                                  config.n_samples)
        for step in range(config.style_steps):
            si = train_ids[rng.integers(len(train_ids))]
            vi = views[rng.integers(len(views))]
            emb, layer_stats = payload(si)
            f_c, w_r, (hc, wc) = patches[vi]
            mu_v, sig_v = layer_stats[-1]       # top layer: the transfer space

            mu_c, sig_c = mapping.forward_graph(ad.Tensor(emb[None]))
            mu_c0, sig_c0 = mu_c[0], sig_c[0]
            l_f = loss_style_feature((mu_v, sig_v), (mu_c0, sig_c0))

            t_v = transfer_deferred(f_c, w_r, (mu_v, sig_v))
            t_c = transfer_deferred(f_c, w_r, (mu_c0, sig_c0))
            branch_losses = []
            decoded = []
            for t in (t_v, t_c):
                t_img = _feature_image(t, hc, wc)
                out_img = decoder.forward_graph(t_img)
                decoded.append(out_img)
                maps = style_h.features_graph(out_img, len(style_h.layers))
                # content target: the transferred features (graph-detached)
                l_c = ((maps[-1] - t_img.data) ** 2).mean()
                l_s = None
                for m, (mu_t, sig_t) in list(zip(maps, layer_stats))[:config.style_layers]:
                    mu_o, sig_o = channel_stats_graph(m)
                    term = ((mu_o[0] - mu_t) ** 2).mean() + ((sig_o[0] - sig_t) ** 2).mean()
                    l_s = term if l_s is None else l_s + term
                branch_losses.append((l_c, l_s))
            l_consis = loss_consistency(decoded[0], decoded[1])

            total = l_consis * config.lambda_consistency + l_f * lf_weight
            for l_c, l_s in branch_losses:
                total = total + l_c * config.lambda_content + l_s * config.lambda_style

            opt.zero_grad()
            total.backward()
            opt.step()
            report = LossReport(
                l_content=float(sum(b[0].item() for b in branch_losses)),
                l_style=float(sum(b[1].item() for b in branch_losses)),
                l_feature=l_f.item(), l_consistency=l_consis.item(),
                total=total.item())
            guard.check(step, report.total, report)
            if step % 50 == 0 or step == config.style_steps - 1:
                logger.log(stage="stylize", step=step, **report.to_dict())
    finally:
        _restore(frozen)

    final_lf = evaluate_style_feature_loss(mapping, held_images, image_h, style_h)
    logger.log(stage="stylize", event="heldout_style_feature_loss",
               initial=initial_lf, final=final_lf)
    return Checkpoint(
        field=fld, config=config, stage="stylize",
        step=checkpoint.step + config.style_steps, mapping=mapping,
        decoder=decoder, rng_state=rng.bit_generator.state,
        metrics={**checkpoint.metrics,
                 "heldout_lf_initial": initial_lf, "heldout_lf_final": final_lf})


# -- stage 3: selection volume ------------------------------------------------

def train_selection_volume(config, checkpoint, dataset, cache_dir,
                           encoders=None, log_path=None):
    """Distill the CLIP head toward cached multi-spatial embeddings."""
    if checkpoint.field.clip_grid is None:
        raise ConsistencyError("field was built without a CLIP head")
    fld = _clone_module(checkpoint.field, FeatureField)
    image_h, _, _ = encoders or from_config(config.encoders)
    maps = load_clip_targets(dataset, image_h, cache_dir,
                             window_sizes=config.window_sizes,
                             stride=config.window_stride or None,
                             split="train")
    views = dataset.view_indices("train") or list(range(len(dataset)))
    targets = {vi: m.features.transpose(1, 2, 0) for vi, m in zip(views, maps)}

    rng = np.random.default_rng([config.seed, 31])
    logger = MetricsLogger(log_path)
    guard = DivergenceGuard("train-select")
    frozen = _freeze([fld.density_grid, fld.rgb_grid, fld.feature_grid])
    opt = Adam([fld.clip_grid], lr=config.lr_grids)
    try:
        for step in range(config.select_steps):
            vi = views[rng.integers(len(views))]
            xs = rng.integers(0, dataset.width, config.batch_rays)
            ys = rng.integers(0, dataset.height, config.batch_rays)
            rays = generate_rays(dataset, vi, np.stack([xs, ys], axis=1))
            out = render_rays_graph(fld, rays, heads=("clip",),
                                    n_samples=config.n_samples,
                                    stratified=True, rng=rng)
            loss = loss_clip_field(out["clip"], targets[vi][ys, xs])
            opt.zero_grad()
            loss.backward()
            opt.step()
            guard.check(step, loss.item(), LossReport(l_clip=loss.item()))
            if step % 50 == 0 or step == config.select_steps - 1:
                logger.log(stage="select", step=step, l_clip=loss.item())
    finally:
        _restore(frozen)
    return Checkpoint(
        field=fld, config=config, stage="select",
        step=checkpoint.step + config.select_steps,
        mapping=checkpoint.mapping, decoder=checkpoint.decoder,
        rng_state=rng.bit_generator.state, metrics=dict(checkpoint.metrics))
