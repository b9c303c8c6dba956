"""Training/inference configuration with layered loading.

Precedence: JSON config file < CONRF_* environment variables < explicit
overrides (CLI flags).  The toy preset pins the desk-scale setup used by
the regression suite.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError

ENV_PREFIX = "CONRF_"


def _default_encoders():
    return {"kind": "toy", "seed": 0, "width": 512,
            "style_channels": [64, 128, 256]}


@dataclass
class TrainConfig:
    stage: str = "field"
    seed: int = 0
    background: str = "white"          # composited behind training views

    # field geometry
    grid_resolution: int = 64
    feature_resolution: int = 32
    clip_resolution: int = 32
    feature_channels: int = 256        # C; must match the style extractor
    clip_channels: int = 512           # CLIP head width; must match embed_dim
    embed_dim: int = 512               # joint image-text embedding width

    # rendering during training
    n_samples: int = 64
    batch_rays: int = 1024
    patch_stride: int = 4              # feature-lattice stride = decoder stride

    # per-stage step counts
    field_steps: int = 2000
    distill_steps: int = 1000
    style_steps: int = 1000
    select_steps: int = 800

    # optimization
    lr: float = 1e-4                   # networks
    lr_grids: float = 0.05             # voxel grids
    lambda_style: float = 20.0
    lambda_content: float = 1.0
    lambda_consistency: float = 1.0
    lambda_feature: float = 1.0
    lambda_distill: float = 1.0
    use_style_feature_loss: bool = True
    style_layers: int = 3              # extractor layers feeding the style loss

    # networks
    mapping_hidden: int = 512
    mapping_layers: int = 3
    decoder_widths: tuple = (128, 64)

    # selection
    window_sizes: tuple = (32,)
    window_stride: int = 0             # 0 -> half the window size
    threshold: float = 0.5

    encoders: dict = field(default_factory=_default_encoders)

    def __post_init__(self):
        self.decoder_widths = tuple(self.decoder_widths)
        self.window_sizes = tuple(self.window_sizes)
        self.validate()

    def validate(self):
        if self.stage not in ("field", "stylize", "select"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        for name in ("field_steps", "distill_steps", "style_steps", "select_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_rays", "n_samples", "grid_resolution",
                     "feature_resolution", "clip_resolution", "patch_stride"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.encoders.get("kind") == "toy":
            chans = self.encoders.get("style_channels", [])
            if chans and chans[-1] != self.feature_channels:
                raise ConfigError(
                    "feature_channels must equal the style extractor's top width "
                    f"({self.feature_channels} vs {chans[-1]})")
            width = self.encoders.get("width")
            if width and width != self.embed_dim:
                raise ConfigError("embed_dim must equal the joint encoder width")
        if self.clip_channels != self.embed_dim:
            raise ConfigError("clip_channels must equal embed_dim "
                              "(the CLIP head distills joint-space embeddings)")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def toy(cls, **overrides):
        """Desk-scale preset: small grids, toy encoders, minutes on a CPU."""
        base = dict(
            grid_resolution=48, feature_resolution=24, clip_resolution=24,
            feature_channels=24, clip_channels=16, embed_dim=16,
            n_samples=48, batch_rays=1024,
            field_steps=2000, distill_steps=1200, style_steps=1000,
            select_steps=600,
            lr=1e-3, lr_grids=0.05,
            mapping_hidden=64, mapping_layers=3, decoder_widths=(48, 32),
            window_sizes=(8,), window_stride=4,
            encoders={"kind": "toy", "seed": 0, "width": 16,
                      "style_channels": [12, 16, 24]},
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def load(cls, path=None, overrides=None, env=None):
        """Layered config: file values, then CONRF_* env, then overrides."""
        merged = {}
        if path:
            try:
                with open(path) as f:
                    merged.update(json.load(f))
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
        env = os.environ if env is None else env
        known = {f.name for f in dataclasses.fields(cls)}
        for key, raw in env.items():
            if not key.startswith(ENV_PREFIX):
                continue
            name = key[len(ENV_PREFIX):].lower()
            if name in known:
                try:
                    merged[name] = json.loads(raw)
                except json.JSONDecodeError:
                    merged[name] = raw
        for key, value in (overrides or {}).items():
            if value is not None:
                merged[key] = value
        return cls.from_dict(merged)
