"""
Config Module
=============

Typed configuration objects of phinet-core, their named presets and the flat
``key = value`` config-file format (one section per component).

The precedence used by the CLI is: built-in defaults < preset < config file <
command-line flags. The fully resolved configuration is always written back with
`dump_config` so that a run can be reproduced from its run directory.
"""

import configparser
import dataclasses
import enum
import hashlib
import io
from dataclasses import dataclass, field

from phinet_core.abstract import ConfigurationError


class GKind(str, enum.Enum):
    """Architecture of the CA1 predictor g."""

    TRANSFORMER = "transformer"
    LINEAR = "linear"


class EmaCadence(str, enum.Enum):
    """When the slow encoder is updated from the online encoder."""

    PER_EPOCH = "per_epoch"
    PER_STEP = "per_step"


@dataclass
class ModelConfig:
    """Shape of the encoder, predictors and latent variable.

    Tokens are stored token-major, ``(batch, n_p, d)``, i.e. the transpose of the
    ``d x n_p`` token matrix; token 0 is the [CLS] token.
    """

    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    d: int = 64
    depth: int = 4
    heads: int = 4
    m: int = 8
    c: int = 8
    decoder_depth: int = 4
    decoder_heads: int = 0
    hidden_prior: int = 0
    mlp_ratio: float = 4.0
    use_pos_embed: bool = True
    layer_scale_init: float = 1.0
    init_std: float = 0.02

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads != 0:
            raise ConfigurationError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.d % self.g_heads != 0:
            raise ConfigurationError(f"d={self.d} must be a multiple of decoder_heads={self.g_heads}")
        if self.depth < 0 or self.decoder_depth < 1:
            raise ConfigurationError("depth must be >= 0 and decoder_depth >= 1")
        if self.m < 1 or self.c < 1:
            raise ConfigurationError("latent shape (m, c) must be positive")

    @property
    def grid_size(self):
        """Number of patches per side."""
        return self.image_size // self.patch_size

    @property
    def n_p(self):
        """Token count, patches plus the [CLS] token."""
        return self.grid_size**2 + 1

    @property
    def patch_dim(self):
        return self.channels * self.patch_size**2

    @property
    def prior_width(self):
        """Hidden width of the prior and posterior heads (defaults to 2d)."""
        return self.hidden_prior if self.hidden_prior > 0 else 2 * self.d

    @property
    def g_heads(self):
        return self.decoder_heads if self.decoder_heads > 0 else self.heads


MODEL_PRESETS = {
    "desk": dict(image_size=32, patch_size=8, d=64, depth=4, heads=4, m=8, c=8, decoder_depth=4),
    "paper": dict(image_size=224, patch_size=16, d=384, depth=12, heads=6, m=32, c=32, decoder_depth=4),
    "micro": dict(image_size=8, patch_size=4, d=8, depth=1, heads=2, m=2, c=3, decoder_depth=1),
}
MODEL_PRESETS["full"] = MODEL_PRESETS["paper"]


@dataclass
class LossFlags:
    """One row of the ablation matrix: which parts of the objective are active."""

    symmetric: bool = True
    use_h: bool = True
    g_kind: GKind = GKind.TRANSFORMER
    use_noise: bool = True
    use_ema_target: bool = True
    sg_prior: bool = True
    sg_post: bool = False

    def __post_init__(self):
        try:
            self.g_kind = GKind(self.g_kind)
        except ValueError:
            raise ConfigurationError(f"unknown g kind {self.g_kind!r}, expected one of transformer, linear")


ABLATION_ROWS = {
    "linear-g": LossFlags(g_kind=GKind.LINEAR, use_noise=False),
    "no-ema": LossFlags(use_ema_target=False),
    "sg-post": LossFlags(sg_prior=False, sg_post=True),
    "no-symmetric-no-h": LossFlags(symmetric=False, use_h=False),
    "no-symmetric": LossFlags(symmetric=False),
    "no-h": LossFlags(use_h=False),
    "no-noise": LossFlags(use_noise=False),
    "no-sg": LossFlags(sg_prior=False),
    "proposed": LossFlags(),
}
"""The v2 rows of the ablation matrix in table order, the proposed row last."""


@dataclass
class TrainConfig:
    """Optimisation, data and objective hyper-parameters of a training run."""

    lr: float = 1.5e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.05
    warmup_epochs: int = 40
    total_epochs: int = 400
    batch_size: int = 768
    micro_batch_size: int = 0
    beta: float = 0.01
    alpha: float = 0.8
    gamma: float = 0.99
    sigma_eps: float = 0.5
    k_min: int = 4
    k_max: int = 48
    repeated_sampling: int = 2
    crop_scale_min: float = 0.5
    crop_scale_max: float = 1.0
    hflip_p: float = 0.5
    flags: LossFlags = field(default_factory=LossFlags)
    seed: int = 0
    checkpoint_every: int = 1
    ema_cadence: EmaCadence = EmaCadence.PER_EPOCH
    clip_grad_norm: float = 0.0
    float64: bool = False

    def __post_init__(self):
        self.ema_cadence = EmaCadence(self.ema_cadence)
        if isinstance(self.flags, dict):
            self.flags = LossFlags(**self.flags)
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.micro_batch_size < 0:
            raise ConfigurationError("micro_batch_size must be >= 0")
        if self.total_epochs < 0 or not 0 <= self.warmup_epochs <= max(self.total_epochs, 0):
            raise ConfigurationError("warmup_epochs must lie in [0, total_epochs]")
        if self.beta <= 0:
            raise ConfigurationError("beta must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError("alpha must lie in [0, 1]")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if self.sigma_eps < 0:
            raise ConfigurationError("sigma_eps must be >= 0")
        if not 1 <= self.k_min <= self.k_max:
            raise ConfigurationError("frame gap must satisfy 1 <= k_min <= k_max")
        if self.repeated_sampling < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("repeated_sampling and checkpoint_every must be >= 1")


TRAIN_PRESETS = {
    "paper": dict(
        lr=1.5e-4,
        adam_beta1=0.9,
        adam_beta2=0.95,
        weight_decay=0.05,
        warmup_epochs=40,
        total_epochs=400,
        batch_size=768,
        beta=0.01,
        alpha=0.8,
        gamma=0.99,
        sigma_eps=0.5,
        k_min=4,
        k_max=48,
        repeated_sampling=2,
        ema_cadence="per_epoch",
    ),
    "desk": dict(
        lr=1e-3,
        warmup_epochs=5,
        total_epochs=50,
        batch_size=8,
        beta=0.01,
        alpha=0.8,
        gamma=0.99,
        sigma_eps=0.5,
        k_min=4,
        k_max=48,
        repeated_sampling=2,
        ema_cadence="per_epoch",
    ),
}
TRAIN_PRESETS["full"] = TRAIN_PRESETS["paper"]

NOISE_SWEEP = (0.0, 0.1, 0.5, 1.0)
BATCH_SWEEP = (192, 384, 768, 1536)
BETA_SWEEP = (0.001, 0.01, 0.03)
SWEEPS = {"noise": ("sigma_eps", NOISE_SWEEP), "batch": ("batch_size", BATCH_SWEEP), "beta": ("beta", BETA_SWEEP)}
"""Hyper-parameter sweeps of the proposed row: axis name -> (TrainConfig field, values)."""


@dataclass
class PropagationParams:
    """Label propagation parameters; the radius is in patch units."""

    top_k: int = 7
    radius: int = 30
    queue: int = 30
    temperature: float = 0.1
    upsample: bool = False

    def __post_init__(self):
        if self.top_k < 1 or self.radius < 0 or self.queue < 1:
            raise ConfigurationError("propagation needs top_k >= 1, radius >= 0 and queue >= 1")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")


PROTOCOL_PRESETS = {
    "davis": dict(top_k=7, radius=30, queue=30),
    "vip": dict(top_k=7, radius=5, queue=3),
    "jhmdb": dict(top_k=10, radius=5, queue=30),
}


def model_preset(name, **overrides):
    """Build a ModelConfig from a named preset and optional overrides."""
    if name not in MODEL_PRESETS:
        raise ConfigurationError(f"unknown model preset {name!r}")
    return ModelConfig(**{**MODEL_PRESETS[name], **overrides})


def train_preset(name, **overrides):
    """Build a TrainConfig from a named preset and optional overrides."""
    if name not in TRAIN_PRESETS:
        raise ConfigurationError(f"unknown train preset {name!r}")
    return TrainConfig(**{**TRAIN_PRESETS[name], **overrides})


def protocol_preset(name, **overrides):
    """Build PropagationParams from a named evaluation protocol."""
    if name not in PROTOCOL_PRESETS:
        raise ConfigurationError(f"unknown protocol {name!r}, expected one of davis, vip, jhmdb")
    return PropagationParams(**{**PROTOCOL_PRESETS[name], **overrides})


###################
# Config-file I/O
###################


def _to_text(value):
    if isinstance(value, enum.Enum):
        return value.value
    return str(value)


def _from_text(text, default):
    if isinstance(default, bool):
        lowered = text.strip().lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigurationError(f"expected a boolean, got {text!r}")
        return lowered in ("true", "1", "yes")
    if isinstance(default, enum.Enum):
        return type(default)(text.strip())
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _section_items(obj):
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name != "flags"}


def dump_config(model_cfg=None, train_cfg=None, eval_params=None, extra=None):
    """Render the given configs in the flat sectioned ``key = value`` format.

    Returns:
        str: the config-file text.
    """
    parser = configparser.ConfigParser()
    if model_cfg is not None:
        parser["model"] = {k: _to_text(v) for k, v in _section_items(model_cfg).items()}
    if train_cfg is not None:
        parser["train"] = {k: _to_text(v) for k, v in _section_items(train_cfg).items()}
        parser["flags"] = {k: _to_text(v) for k, v in _section_items(train_cfg.flags).items()}
    if eval_params is not None:
        parser["eval"] = {k: _to_text(v) for k, v in _section_items(eval_params).items()}
    for section, items in (extra or {}).items():
        parser[section] = {k: _to_text(v) for k, v in items.items()}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def read_config_sections(text):
    """Parse config-file text into ``{section: {key: raw string}}``."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config file: {e}")
    return {section: dict(parser[section]) for section in parser.sections()}


def apply_section(obj, items):
    """Return a copy of the dataclass `obj` with the raw string `items` applied.

    Unknown keys raise a ConfigurationError.
    """
    known = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    updates = {}
    for key, text in items.items():
        if key not in known or key == "flags":
            raise ConfigurationError(f"unknown config key {key!r} for {type(obj).__name__}")
        try:
            updates[key] = _from_text(text, known[key])
        except ValueError as e:
            raise ConfigurationError(f"bad value for {key!r}: {e}")
    return dataclasses.replace(obj, **updates)


def load_config(text, model_cfg=None, train_cfg=None, eval_params=None):
    """Apply config-file text on top of the given configs (or their defaults).

    Returns:
        tuple: (ModelConfig, TrainConfig, PropagationParams)
    """
    sections = read_config_sections(text)
    model_cfg = apply_section(model_cfg or ModelConfig(), sections.get("model", {}))
    train_cfg = train_cfg or TrainConfig()
    flags = apply_section(train_cfg.flags, sections.get("flags", {}))
    train_cfg = dataclasses.replace(apply_section(train_cfg, sections.get("train", {})), flags=flags)
    eval_params = apply_section(eval_params or PropagationParams(), sections.get("eval", {}))
    return model_cfg, train_cfg, eval_params


def config_digest(text):
    """Content hash of a resolved config text."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
