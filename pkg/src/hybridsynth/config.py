"""Run configuration: typed sections, INI-style file format, defaults.

A config file has four sections, [data], [model], [train] and [eval].
Every field has a default, unknown sections or keys are rejected with the
offending line number, and parse -> serialize -> parse is a fixpoint.
Values given as ``auto`` resolve at build time (currently only
train.bs_cond, which defaults to 16 and drops to 4 in the partial regime).
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .errors import ConfigurationError

REGIMES = ("limited", "partial", "full")
TRAIN_MODES = (
    "joint",
    "cond_only",
    "uncond_only",
    "stage_uncond_then_cond",
    "stage_cond_then_uncond",
)
UPSAMPLE_MODES = ("nearest", "transposed")


@dataclass(slots=True)
class ShapesConfig:
    """Knobs of the procedural shapes generator."""

    resolution: int = 32
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 4
    min_size_frac: float = 0.25
    max_size_frac: float = 0.55
    color_jitter: float = 0.08
    pixel_noise: float = 0.03

    def validate(self):
        if self.resolution not in (32, 64):
            raise ConfigurationError(
                f"resolution must be 32 or 64, got {self.resolution}"
            )
        if self.num_classes < 2:
            raise ConfigurationError(
                f"num_classes must be >= 2, got {self.num_classes}"
            )
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigurationError(
                f"need 0 <= min_shapes <= max_shapes, got "
                f"({self.min_shapes}, {self.max_shapes})"
            )


@dataclass(slots=True)
class DataConfig:
    shapes: ShapesConfig = field(default_factory=ShapesConfig)
    train_samples: int = 2000
    val_samples: int = 256
    seed: int = 0
    regime: str = "full"
    labeled_count: int = 50
    flip_prob: float = 0.5

    def validate(self):
        self.shapes.validate()
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.regime == "partial" and self.labeled_count > self.train_samples:
            raise ConfigurationError(
                f"labeled_count {self.labeled_count} exceeds "
                f"train_samples {self.train_samples}"
            )


@dataclass(slots=True)
class ModelConfig:
    base_resolution: int = 8
    channels: tuple = (128, 64, 32)
    style_channels: int = 32
    latent_dim: int = 64
    cond_noise_dim: int = 64
    mapping_layers: int = 2
    mapping_hidden: int = 128
    cond_hidden: int = 64
    disc_stem_channels: int = 16
    disc_channels: tuple = (32, 64, 128)
    disc_head_channels: int = 128
    aspp_rates: tuple = (1, 2, 4)
    aspp_channels: int = 64
    upsample: str = "nearest"
    extractor_seed: int = 1234
    extractor_dim: int = 64

    def validate(self, resolution: int):
        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigurationError(f"unknown upsample mode {self.upsample!r}")
        levels = num_levels(self.base_resolution, resolution)
        if len(self.channels) != levels:
            raise ConfigurationError(
                f"channels has {len(self.channels)} entries but "
                f"{self.base_resolution}->{resolution} needs {levels} levels"
            )
        if len(self.disc_channels) != levels:
            raise ConfigurationError(
                f"disc_channels has {len(self.disc_channels)} entries, "
                f"need {levels}"
            )
        if self.latent_dim < 1 or self.style_channels < 1:
            raise ConfigurationError("latent_dim and style_channels must be >= 1")


@dataclass(slots=True)
class TrainConfig:
    total_steps: int = 3000
    bs_uncond: int = 32
    bs_cond: int = -1  # auto: 16, or 4 in the partial regime
    lr: float = 0.002
    adam_b1: float = 0.0
    adam_b2: float = 0.99
    r1_gamma: float = 10.0
    r1_interval: int = 16
    ema_decay: float = 0.999
    uncond_loss_weight: float = 1.0
    lambda_labelmix: float = 10.0
    gumbel_tau: float = 1.0
    mode: str = "joint"
    seed: int = 0
    stage_split: float = 0.5
    checkpoint_interval: int = 500
    eval_interval: int = 0
    log_interval: int = 1

    def resolved_bs_cond(self, regime: str) -> int:
        if self.bs_cond >= 0:
            return self.bs_cond
        return 4 if regime == "partial" else 16

    def validate(self, regime: str):
        if self.mode not in TRAIN_MODES:
            raise ConfigurationError(f"unknown train mode {self.mode!r}")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be >= 0")
        for name in ("lr", "ema_decay", "gumbel_tau"):
            if getattr(self, name) <= 0 and name != "ema_decay":
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigurationError("ema_decay must lie in [0, 1]")
        if self.r1_interval < 1:
            raise ConfigurationError("r1_interval must be >= 1")
        if not 0.0 < self.stage_split < 1.0:
            raise ConfigurationError("stage_split must lie in (0, 1)")
        bs_cond = self.resolved_bs_cond(regime)
        if bs_cond == 0 and self.mode != "uncond_only":
            raise ConfigurationError("bs_cond=0 is only valid in uncond_only mode")
        if self.bs_uncond == 0 and self.mode != "cond_only":
            raise ConfigurationError("bs_uncond=0 is only valid in cond_only mode")
        if self.bs_uncond < 0 or bs_cond < 0:
            raise ConfigurationError("batch sizes must be >= 0")


@dataclass(slots=True)
class EvalConfig:
    eval_sets: int = 5
    samples_per_set: int = 0  # 0: use the validation-set size
    eval_seed: int = 7000
    eval_batch: int = 64

    def validate(self):
        if self.eval_sets < 1:
            raise ConfigurationError("eval_sets must be >= 1")
        if self.samples_per_set < 0:
            raise ConfigurationError("samples_per_set must be >= 0")


@dataclass(slots=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.data.validate()
        self.model.validate(self.data.shapes.resolution)
        self.train.validate(self.data.regime)
        self.eval.validate()


def num_levels(base_resolution: int, resolution: int) -> int:
    if base_resolution < 1 or resolution % base_resolution != 0:
        raise ConfigurationError(
            f"resolution {resolution} is not a power-of-two multiple "
            f"of base_resolution {base_resolution}"
        )
    ratio = resolution // base_resolution
    levels = 1
    while ratio > 1:
        if ratio % 2 != 0:
            raise ConfigurationError(
                f"resolution {resolution} / base {base_resolution} "
                f"is not a power of two"
            )
        ratio //= 2
        levels += 1
    return levels


# ---------------------------------------------------------------------------
# INI schema: (section, key) -> (codec, target dataclass attribute path)

def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _str(s):
    return s


def _int_tuple(s):
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


def _bs(s):
    if s.strip() == "auto":
        return -1
    return int(s)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _fmt_bs(value) -> str:
    return "auto" if value < 0 else str(value)


# key -> (parse, serialize, attribute path relative to RunConfig)
_SCHEMA = {
    "data": {
        "resolution": (_int, _fmt, "data.shapes.resolution"),
        "num_classes": (_int, _fmt, "data.shapes.num_classes"),
        "min_shapes": (_int, _fmt, "data.shapes.min_shapes"),
        "max_shapes": (_int, _fmt, "data.shapes.max_shapes"),
        "min_size_frac": (_float, _fmt, "data.shapes.min_size_frac"),
        "max_size_frac": (_float, _fmt, "data.shapes.max_size_frac"),
        "color_jitter": (_float, _fmt, "data.shapes.color_jitter"),
        "pixel_noise": (_float, _fmt, "data.shapes.pixel_noise"),
        "train_samples": (_int, _fmt, "data.train_samples"),
        "val_samples": (_int, _fmt, "data.val_samples"),
        "seed": (_int, _fmt, "data.seed"),
        "regime": (_str, _fmt, "data.regime"),
        "labeled_count": (_int, _fmt, "data.labeled_count"),
        "flip_prob": (_float, _fmt, "data.flip_prob"),
    },
    "model": {
        "base_resolution": (_int, _fmt, "model.base_resolution"),
        "channels": (_int_tuple, _fmt, "model.channels"),
        "style_channels": (_int, _fmt, "model.style_channels"),
        "latent_dim": (_int, _fmt, "model.latent_dim"),
        "cond_noise_dim": (_int, _fmt, "model.cond_noise_dim"),
        "mapping_layers": (_int, _fmt, "model.mapping_layers"),
        "mapping_hidden": (_int, _fmt, "model.mapping_hidden"),
        "cond_hidden": (_int, _fmt, "model.cond_hidden"),
        "disc_stem_channels": (_int, _fmt, "model.disc_stem_channels"),
        "disc_channels": (_int_tuple, _fmt, "model.disc_channels"),
        "disc_head_channels": (_int, _fmt, "model.disc_head_channels"),
        "aspp_rates": (_int_tuple, _fmt, "model.aspp_rates"),
        "aspp_channels": (_int, _fmt, "model.aspp_channels"),
        "upsample": (_str, _fmt, "model.upsample"),
        "extractor_seed": (_int, _fmt, "model.extractor_seed"),
        "extractor_dim": (_int, _fmt, "model.extractor_dim"),
    },
    "train": {
        "total_steps": (_int, _fmt, "train.total_steps"),
        "bs_uncond": (_int, _fmt, "train.bs_uncond"),
        "bs_cond": (_bs, _fmt_bs, "train.bs_cond"),
        "lr": (_float, _fmt, "train.lr"),
        "adam_b1": (_float, _fmt, "train.adam_b1"),
        "adam_b2": (_float, _fmt, "train.adam_b2"),
        "r1_gamma": (_float, _fmt, "train.r1_gamma"),
        "r1_interval": (_int, _fmt, "train.r1_interval"),
        "ema_decay": (_float, _fmt, "train.ema_decay"),
        "uncond_loss_weight": (_float, _fmt, "train.uncond_loss_weight"),
        "lambda_labelmix": (_float, _fmt, "train.lambda_labelmix"),
        "gumbel_tau": (_float, _fmt, "train.gumbel_tau"),
        "mode": (_str, _fmt, "train.mode"),
        "seed": (_int, _fmt, "train.seed"),
        "stage_split": (_float, _fmt, "train.stage_split"),
        "checkpoint_interval": (_int, _fmt, "train.checkpoint_interval"),
        "eval_interval": (_int, _fmt, "train.eval_interval"),
        "log_interval": (_int, _fmt, "train.log_interval"),
    },
    "eval": {
        "eval_sets": (_int, _fmt, "eval.eval_sets"),
        "samples_per_set": (_int, _fmt, "eval.samples_per_set"),
        "eval_seed": (_int, _fmt, "eval.eval_seed"),
        "eval_batch": (_int, _fmt, "eval.eval_batch"),
    },
}


def _get_attr(cfg: RunConfig, path: str):
    obj = cfg
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def _set_attr(cfg: RunConfig, path: str, value):
    parts = path.split(".")
    obj = cfg
    for part in parts[:-1]:
        obj = getattr(obj, part)
    setattr(obj, parts[-1], value)


def _key_line(text: str, section: str, key: str) -> int:
    """Best-effort line number of `key` inside `section` for error messages."""
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
        elif current == section and stripped and not stripped.startswith(("#", ";")):
            name = stripped.split("=", 1)[0].strip()
            if name == key:
                return lineno
    return 0


def parse_config(text: str) -> RunConfig:
    """Parse config text into a RunConfig, rejecting unknown keys."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc

    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                line = _key_line(text, section, key)
                raise ConfigurationError(
                    f"unknown key {key!r} in section [{section}] (line {line})"
                )
            parse, _, path = _SCHEMA[section][key]
            try:
                _set_attr(cfg, path, parse(raw))
            except (ValueError, TypeError) as exc:
                line = _key_line(text, section, key)
                raise ConfigurationError(
                    f"bad value for {section}.{key} (line {line}): {exc}"
                ) from exc
    cfg.validate()
    return cfg


def serialize_config(cfg: RunConfig) -> str:
    """Canonical INI text with every field spelled out."""
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, (_, fmt, path) in keys.items():
            out.write(f"{key} = {fmt(_get_attr(cfg, path))}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply `section.key=value` strings on top of a parsed config."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of form sec.key=value")
        dotted, raw = item.split("=", 1)
        dotted = dotted.strip()
        if "." not in dotted:
            raise ConfigurationError(f"override {item!r} is not of form sec.key=value")
        section, key = dotted.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigurationError(f"unknown config field {dotted!r}")
        parse, _, path = _SCHEMA[section][key]
        try:
            _set_attr(cfg, path, parse(raw.strip()))
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(f"bad value in override {item!r}: {exc}") from exc
    cfg.validate()
    return cfg


def config_fields():
    """Iterate (section, key, default-as-text) for documentation."""
    defaults = RunConfig()
    for section, keys in _SCHEMA.items():
        for key, (_, fmt, path) in keys.items():
            yield section, key, fmt(_get_attr(defaults, path))
