"""Run configuration: one versioned key-value text file describes a full run.

The format is plain ``section.key = value`` lines with ``#`` comments.
Unknown keys are hard errors so a typo in an experiment sweep cannot pass
silently; missing keys fall back to defaults.  Serialization and parsing
round-trip losslessly (floats are written with repr).
"""

from dataclasses import dataclass, field, fields

from .data import GeneratorConfig
from .edl import LossConfig
from .model import ModelConfig, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class DataSection:
    train_seed: int = 1001
    train_count: int = 200
    test_seed: int = 2002
    test_count: int = 50
    height: int = 48
    width: int = 48
    channels: int = 3
    spacing: tuple = (3.0, 0.5, 0.5)
    lesion_count: tuple = (1, 2)
    lesion_radius: tuple = (2.6, 3.2)
    lesion_contrast: float = 0.45
    distractor_count: tuple = (1, 3)
    noise_sigma: float = 0.04
    gain_jitter: float = 0.15
    slice_falloff: float = 0.3
    dir: str = ""  # when set, load volumes from disk instead of generating


@dataclass
class LossSection:
    kind: str = "ec"
    gamma: float = 2.5
    beta_lesion: float = 30.0
    beta_background: float = 1.0
    anneal_epochs: int = 10
    kl_variant: str = "misleading-alpha"
    focal_gamma: float = 2.0


@dataclass
class OptimSection:
    epochs: int = 12
    lr: float = 1e-4
    weight_decay: float = 1e-5


@dataclass
class EvalSection:
    min_score: float = 0.05
    u_thresholds: tuple = (0.7, 0.8, 0.9, 1.0)
    fps_grid: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    match_radius_mm: float = 5.0
    score: str = "phat"  # or "belief"
    match_mode: str = "mask"  # or "centroid"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataSection = field(default_factory=DataSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        if self.data.channels != self.model.in_channels:
            raise ConfigError(
                f"data.channels ({self.data.channels}) must equal "
                f"model.in_channels ({self.model.in_channels})")
        if self.loss.kind == "focal" and self.model.head != "softmax":
            raise ConfigError("loss.kind=focal requires model.head=softmax")
        if self.loss.kind in ("ec", "evidential") and self.model.head != "evidential":
            raise ConfigError(f"loss.kind={self.loss.kind} requires model.head=evidential")
        if self.eval.score not in ("phat", "belief"):
            raise ConfigError("eval.score must be 'phat' or 'belief'")
        if self.eval.match_mode not in ("mask", "centroid"):
            raise ConfigError("eval.match_mode must be 'mask' or 'centroid'")
        return self

    # derived configs ----------------------------------------------------
    def generator_config(self):
        d = self.data
        return GeneratorConfig(
            slices=self.model.slices, height=d.height, width=d.width,
            channels=d.channels, spacing=d.spacing,
            lesion_count=tuple(int(v) for v in d.lesion_count),
            lesion_radius=d.lesion_radius, lesion_contrast=d.lesion_contrast,
            distractor_count=tuple(int(v) for v in d.distractor_count),
            noise_sigma=d.noise_sigma, gain_jitter=d.gain_jitter,
            slice_falloff=d.slice_falloff)

    def loss_config(self):
        ls = self.loss
        return LossConfig(gamma=ls.gamma, beta_lesion=ls.beta_lesion,
                          beta_background=ls.beta_background,
                          anneal_epochs=ls.anneal_epochs, kl_variant=ls.kl_variant,
                          focal_gamma=ls.focal_gamma)

    def train_config(self):
        return TrainConfig(epochs=self.optim.epochs, lr=self.optim.lr,
                           weight_decay=self.optim.weight_decay,
                           loss_kind=self.loss.kind, loss=self.loss_config())


_SECTIONS = ("run", "model", "data", "loss", "optim", "eval")


def _parse_value(raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            raise ConfigError("no boolean keys defined")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in (s.strip() for s in raw.split(",")) if p]
            elem = default[0]
            cast = int if isinstance(elem, int) else float
            return tuple(cast(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse value {raw!r}: {exc}") from None


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(cfg):
    lines = ["# evlesion run configuration", f"config_version = {CONFIG_VERSION}"]
    for sec_name in _SECTIONS:
        section = getattr(cfg, sec_name)
        lines.append("")
        for f in fields(section):
            lines.append(f"{sec_name}.{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def parse(text):
    cfg = RunConfig()
    seen_version = False
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "config_version":
            if value.strip() != str(CONFIG_VERSION):
                raise ConfigError(f"unsupported config_version {value!r}")
            seen_version = True
            continue
        if "." not in key:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sec_name, _, field_name = key.partition(".")
        if sec_name not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {sec_name!r}")
        section = getattr(cfg, sec_name)
        names = {f.name for f in fields(section)}
        if field_name not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = getattr(type(section)(), field_name)
        setattr(section, field_name, _parse_value(value, default))
    if not seen_version:
        raise ConfigError("missing config_version")
    try:
        cfg.model.__post_init__()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def save(path, cfg):
    with open(path, "w") as fh:
        fh.write(serialize(cfg))


def load(path):
    with open(path) as fh:
        return parse(fh.read())
