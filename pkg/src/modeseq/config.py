"""Training/run configuration and the flat ``key = value`` config file."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

STRATEGIES = ("emta", "wta")
IGNORE_VARIANTS = ("none", "other_matches", "early_mismatches")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "emta"
    ignore_variant: str = "none"
    rearrange: bool = True
    K: int = 6
    L: int = 6
    D: int = 128
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.1
    dropout: float = 0.1
    seed: int = 0
    heads: int = 8
    match_family: str = "velocity_aware"
    step_duration: float = 0.5
    grad_clip: float = 5.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.ignore_variant not in IGNORE_VARIANTS:
            raise ConfigError(f"ignore_variant must be one of {IGNORE_VARIANTS}, got {self.ignore_variant!r}")
        for name in ("K", "L", "D", "epochs", "batch_size", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} is not divisible by heads={self.heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass
class RunConfig(TrainConfig):
    train_data: str = ""
    eval_data: str = ""
    out: str = "run"
    eval_every: int = 1
    extrapolation: list[int] = field(default_factory=lambda: [6, 12, 24])

    def validate(self):
        super().validate()
        if any(k < self.K for k in self.extrapolation):
            raise ConfigError(f"extrapolation entries must be >= K={self.K}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})


def _parse_value(kind, text: str, key: str):
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
        if kind in ("list[int]",):
            return [int(x) for x in text.replace(" ", "").split(",") if x]
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, cls=RunConfig):
    types = {f.name: f.type for f in fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(types[key], value, key)
    return cls(**values)


def load_config(path, cls=RunConfig):
    with open(path) as fh:
        return parse_config(fh.read(), cls)


def dump_config(cfg) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def with_overrides(cfg, **overrides):
    clean = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **clean) if clean else cfg
