"""Training configuration and its flat ``key=value`` file format.

Lines are ``key = value``; ``#`` starts a comment. Booleans accept
true/false/1/0/yes/no. Unknown keys and unparsable values raise
:class:`ConfigError` carrying the offending line number.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 0.001
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    patience: int = 30
    clip_norm: float = 5.0
    s0: int = 16
    s_m: int = 8
    seed: int = 0
    width: int = 256
    heads: int = 4
    hidden: int = 64
    multilevel: bool = True
    temporal_diff: bool = True
    pure_encoder: bool = False
    zero_token_target: bool = False
    no_tct: bool = False
    literal_eq5: bool = False
    literal_eq15_sign: bool = False

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size and patience must be >= 1, epochs >= 0")
        if self.lr < 0 or self.weight_decay < 0 or self.adam_eps <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr and weight_decay must be >= 0; adam_eps and clip_norm > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.s0 < 1 or self.s_m < 1 or self.width < 1 or self.hidden < 1 or self.heads < 1:
            raise ConfigError("s0, s_m, width, hidden and heads must be positive")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")

    def to_text(self) -> str:
        return "".join(f"{k}={_format(v)}\n" for k, v in asdict(self).items())

    def updated(self, **overrides) -> "TrainConfig":
        data = asdict(self)
        for key, value in overrides.items():
            if key not in data:
                raise ConfigError(f"unknown config key {key!r}")
            data[key] = _coerce(key, value, type(data[key]))
        cfg = TrainConfig(**data)
        cfg.validate()
        return cfg


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, value, kind):
    if not isinstance(value, str):
        return kind(value)
    text = value.strip()
    if kind is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    return kind(text)


def parse_config_text(text: str, base: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = asdict(base or TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(key, value, type(values[key]))
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    cfg = TrainConfig(**values)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), base, source=str(path))
