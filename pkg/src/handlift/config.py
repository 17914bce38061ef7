"""Training configuration and the flat ``key=value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError
from .skeleton import LossWeights


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    decay_epoch: int = 7          # lr drops tenfold from this epoch on
    max_steps: int = 0            # 0 = no cap
    T: int = 5
    K: int = 4
    M: int = 16
    views: int = 4
    k_nn: int = 8
    d_point: int = 32
    w_hmap: float = 0.001
    w_hm2d: float = 10.0
    w_nll: float = 0.1
    w_proj2d: float = 10.0
    label_jitter: float = 0.0     # px std of extra 2D label jitter
    random_views: bool = True     # draw a fresh view subset per batch
    conf_warmup: int = 0          # steps weighting the 2D loss by detector confidences (stub, off)
    attention: str = "scalar"
    seed: int = 0
    profile: str = "detector-weak"
    log_every: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.T < 1 or self.T % 2 == 0:
            raise ConfigError(f"T must be a positive odd number, got {self.T}")
        for name in ("epochs", "batch_size", "K", "M", "views", "k_nn", "d_point"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.views < 2:
            raise ConfigError("need at least 2 views")
        if self.lr < 0:
            raise ConfigError("learning rate must be nonnegative")
        if self.attention not in ("scalar", "vector"):
            raise ConfigError(f"unknown attention type {self.attention!r}")
        if self.attention == "vector":
            raise ConfigError("vector attention is not implemented; use attention=scalar")
        if self.conf_warmup:
            raise ConfigError("conf_warmup is not implemented; leave it at 0")
        self.loss_weights()

    def loss_weights(self):
        return LossWeights(self.w_hmap, self.w_hm2d, self.w_nll, self.w_proj2d)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


FULL_SCHEDULE = {"epochs": 30, "batch_size": 8, "lr": 3e-4, "decay_epoch": 20}


def _coerce(field, text):
    t = field.type if isinstance(field.type, str) else field.type.__name__
    try:
        if t == "bool":
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {field.name}: {text!r}") from None
    return text


def parse_config_text(text):
    """Parse ``key = value`` lines (``#`` comments) into a dict of typed values."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in by_name:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(by_name[key], val)
    return out


def load_config(path=None, **overrides):
    values = {}
    if path is not None:
        with open(path) as fh:
            values = parse_config_text(fh.read())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


def dump_config(cfg):
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
