"""Run configuration and the flat ``key = value`` config file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union


class ConfigError(ValueError):
    pass


class UnknownKeyError(ConfigError):
    pass


class MissingKeyError(ConfigError):
    pass


class OutOfRangeError(ConfigError):
    pass


DIRECTIONS = ("t2i", "i2t")
SIMILARITIES = ("vector", "scalar")
BRANCHES = ("sgr", "saf", "ave")
STRATEGIES = ("joint", "independent")
NORM_AXES = ("query", "context")
BN_SCOPES = ("batch", "pair")


@dataclass
class RunConfig:
    # representation sizes
    d: int = 1024
    embed_dim: int = 300
    d_raw: int = 2048
    regions: int = 36
    attn_hidden: int = 128
    vocab_size: int = 0
    feature_norm: bool = True
    # similarity representation
    m: int = 256
    lam: float = 9.0
    direction: str = "t2i"
    similarity: str = "vector"
    attn_norm_axis: str = "query"
    use_global: bool = True
    use_local: bool = True
    # reasoning / filtration
    steps: int = 3
    branches: Tuple[str, ...] = ("sgr", "saf")
    saf_bn_scope: str = "batch"
    bn_momentum: float = 0.1
    eps: float = 1e-8
    # training
    margin: float = 0.2
    batch_size: int = 128
    lr: float = 2e-4
    lr_decay_epochs: Tuple[int, ...] = (10,)
    lr_decay: float = 0.1
    epochs: int = 20
    sgr_epochs: int = 0
    saf_epochs: int = 0
    strategy: str = "joint"
    seed: int = 0

    def __post_init__(self):
        self.branches = tuple(self.branches)
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        self.validate()

    def validate(self) -> "RunConfig":
        positive = ("d", "embed_dim", "d_raw", "regions", "attn_hidden", "m", "steps", "epochs")
        for name in positive:
            if getattr(self, name) < 1:
                raise OutOfRangeError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lam", "margin", "eps"):
            if getattr(self, name) <= 0:
                raise OutOfRangeError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lr < 0:
            raise OutOfRangeError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 2:
            raise OutOfRangeError("batch_size must be >= 2")
        if self.vocab_size < 0 or self.sgr_epochs < 0 or self.saf_epochs < 0:
            raise OutOfRangeError("vocab_size and per-branch epochs must be >= 0")
        if not 0.0 < self.bn_momentum < 1.0:
            raise OutOfRangeError("bn_momentum must lie in (0, 1)")
        if not 0.0 < self.lr_decay <= 1.0:
            raise OutOfRangeError("lr_decay must lie in (0, 1]")
        choices = {
            "direction": DIRECTIONS,
            "similarity": SIMILARITIES,
            "strategy": STRATEGIES,
            "attn_norm_axis": NORM_AXES,
            "saf_bn_scope": BN_SCOPES,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise OutOfRangeError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not self.branches or any(b not in BRANCHES for b in self.branches):
            raise OutOfRangeError(f"branches must be a non-empty subset of {BRANCHES}")
        if not (self.use_global or self.use_local):
            raise OutOfRangeError("at least one of use_global/use_local must be enabled")
        return self

    @property
    def node_dim(self) -> int:
        """Width of a similarity node: m for vector similarity, 1 for the scalar ablation."""
        return self.m if self.similarity == "vector" else 1

    def epochs_for(self, branch: str) -> int:
        per_branch = {"sgr": self.sgr_epochs, "saf": self.saf_epochs}.get(branch, 0)
        return per_branch or self.epochs

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


TOY = dict(d=32, embed_dim=16, attn_hidden=32, m=16, d_raw=32, regions=8)


def toy_config(**overrides) -> RunConfig:
    """Desk-scale profile used by tests and demos."""
    return RunConfig(**{**TOY, **overrides})


_INT_TUPLES = ("lr_decay_epochs",)
_ALIASES = {"graph_dim": "m", "lambda": "lam", "gamma": "margin", "K": "regions", "N": "steps"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return _parse_bool(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s for s in raw.replace(",", " ").split() if s]
            if name in _INT_TUPLES:
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw.strip()


def parse_config(text: str, required: Iterable[str] = (), base: Optional[RunConfig] = None) -> RunConfig:
    defaults = (base or RunConfig()).to_dict()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in defaults:
            raise UnknownKeyError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, defaults[key])
    missing = [k for k in required if _ALIASES.get(k, k) not in values]
    if missing:
        raise MissingKeyError(f"missing required keys: {', '.join(missing)}")
    return RunConfig(**{**defaults, **values})


def load_config(path: Union[str, Path], required: Iterable[str] = (), base: Optional[RunConfig] = None) -> RunConfig:
    return parse_config(Path(path).read_text(), required=required, base=base)


def dump_config(config: RunConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, tuple):
            value = " ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
