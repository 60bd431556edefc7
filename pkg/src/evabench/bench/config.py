"""Flat ``key = value`` configuration files.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored; list values are comma-separated; keys may appear once.
Unknown keys, malformed lines and invalid values raise :class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..eva import KNOWN_FAULTS, PROPOSALS
from ..features import MODES

ESTIMATORS = ("softmax", "performer", "eva-ideal", "eva-practical", "eva-causal", "scatterbrain")
FORMATS = ("csv", "json")


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    lengths: list[int] = field(default_factory=lambda: [512, 1024, 2048, 4096, 8192])
    d: int = 32
    K: int = 64
    C: int = 32
    S: int = 64
    estimators: list[str] = field(default_factory=lambda: ["softmax", "eva-practical"])
    seeds: list[int] = field(default_factory=lambda: [0])
    repeats: int = 5
    warmup: int = 2
    output_path: str | None = None
    format: str | None = None  # None: json for verify, csv otherwise
    mode: str = "sample"
    proposal: str = "qk"
    compute_mse: bool = False
    mc_scale: float = 1.0  # shrinks Monte Carlo sample counts in verify
    fault: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lengths:
            raise ConfigError("lengths must be nonempty")
        if any(n < 1 for n in self.lengths):
            raise ConfigError("lengths must be positive")
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise ConfigError(f"lengths must be strictly ascending, got {self.lengths}")
        for name in ("d", "S"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.K < 0 or self.C < 0:
            raise ConfigError("K and C must be non-negative")
        if self.K == 0 and self.C == 0:
            raise ConfigError("K = 0 and C = 0 leaves nothing to attend to")
        if max(self.K, self.C) > self.lengths[0]:
            raise ConfigError(f"K={self.K} and C={self.C} must not exceed the smallest length {self.lengths[0]}")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad or not self.estimators:
            raise ConfigError(f"unknown estimators {bad}; choose from {', '.join(ESTIMATORS)}")
        if not self.seeds or any(s < 0 or s >= 2**64 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of unsigned 64-bit integers")
        if self.repeats < 3:
            raise ConfigError(f"repeats must be >= 3, got {self.repeats}")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.format is not None and self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.proposal not in PROPOSALS:
            raise ConfigError(f"proposal must be one of {PROPOSALS}")
        if not 0 < self.mc_scale <= 1:
            raise ConfigError("mc_scale must lie in (0, 1]")
        if self.fault is not None and self.fault not in KNOWN_FAULTS:
            raise ConfigError(f"unknown fault {self.fault!r}; known: {', '.join(KNOWN_FAULTS)}")

    def replace(self, **changes) -> "BenchConfig":
        return dataclasses.replace(self, **changes)


def _int(s: str) -> int:
    return int(s, 10)


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_str(s: str) -> str | None:
    return None if s.lower() in ("", "none") else s


def _list(conv):
    def parse(s: str):
        items = [x.strip() for x in s.split(",")]
        if any(not x for x in items):
            raise ValueError("empty list item")
        return [conv(x) for x in items]
    return parse


_FIELDS = {
    "lengths": _list(_int),
    "d": _int,
    "K": _int,
    "C": _int,
    "S": _int,
    "estimators": _list(str),
    "seeds": _list(_int),
    "repeats": _int,
    "warmup": _int,
    "output_path": _opt_str,
    "format": _opt_str,
    "mode": str,
    "proposal": str,
    "compute_mse": _bool,
    "mc_scale": float,
    "fault": _opt_str,
}


def parse_config(text: str) -> BenchConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _FIELDS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return BenchConfig(**values)


def load_config(path) -> BenchConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_config(text)


def format_config(cfg: BenchConfig) -> str:
    """Render a config in the same grammar :func:`parse_config` reads."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
