"""INI run configuration with strict keys.

Every section and key is declared in :data:`SCHEMA` with a parser and a
default; anything else is rejected with a :class:`ConfigError` that names the
offending entry.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .cascade import BACKENDS, EXPLICIT
from .mlp import UNIFORM_K, UNIFORM_T
from .sampler import ANCESTRAL, DDIM
from .schedule import DEFAULT_BETA_HI, DEFAULT_BETA_LO, DEFAULT_LAMBDA_MIN, DEFAULT_T


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _floats(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def _components(text: str) -> tuple[tuple[float, ...], ...]:
    # one component per ';'-separated group, entries in row-major order
    return tuple(_floats(part) for part in text.split(";") if part.strip())


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _window(text: str) -> Optional[tuple[int, int]]:
    text = text.strip()
    if text in ("auto", ""):
        return None
    vals = _ints(text)
    if len(vals) != 2:
        raise ValueError("expected 'auto' or two integers lo, hi")
    return vals


def _opt_int(text: str) -> Optional[int]:
    text = text.strip()
    return None if text in ("", "auto") else int(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _str(text: str) -> str:
    return text.strip()


SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "cascade": {
        "base_shape": (_ints, (1, 2, 2)),
        "K": (int, 1),
        "backend": (_choice(*BACKENDS), EXPLICIT),
    },
    "schedule": {
        "T": (int, DEFAULT_T),
        "turning_points": (_ints, (600,)),
        "lambda_min": (float, DEFAULT_LAMBDA_MIN),
        "beta_lo": (float, DEFAULT_BETA_LO),
        "beta_hi": (float, DEFAULT_BETA_HI),
    },
    "train": {
        "iterations": (int, 20000),
        "batch": (int, 128),
        "lr": (float, 2e-3),
        "lr_final": (float, 1e-4),
        "seed": (int, 0),
        "level_rule": (_choice(UNIFORM_K, UNIFORM_T), UNIFORM_K),
        "hidden": (int, 64),
    },
    "sample": {
        "mode": (_choice(ANCESTRAL, DDIM), ANCESTRAL),
        "ddim_steps": (_opt_int, None),
        "eta_window": (_window, None),
        "seed": (int, 0),
        "count": (int, 16),
        "checkpoint": (_str, ""),
        "pgm": (_bool, True),
    },
    "data": {
        "weights": (_floats, ()),
        "means": (_components, ()),
        "stds": (_floats, ()),
        "components": (int, 3),
        "seed": (int, 7),
        "dataset": (_str, ""),
    },
    "forward": {
        "input": (_str, ""),
        "times": (_ints, ()),
        "seed": (int, 0),
    },
    "verify": {
        "lambda_mins": (_floats, (0.3, 0.1, 0.03, 0.01)),
        "first_turns": (_ints, ()),
        "n": (int, 1_000_000),
        "seed": (int, 0),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    source: Optional[Path] = None

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def override_seed(self, seed: int) -> None:
        for section in ("train", "sample", "forward", "verify"):
            self.values[section]["seed"] = seed


def defaults() -> RunConfig:
    return RunConfig({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()})


def parse_text(text: str, source: Optional[Path] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case-sensitive (K, T)
    try:
        parser.read_string(text, source=str(source) if source else "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = defaults()
    cfg.source = source
    if parser.defaults():
        raise ConfigError(f"key {next(iter(parser.defaults()))!r} outside any section")
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = conv(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r} in [{section}]: {raw!r} ({exc})") from exc
    _check(cfg)
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, path)


def _check(cfg: RunConfig) -> None:
    casc, sched = cfg["cascade"], cfg["schedule"]
    if casc["K"] < 0:
        raise ConfigError("key 'K' in [cascade] must be >= 0")
    if len(sched["turning_points"]) != casc["K"]:
        raise ConfigError(
            f"key 'turning_points' in [schedule] lists {len(sched['turning_points'])} points "
            f"but K = {casc['K']}"
        )
    positive = [("schedule", "T"), ("train", "batch"), ("verify", "n"), ("train", "hidden")]
    for sec, key in positive:
        if cfg[sec][key] <= 0:
            raise ConfigError(f"key {key!r} in [{sec}] must be positive")
    for sec, key in [("train", "iterations"), ("sample", "count"), ("train", "lr"), ("train", "lr_final")]:
        if cfg[sec][key] < 0:
            raise ConfigError(f"key {key!r} in [{sec}] must be non-negative")
    data = cfg["data"]
    m = len(data["means"])
    if m and not (len(data["weights"]) == m and len(data["stds"]) == m):
        raise ConfigError("keys 'weights', 'means' and 'stds' in [data] need one entry per component")
    if (data["weights"] or data["stds"]) and not m:
        raise ConfigError("key 'means' in [data] is required when weights or stds are given")
