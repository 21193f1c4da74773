"""Run configuration: a plain ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Lists are comma-separated,
booleans are ``true``/``false``. Every key has a default, so an empty file
is a valid configuration.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field, fields
from typing import Any, Iterable

from .errors import ConfigError

DATA_ROOT_ENV = "COLHAR_DATA_ROOT"

# fields that never change results; left out of the hash
_UNHASHED = frozenset({"workers", "output_dir", "cache_dir"})

_DEFAULT_SUBJECTS = {
    # (training agents, held-out test subjects)
    "pamap2": (["2", "3", "4", "5", "6", "7", "8", "9"], ["1"]),
    "harth": (["1", "2", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15",
               "17", "20"], ["16", "18"]),
    "synthetic": ([], []),
}


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    data_dir: str = ""
    output_dir: str = "runs"
    cache_dir: str = ""
    train_subjects: list[str] = field(default_factory=list)
    test_subjects: list[str] = field(default_factory=list)
    columns: list[int] = field(default_factory=list)
    activities: list[int] = field(default_factory=list)
    scope: str = "global"
    mode: str = "collab"
    window_length: int = 100
    stride: int = 0
    train_ratio: float = 0.8
    max_gap_seconds: float = 1.0
    standardize: bool = True
    conv_out_channels: int = 64
    conv_kernel: int = 3
    pool_kernel: int = 2
    batch_size: int = 64
    epochs: int = 10
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    topology: str = "full"
    topology_degree: int = 2
    include_self: bool = True
    reset_optimizer: bool = False
    seed: int = 0
    workers: int = 1
    synthetic_agents: int = 6
    synthetic_classes: int = 4
    synthetic_channels: int = 3
    synthetic_profile: str = "rotate:2"
    synthetic_windows: int = 40
    synthetic_test_windows: int = 25
    synthetic_noise: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.dataset in ("pamap2", "harth", "synthetic"), "dataset",
             "must be pamap2, harth or synthetic"),
            (self.scope in ("global", "local"), "scope", "must be global or local"),
            (self.mode in ("collab", "isolated", "centralized"), "mode",
             "must be collab, isolated or centralized"),
            (self.topology in ("full", "ring", "random"), "topology",
             "must be full, ring or random"),
            (self.epochs >= 1, "epochs", "must be >= 1"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.window_length >= 1, "window_length", "must be >= 1"),
            (self.stride >= 0, "stride", "must be >= 0 (0 means window_length)"),
            (0.0 < self.train_ratio < 1.0, "train_ratio", "must lie in (0, 1)"),
            (self.workers >= 1, "workers", "must be >= 1"),
            (self.alpha > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1
             and self.epsilon > 0, "alpha", "Adam hyperparameters out of range"),
            (self.synthetic_agents >= 1 and self.synthetic_classes >= 2
             and self.synthetic_channels >= 1, "synthetic_agents", "synthetic sizes too small"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")

    # -- derived values

    @property
    def effective_stride(self) -> int:
        return self.stride or self.window_length

    def subjects(self) -> tuple[list[str], list[str]]:
        train, test = _DEFAULT_SUBJECTS[self.dataset]
        return (self.train_subjects or list(train)), (self.test_subjects or list(test))

    def canonical(self, exclude: Iterable[str] = ()) -> str:
        skip = _UNHASHED | set(exclude)
        return "\n".join(f"{f.name} = {_format(getattr(self, f.name))}"
                         for f in fields(self) if f.name not in skip) + "\n"

    def hash(self, exclude: Iterable[str] = ()) -> str:
        return hashlib.sha256(self.canonical(exclude).encode()).hexdigest()[:12]

    @property
    def experiment_id(self) -> str:
        """Hash shared by runs that differ only in mode."""
        return self.hash(exclude={"mode"})

    def data_key(self) -> str:
        """Hash of the fields that determine the windowed datasets."""
        keys = ["dataset", "data_dir", "train_subjects", "test_subjects", "columns",
                "activities", "scope", "window_length", "stride", "train_ratio",
                "max_gap_seconds", "seed"]
        if self.dataset == "synthetic":
            keys += [f.name for f in fields(self) if f.name.startswith("synthetic_")]
        text = "\n".join(f"{k} = {_format(getattr(self, k))}" for k in keys)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for key, raw in overrides.items():
            if key not in values:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
        return RunConfig(**values)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str, lineno: int | None = None) -> Any:
    kind = _TYPES[key]
    where = f"line {lineno}: " if lineno is not None else ""
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "list[int]":
            return [int(x) for x in raw.split(",") if x.strip()]
        if kind == "list[str]":
            return [x.strip() for x in raw.split(",") if x.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"{where}{key}: cannot read {raw!r} as {kind}") from None


def default_data_dir(dataset: str) -> str:
    """``$COLHAR_DATA_ROOT/<dataset>`` if that directory exists, else the root itself."""
    root = os.environ.get(DATA_ROOT_ENV, "")
    if not root:
        return ""
    nested = os.path.join(root, dataset)
    return nested if os.path.isdir(nested) else root


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, lineno)
    for key, raw in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, raw)
    dataset = values.get("dataset", RunConfig.dataset)
    if dataset != "synthetic" and not values.get("data_dir"):
        values["data_dir"] = default_data_dir(dataset)
    try:
        return RunConfig(**values)
    except ConfigError as exc:
        lines = {k: n for n, line in enumerate(text.splitlines(), start=1)
                 for k in [line.split("=", 1)[0].strip()] if k in _TYPES}
        key = str(exc).split(":", 1)[0]
        if key in lines:
            raise ConfigError(f"line {lines[key]}: {exc}") from None
        raise


def parse_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Read a config file (``None`` means all defaults) and apply overrides."""
    text = ""
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, overrides)


def replace(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, **changes)
