"""Flat ``key = value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional

__all__ = ["ConfigError", "RunConfig", "parse_config", "load_config", "MODEL_SIZES", "TASKS"]

TASKS = ("delay", "idx")
MODEL_SIZES = {
    "small": {"depth": 6, "H": 128, "N": 128, "M": 1},
    "large": {"depth": 4, "H": 256, "N": 256, "M": 4},
}


class ConfigError(ValueError):
    """Unparseable config, unknown key or invalid value."""


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    task: str = "delay"
    model_size: str = "custom"
    H: int = 32
    N: int = 64
    M: int = 1
    depth: int = 2
    dt_min: float = 1e-2
    dt_max: float = 1e-1
    family: str = "legs"
    structured: bool = True
    lr: float = 3e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    mode: str = "fixed"
    norm: str = "post"
    pooling: str = "auto"
    stop_below: Optional[float] = None
    # delay task
    seq_len: int = 200
    delay: int = 50
    n_train: int = 2000
    n_val: int = 200
    # idx task
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: Optional[int] = None
    val_fraction: float = 0.1
    # other subcommands
    checkpoint: str = ""
    signal: str = ""
    orders: tuple = (4, 8, 16, 32, 64)
    signal_dt: Optional[float] = None
    kernel_length: int = 64
    kernel_c: str = "model"
    bench_n: tuple = (16, 32, 64, 128)
    bench_l: tuple = (256, 1024, 4096)
    bench_repeats: int = 5
    gradcheck_seeds: int = 1
    gradcheck_coords: int = 64
    gradcheck_tol: float = 1e-4
    out: str = "runs"

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.task in TASKS, f"task must be one of {TASKS}")
        need(self.model_size in ("custom",) + tuple(MODEL_SIZES), "model_size must be small, large or custom")
        for k in ("H", "N", "M", "depth", "batch_size", "seq_len", "n_train", "kernel_length",
                  "bench_repeats", "gradcheck_seeds", "gradcheck_coords"):
            need(getattr(self, k) >= 1, f"{k} must be >= 1")
        for k in ("epochs", "n_val", "seed"):
            need(getattr(self, k) >= 0, f"{k} must be >= 0")
        need(0 < self.dt_min <= self.dt_max, "need 0 < dt_min <= dt_max")
        need(self.lr > 0 and self.gradcheck_tol > 0, "lr and gradcheck_tol must be positive")
        need(0 <= self.delay < self.seq_len, "need 0 <= delay < seq_len")
        need(0 <= self.val_fraction < 1, "val_fraction must lie in [0, 1)")
        need(self.mode in ("fixed", "full"), "mode must be fixed or full")
        need(self.norm in ("pre", "post"), "norm must be pre or post")
        need(self.pooling in ("auto", "mean", "last", "none"), "pooling must be auto, mean, last or none")
        need(self.family in ("legs", "legt", "lagt", "jacobi"), "family must be legs, legt, lagt or jacobi")
        need(self.kernel_c in ("model", "e0"), "kernel_c must be model or e0")
        need(len(self.orders) > 0 and min(self.orders) >= 1, "orders must be positive integers")
        need(self.signal_dt is None or self.signal_dt > 0, "signal_dt must be positive")
        need(self.limit is None or self.limit >= 0, "limit must be >= 0")

    @property
    def effective_pooling(self):
        if self.pooling != "auto":
            return self.pooling
        return "none" if self.task == "delay" else "mean"

    def resolved(self, explicit=()):
        """Apply ``model_size`` presets except for keys set explicitly."""
        preset = MODEL_SIZES.get(self.model_size, {})
        return replace(self, **{k: v for k, v in preset.items() if k not in explicit})

    def to_text(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


def _converters():
    conv = {}
    for f in fields(RunConfig):
        default = f.default
        if f.name in ("orders", "bench_n", "bench_l"):
            conv[f.name] = _int_list
        elif isinstance(default, bool):
            conv[f.name] = _bool
        elif isinstance(default, int):
            conv[f.name] = int
        elif isinstance(default, float) or f.name in ("stop_below", "signal_dt"):
            conv[f.name] = float
        elif f.name == "limit":
            conv[f.name] = int
        else:
            conv[f.name] = str
    return conv


CONVERTERS = _converters()


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``overrides`` (already-typed or string values) win over the file.
    Unknown keys, duplicate keys and malformed lines raise :class:`ConfigError`.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONVERTERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = CONVERTERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    for key, value in (overrides or {}).items():
        if key not in CONVERTERS:
            raise ConfigError(f"unknown key {key!r}")
        if isinstance(value, str):
            try:
                value = CONVERTERS[key](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        values[key] = value
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.resolved(explicit=values)


def load_config(path, overrides=None) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)
