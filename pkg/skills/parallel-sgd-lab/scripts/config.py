#!/usr/bin/env python3
"""
Experiment configuration: parsing, validation and sweep expansion.

Config files are flat `key = value` lines with dotted sections:

    # four strategies, 4 workers
    experiment.name = four-strategy
    data.task = linreg
    strategy.kind = bmuf
    sweep.strategy_kind = bsp, asgd, bmuf, easgd-async

Lists are comma separated. Every key is declared in SCHEMA with a type and
default; unknown keys and missing required keys raise ConfigError naming
the key.

Environment:
    PSYN_OUT   default output root when output.dir is unset (~/.psyn/runs)

Usage:
    from config import load_config

    cfg = load_config("configs/tau-sweep.conf", overrides={"seed": 7})
    for cell in cfg.cells():
        print(cell.label, cell.strategy_config())
"""

import hashlib
import itertools
import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Optional, Union

from cluster_sim import SimConfig
from data_shard import TASKS, model_for_task
from errors import ConfigError
from numkit import MODEL_KINDS
from strategies import SCHEDULES, STRATEGY_KINDS, StrategyConfig, resolve_strategy

logger = logging.getLogger(__name__)

DEFAULT_OUT = Path.home() / ".psyn" / "runs"

REQUIRED = object()

# key -> (type, default). Types: str, int, float, bool, ints, floats, strs.
SCHEMA: dict[str, tuple[str, Any]] = {
    "experiment.name": ("str", "experiment"),
    "seed": ("int", 42),
    "output.dir": ("str", None),
    "data.task": ("str", "linreg"),
    "data.n": ("int", 2000),
    "data.d": ("int", 20),
    "data.noise": ("float", 0.0),
    "data.cond": ("float", 1.0),
    "data.classes": ("int", 4),
    "data.cv_fraction": ("float", 0.1),
    "data.reshuffle": ("bool", True),
    "model.kind": ("str", None),
    "model.hidden": ("ints", (16,)),
    "strategy.kind": ("str", REQUIRED),
    "strategy.n_workers": ("int", 4),
    "strategy.sync_period": ("int", 5),
    "strategy.lr": ("float", 0.1),
    "strategy.block_momentum": ("float", None),
    "strategy.block_lr": ("float", 1.0),
    "strategy.c_constant": ("float", None),
    "strategy.elastic_alpha": ("float", None),
    "train.minibatch": ("int", 10),
    "train.epochs_max": ("int", 20),
    "train.warm_start_epochs": ("int", 1),
    "train.schedule": ("str", "newbob"),
    "train.start_halving": ("float", 0.01),
    "train.stop_threshold": ("float", 0.001),
    "timing.compute_time": ("floats", (1.0,)),
    "timing.exchange_cost": ("float", 0.0),
    "sweep.strategy_kind": ("strs", None),
    "sweep.n_workers": ("ints", None),
    "sweep.sync_period": ("ints", None),
    "sweep.minibatch": ("ints", None),
    "sweep.kind_sync_period": ("strs", None),
}

SWEEP_AXES = {
    "sweep.strategy_kind": "strategy.kind",
    "sweep.n_workers": "strategy.n_workers",
    "sweep.sync_period": "strategy.sync_period",
    "sweep.minibatch": "train.minibatch",
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


# ─── Parsing ─────────────────────────────────────────────────────


def _convert(key: str, kind: str, raw: str) -> Any:
    try:
        if kind == "str":
            return raw
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: '{raw}'")
        items = [item.strip() for item in raw.split(",") if item.strip()]
        if not items:
            raise ValueError("empty list")
        caster = {"ints": int, "floats": float, "strs": str}[kind]
        return tuple(caster(item) for item in items)
    except ValueError as e:
        raise ConfigError(f"cannot read '{raw}' as {kind}: {e}", key=key) from e


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse `key = value` lines into typed values (schema keys only)."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{stripped}'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key", key=key)
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key", key=key)
        if not raw:
            raise ConfigError(f"{source}:{lineno}: empty value", key=key)
        values[key] = _convert(key, SCHEMA[key][0], raw)
    return values


# ─── Config object ───────────────────────────────────────────────


def _field_name(key: str) -> str:
    return key.replace(".", "_")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_name: str
    seed: int
    output_dir: Optional[str]
    data_task: str
    data_n: int
    data_d: int
    data_noise: float
    data_cond: float
    data_classes: int
    data_cv_fraction: float
    data_reshuffle: bool
    model_kind: Optional[str]
    model_hidden: tuple
    strategy_kind: str
    strategy_n_workers: int
    strategy_sync_period: int
    strategy_lr: float
    strategy_block_momentum: Optional[float]
    strategy_block_lr: float
    strategy_c_constant: Optional[float]
    strategy_elastic_alpha: Optional[float]
    train_minibatch: int
    train_epochs_max: int
    train_warm_start_epochs: int
    train_schedule: str
    train_start_halving: float
    train_stop_threshold: float
    timing_compute_time: tuple
    timing_exchange_cost: float
    sweep_strategy_kind: Optional[tuple]
    sweep_n_workers: Optional[tuple]
    sweep_sync_period: Optional[tuple]
    sweep_minibatch: Optional[tuple]
    sweep_kind_sync_period: Optional[tuple]

    # accessors

    def get(self, key: str) -> Any:
        return getattr(self, _field_name(key))

    def to_dict(self) -> dict[str, Any]:
        """Canonical key -> value mapping (lists as lists)."""
        out = {}
        for key in SCHEMA:
            value = self.get(key)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, output location excluded."""
        payload = self.to_dict()
        payload.pop("output.dir")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def label(self) -> str:
        return (
            f"{self.strategy_kind}-n{self.strategy_n_workers}"
            f"-tau{self.strategy_sync_period}-mb{self.train_minibatch}"
        )

    @property
    def is_sweep(self) -> bool:
        return self.sweep_kind_sync_period is not None or any(self.get(axis) is not None for axis in SWEEP_AXES)

    def output_root(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir).expanduser()
        return Path(os.environ.get("PSYN_OUT", str(DEFAULT_OUT))).expanduser()

    # derived configs

    def model_spec(self) -> tuple[str, tuple]:
        """(model kind, layer dims) for this dataset."""
        default_kind, dims = model_for_task(self.data_task, self.data_d, self.data_classes, self.model_hidden)
        kind = self.model_kind or default_kind
        if kind == "mlp" and default_kind != "mlp":
            out = 2 if self.data_task == "logreg" else 1
            dims = (self.data_d, *self.model_hidden, out)
        return kind, dims

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(
            kind=self.strategy_kind,
            n_workers=self.strategy_n_workers,
            sync_period=self.strategy_sync_period,
            lr=self.strategy_lr,
            block_momentum=self.strategy_block_momentum,
            block_lr=self.strategy_block_lr,
            c_constant=self.strategy_c_constant,
            elastic_alpha=self.strategy_elastic_alpha,
        )

    def compute_times(self) -> tuple:
        times = self.timing_compute_time
        if len(times) == 1:
            return times * self.strategy_n_workers
        return times

    def sim_config(self, record_global_history: bool = False) -> SimConfig:
        return SimConfig(
            strategy=self.strategy_config(),
            compute_time_per_minibatch=self.compute_times(),
            exchange_cost=self.timing_exchange_cost,
            epochs_max=self.train_epochs_max,
            seed=self.seed,
            schedule=self.train_schedule,
            start_halving=self.train_start_halving,
            stop_threshold=self.train_stop_threshold,
            record_global_history=record_global_history,
        )

    def cells(self) -> list["ExperimentConfig"]:
        """Cartesian product of the sweep axes; [self] when there are none.

        Each cell has its sweep keys cleared and the swept values applied.
        A `sweep.kind_sync_period` map then overrides the sync period of
        every cell whose strategy it names.
        """
        axes = [(axis, target) for axis, target in SWEEP_AXES.items() if self.get(axis) is not None]
        cleared = replace(
            self,
            sweep_kind_sync_period=None,
            **{_field_name(axis): None for axis in SWEEP_AXES},
        )
        cells = [cleared]
        if axes:
            cells = []
            for combo in itertools.product(*(self.get(axis) for axis, _ in axes)):
                updates = {_field_name(target): value for (_, target), value in zip(axes, combo)}
                cells.append(replace(cleared, **updates))
        if self.sweep_kind_sync_period is not None:
            periods = parse_kind_sync_period(self.sweep_kind_sync_period)
            cells = [
                replace(cell, strategy_sync_period=periods[cell.strategy_kind])
                if cell.strategy_kind in periods
                else cell
                for cell in cells
            ]
        return cells


def parse_kind_sync_period(items: tuple) -> dict[str, int]:
    """Read `kind:tau` items into a strategy -> sync period map."""
    key = "sweep.kind_sync_period"
    periods: dict[str, int] = {}
    for item in items:
        kind, sep, raw = item.partition(":")
        kind = kind.strip()
        _require(bool(sep), key, f"expected 'kind:tau', got '{item}'")
        _require(kind in STRATEGY_KINDS, key, f"unknown strategy '{kind}'")
        _require(kind not in periods, key, f"strategy '{kind}' given twice")
        try:
            tau = int(raw)
        except ValueError as e:
            raise ConfigError(f"cannot read '{raw.strip()}' as a sync period", key=key) from e
        _require(tau >= 1, key, f"sync period must be >= 1, got {tau} for {kind}")
        periods[kind] = tau
    return periods


# ─── Validation ──────────────────────────────────────────────────


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(message, key=key)


def _validate_cell(cfg: ExperimentConfig) -> None:
    resolve_strategy(cfg.strategy_config())
    n_workers = cfg.strategy_n_workers
    times = cfg.timing_compute_time
    _require(
        len(times) in (1, n_workers),
        "timing.compute_time",
        f"{len(times)} compute times for {n_workers} workers (give one value or one per worker)",
    )
    _require(cfg.train_minibatch >= 1, "train.minibatch", f"must be >= 1, got {cfg.train_minibatch}")
    n_train = cfg.data_n - int(round(cfg.data_cv_fraction * cfg.data_n))
    _require(
        n_train >= n_workers * cfg.train_minibatch,
        "train.minibatch",
        f"minibatch {cfg.train_minibatch} x {n_workers} workers exceeds the {n_train} training samples",
    )
    cfg.sim_config()


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Check ranges and that every sweep cell resolves to a valid SimConfig."""
    _require(cfg.data_task in TASKS, "data.task", f"unknown task '{cfg.data_task}'. Valid: {', '.join(TASKS)}")
    _require(cfg.data_n >= 1, "data.n", f"must be >= 1, got {cfg.data_n}")
    _require(cfg.data_d >= 1, "data.d", f"must be >= 1, got {cfg.data_d}")
    _require(cfg.data_noise >= 0, "data.noise", f"must be >= 0, got {cfg.data_noise}")
    _require(cfg.data_cond >= 1, "data.cond", f"must be >= 1, got {cfg.data_cond}")
    _require(
        0 < cfg.data_cv_fraction <= 0.5,
        "data.cv_fraction",
        f"must be in (0, 0.5], got {cfg.data_cv_fraction}",
    )
    _require(
        int(round(cfg.data_cv_fraction * cfg.data_n)) > 0,
        "data.cv_fraction",
        f"leaves the CV set of {cfg.data_n} samples empty",
    )
    if cfg.data_task == "mlp-teacher":
        _require(cfg.data_classes >= 2, "data.classes", f"must be >= 2, got {cfg.data_classes}")
    if cfg.model_kind is not None:
        _require(cfg.model_kind in MODEL_KINDS, "model.kind", f"unknown model '{cfg.model_kind}'")
        default_kind, _ = model_for_task(cfg.data_task, cfg.data_d)
        _require(
            cfg.model_kind in (default_kind, "mlp"),
            "model.kind",
            f"{cfg.model_kind} cannot fit task {cfg.data_task}",
        )
    _require(all(h >= 1 for h in cfg.model_hidden), "model.hidden", "hidden sizes must be >= 1")
    _require(cfg.train_epochs_max >= 1, "train.epochs_max", f"must be >= 1, got {cfg.train_epochs_max}")
    _require(
        cfg.train_warm_start_epochs >= 0,
        "train.warm_start_epochs",
        f"must be >= 0, got {cfg.train_warm_start_epochs}",
    )
    _require(
        cfg.train_schedule in SCHEDULES,
        "train.schedule",
        f"unknown schedule '{cfg.train_schedule}'. Valid: {', '.join(SCHEDULES)}",
    )
    if cfg.sweep_strategy_kind is not None:
        for kind in cfg.sweep_strategy_kind:
            _require(kind in STRATEGY_KINDS, "sweep.strategy_kind", f"unknown strategy '{kind}'")
    if cfg.sweep_kind_sync_period is not None:
        parse_kind_sync_period(cfg.sweep_kind_sync_period)

    for cell in cfg.cells():
        _validate_cell(cell)
    return cfg


def build_config(values: dict[str, Any]) -> ExperimentConfig:
    """Fill defaults, reject unknown or missing keys, validate."""
    for key in values:
        if key not in SCHEMA:
            raise ConfigError("unknown key", key=key)
    kwargs = {}
    for key, (kind, default) in SCHEMA.items():
        if key in values:
            value = values[key]
            if value is not None and kind in ("ints", "floats", "strs") and not isinstance(value, tuple):
                value = tuple(value) if isinstance(value, list) else (value,)
        elif default is REQUIRED:
            # a sweep over strategies supplies the kind
            if key == "strategy.kind" and values.get("sweep.strategy_kind"):
                value = tuple(values["sweep.strategy_kind"])[0]
            else:
                raise ConfigError("missing required key", key=key)
        else:
            value = default
        kwargs[_field_name(key)] = value
    return validate(ExperimentConfig(**kwargs))


def load_config(path: Union[str, Path], overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    """Read a config file and apply CLI overrides (already typed)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = parse_config_text(path.read_text(), source=str(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    cfg = build_config(values)
    logger.debug("loaded %s (hash %s)", path, cfg.config_hash()[:12])
    return cfg


def config_from_dict(payload: dict[str, Any]) -> ExperimentConfig:
    """Rebuild a config from its to_dict() form (e.g. a run manifest)."""
    return build_config({k: v for k, v in payload.items() if k in SCHEMA})
