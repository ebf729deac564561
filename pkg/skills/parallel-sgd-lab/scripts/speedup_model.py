#!/usr/bin/env python3
"""
Analytic speedup model for data-parallel training.

With t_s the single-worker compute time per epoch, t_c the communication
overhead per epoch, N workers and a utilization factor u ≥ 1 (u = 1 when a
minibatch fills the device):

    s = 1 / (u/N + t_c/t_s)

This module predicts s, inverts it for t_c/t_s, and fits (u, t_c/t_s) to
measured speedup tables.

Usage:
    python3 speedup_model.py predict --workers 4 --ratio 0.1231
    python3 speedup_model.py invert --speedup 2.68 --workers 4
    python3 speedup_model.py fit observations.csv --structure per-period-ratio
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from errors import InfeasibleError, RejectedInputError, UnderdeterminedError
from numkit import sequential_sum

logger = logging.getLogger(__name__)

STRUCTURES = ("shared-ratio", "per-period-ratio", "per-minibatch-ratio")
OBSERVATION_HEADER = ["n_workers", "sync_period", "minibatch", "speedup"]

# Search box for the fit.
UTILIZATION_MAX = 8.0
RATIO_MAX = 10.0


# ─── Types ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class SpeedupInputs:
    t_s: float
    t_c: float
    n_workers: int
    utilization: float = 1.0

    def __post_init__(self):
        if not self.t_s > 0:
            raise RejectedInputError(f"t_s must be > 0, got {self.t_s}")
        if self.t_c < 0:
            raise RejectedInputError(f"t_c must be >= 0, got {self.t_c}")
        if self.n_workers < 1:
            raise RejectedInputError(f"n_workers must be >= 1, got {self.n_workers}")
        if self.utilization < 1:
            raise RejectedInputError(f"utilization must be >= 1, got {self.utilization}")

    @property
    def ratio(self) -> float:
        return self.t_c / self.t_s


@dataclass(frozen=True)
class SpeedupObservation:
    n_workers: int
    sync_period: int
    minibatch: int
    measured_speedup: float

    def __post_init__(self):
        if self.n_workers < 1:
            raise RejectedInputError(f"n_workers must be >= 1, got {self.n_workers}")
        if not self.measured_speedup > 0:
            raise RejectedInputError(f"measured speedup must be > 0, got {self.measured_speedup}")

    @property
    def superlinear(self) -> bool:
        return self.measured_speedup > self.n_workers


@dataclass
class SpeedupFit:
    structure: str
    utilization: float
    utilization_free: bool
    ratios: dict = field(default_factory=dict)
    residuals: list = field(default_factory=list)
    sweeps: int = 0

    @property
    def rms_residual(self) -> float:
        if not self.residuals:
            return 0.0
        squares = np.square(np.asarray(self.residuals, dtype=np.float64))
        return float(np.sqrt(sequential_sum(squares) / squares.size))

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "utilization": self.utilization,
            "utilization_free": self.utilization_free,
            "ratios": {str(k): v for k, v in self.ratios.items()},
            "residuals": list(self.residuals),
            "rms_residual": self.rms_residual,
            "sweeps": self.sweeps,
        }


# ─── Published rows ──────────────────────────────────────────────

# (n_workers, sync_period, minibatch, speedup) for a DNN trained with BMUF
# on 4 and 8 GPUs.
BMUF_SYNC_PERIOD_ROWS = [
    (4, 5, 4096, 2.68),
    (4, 20, 4096, 2.90),
    (4, 80, 4096, 2.93),
]
BMUF_MINIBATCH_ROWS = [
    (4, 5, 256, 1.85),
    (4, 20, 256, 2.54),
    (4, 80, 256, 3.21),
    (4, 5, 1024, 2.14),
    (4, 20, 1024, 2.76),
    (4, 80, 1024, 2.98),
    (4, 5, 4096, 2.68),
    (4, 20, 4096, 2.90),
    (4, 80, 4096, 2.93),
]
STRATEGY_ROWS = {
    "asgd": [(4, 5, 4096, 2.74), (8, 5, 4096, 4.72)],
    "bmuf": [(4, 5, 4096, 2.68), (8, 5, 4096, 4.56)],
    "bsp": [(4, 5, 4096, 2.68), (8, 5, 4096, 4.56)],
    "easgd": [(4, 5, 4096, 2.80), (8, 5, 4096, 5.00)],
}
# Each strategy at its best sync period on 4 GPUs.
BEST_SYNC_PERIOD_ROWS = {
    "asgd": [(4, 1, 4096, 2.22)],
    "bmuf": [(4, 80, 4096, 2.93)],
    "bsp": [(4, 5, 4096, 2.68)],
    "easgd": [(4, 64, 4096, 2.99)],
}
# CLDNN, minibatch of 100 subsequences.
CLDNN_STRATEGY_ROWS = {
    "asgd": [(4, 5, 100, 3.42), (8, 5, 100, 6.11)],
    "bmuf": [(4, 80, 100, 3.84), (8, 80, 100, 6.88)],
    "bsp": [(4, 5, 100, 3.50), (8, 5, 100, 6.03)],
    "easgd": [(4, 64, 100, 3.53), (8, 64, 100, 7.45)],
}


def observations_from_rows(rows: Sequence[tuple]) -> list[SpeedupObservation]:
    return [SpeedupObservation(int(n), int(tau), int(mb), float(s)) for n, tau, mb, s in rows]


# ─── Model ───────────────────────────────────────────────────────


def predict_speedup(inputs: SpeedupInputs) -> float:
    """s = 1 / (u/N + t_c/t_s)."""
    return 1.0 / (inputs.utilization / inputs.n_workers + inputs.ratio)


def invert_ratio(s: float, n_workers: int, utilization: float = 1.0) -> float:
    """t_c/t_s = 1/s − u/N.

    Raises:
        InfeasibleError: s ≥ N/u, which no nonnegative overhead can explain.
    """
    if not s > 0:
        raise RejectedInputError(f"speedup must be > 0, got {s}")
    if n_workers < 1 or utilization < 1:
        raise RejectedInputError(f"need n_workers >= 1 and utilization >= 1, got {n_workers}, {utilization}")
    if s > n_workers / utilization:
        raise InfeasibleError(f"speedup {s} exceeds N/utilization = {n_workers / utilization}")
    if s == n_workers / utilization:
        return 0.0
    return 1.0 / s - utilization / n_workers


def _group_key(obs: SpeedupObservation, structure: str):
    if structure == "shared-ratio":
        return "all"
    if structure == "per-period-ratio":
        return obs.sync_period
    return obs.minibatch


def fit_model(
    observations: Sequence[SpeedupObservation],
    structure: str = "shared-ratio",
    max_sweeps: int = 20000,
    tol: float = 1e-15,
) -> SpeedupFit:
    """Least-squares fit of utilization and per-group t_c/t_s.

    Each observation contributes the residual s − s²(u/N + r), which
    vanishes exactly where the model reproduces s and weighs errors like
    the speedup-space residual to first order. The search starts from the
    best point of a coarse grid over the bounded box and is refined by
    exact coordinate descent (u ≥ 1, r ≥ 0).

    Utilization is only free when the observations cover at least two
    worker counts; otherwise it is pinned to 1.

    Raises:
        UnderdeterminedError: fewer observations than free parameters.
        RejectedInputError: unknown structure or no observations.
    """
    if structure not in STRUCTURES:
        raise RejectedInputError(f"unknown structure '{structure}'. Valid: {', '.join(STRUCTURES)}")
    if not observations:
        raise RejectedInputError("no observations to fit")

    for obs in observations:
        if obs.superlinear:
            logger.warning("superlinear observation: %.3fX on %d workers", obs.measured_speedup, obs.n_workers)

    keys = sorted({_group_key(o, structure) for o in observations}, key=str)
    group = np.array([keys.index(_group_key(o, structure)) for o in observations])
    s = np.array([o.measured_speedup for o in observations], dtype=np.float64)
    a = np.array([1.0 / o.n_workers for o in observations], dtype=np.float64)
    y = 1.0 / s
    w = s ** 4

    u_free = len({o.n_workers for o in observations}) >= 2
    n_params = len(keys) + (1 if u_free else 0)
    if len(observations) < n_params:
        raise UnderdeterminedError(
            f"{len(observations)} observations for {n_params} free parameters ({structure})"
        )

    def ratios_for(u: float) -> np.ndarray:
        r = np.empty(len(keys))
        for g in range(len(keys)):
            m = group == g
            r[g] = max(0.0, sequential_sum(w[m] * (y[m] - u * a[m])) / sequential_sum(w[m]))
        return r

    def objective(u: float, r: np.ndarray) -> float:
        return sequential_sum(w * (y - u * a - r[group]) ** 2)

    u = 1.0
    if u_free:
        grid = np.linspace(1.0, UTILIZATION_MAX, 141)
        u = float(min(grid, key=lambda cand: objective(cand, np.minimum(ratios_for(cand), RATIO_MAX))))
    r = ratios_for(u)

    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        before = objective(u, r)
        if u_free:
            u = max(1.0, sequential_sum(w * a * (y - r[group])) / sequential_sum(w * a * a))
        r = ratios_for(u)
        after = objective(u, r)
        if before - after <= tol * max(before, 1e-300):
            break

    residuals = [float(v) for v in s - 1.0 / (u * a + r[group])]
    logger.debug("fit %s: u=%.6g ratios=%s after %d sweeps", structure, u, r, sweeps)
    return SpeedupFit(
        structure=structure,
        utilization=u,
        utilization_free=u_free,
        ratios={k: float(r[i]) for i, k in enumerate(keys)},
        residuals=residuals,
        sweeps=sweeps,
    )


# ─── Files ───────────────────────────────────────────────────────


def read_observations(path: Union[str, Path]) -> list[SpeedupObservation]:
    """Read `n_workers,sync_period,minibatch,speedup` rows; '#' lines are skipped."""
    with open(path, newline="") as f:
        lines = [line for line in f if line.strip() and not line.lstrip().startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames != OBSERVATION_HEADER:
        raise RejectedInputError(f"{path}: expected header {','.join(OBSERVATION_HEADER)}, got {reader.fieldnames}")
    try:
        return [
            SpeedupObservation(int(r["n_workers"]), int(r["sync_period"]), int(r["minibatch"]), float(r["speedup"]))
            for r in reader
        ]
    except (TypeError, ValueError) as e:
        raise RejectedInputError(f"{path}: bad observation row: {e}") from e


def write_observations(observations: Sequence[SpeedupObservation], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(OBSERVATION_HEADER)
        for o in observations:
            writer.writerow([o.n_workers, o.sync_period, o.minibatch, repr(o.measured_speedup)])
    return path


def write_fit_report(
    fit: SpeedupFit,
    observations: Sequence[SpeedupObservation],
    path: Union[str, Path],
) -> Path:
    """One row per observation with its group ratio, prediction and residual."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(OBSERVATION_HEADER + ["group", "utilization", "ratio", "predicted", "residual", "superlinear"])
        for obs, res in zip(observations, fit.residuals):
            key = _group_key(obs, fit.structure)
            writer.writerow([
                obs.n_workers, obs.sync_period, obs.minibatch, repr(obs.measured_speedup),
                key, repr(fit.utilization), repr(fit.ratios[key]),
                repr(obs.measured_speedup - res), repr(res), int(obs.superlinear),
            ])
    return path


# ─── CLI ─────────────────────────────────────────────────────────


def main():
    parser = argparse.ArgumentParser(description="Analytic speedup model for data-parallel training")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="Speedup from N, t_c/t_s and utilization")
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True, help="t_c / t_s")
    p.add_argument("--utilization", type=float, default=1.0)

    p = sub.add_parser("invert", help="t_c/t_s from a measured speedup")
    p.add_argument("--speedup", type=float, required=True)
    p.add_argument("--workers", type=int, required=True)
    p.add_argument("--utilization", type=float, default=1.0)

    p = sub.add_parser("fit", help="Fit utilization and t_c/t_s to an observation CSV")
    p.add_argument("observations", help="CSV with n_workers,sync_period,minibatch,speedup")
    p.add_argument("--structure", choices=STRUCTURES, default="shared-ratio")
    p.add_argument("--report", help="Write a per-observation report CSV here")

    args = parser.parse_args()
    try:
        if args.command == "predict":
            s = predict_speedup(SpeedupInputs(t_s=1.0, t_c=args.ratio, n_workers=args.workers,
                                              utilization=args.utilization))
            print(f"{s:.4f}")
        elif args.command == "invert":
            print(f"{invert_ratio(args.speedup, args.workers, args.utilization):.6f}")
        else:
            observations = read_observations(args.observations)
            fit = fit_model(observations, args.structure)
            if args.report:
                write_fit_report(fit, observations, args.report)
                print(f"📄 Report written to {args.report}", file=sys.stderr)
            print(json.dumps(fit.to_dict(), indent=2))
    except ValueError as e:
        print(f"❌ {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
