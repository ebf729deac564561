#!/usr/bin/env python3
"""
Synchronization strategies as pure update rules.

Covers model averaging (BSP), asynchronous SGD against a parameter server
(ASGD), blockwise model-update filtering with classical block momentum
(BMUF), synchronous and asynchronous elastic averaging (EASGD), and the
CV-driven learning-rate schedule ("newbob": fixed, then halving, then stop).

Nothing here knows about time or message order. The cluster simulator
decides who calls what, and when.

Usage:
    from strategies import StrategyConfig, resolve_strategy, bmuf_block_update

    resolved = resolve_strategy(StrategyConfig(kind="bmuf", n_workers=4, sync_period=20, lr=0.1))
    state = bmuf_block_update(state, locals_, resolved.block_momentum, resolved.config.block_lr)
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from errors import ConfigError, RejectedInputError
from numkit import Gradient, ParameterVector, sgd_step

logger = logging.getLogger(__name__)


# ─── Configuration ───────────────────────────────────────────────

STRATEGY_KINDS = ("bsp", "asgd", "bmuf", "easgd-sync", "easgd-async")
SYNC_KINDS = frozenset({"bsp", "bmuf", "easgd-sync"})
ASYNC_KINDS = frozenset({"asgd", "easgd-async"})

SCHEDULES = ("newbob", "constant")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    n_workers: int
    sync_period: int
    lr: float
    block_momentum: Optional[float] = None
    block_lr: float = 1.0
    c_constant: Optional[float] = None
    elastic_alpha: Optional[float] = None


@dataclass(frozen=True)
class ResolvedStrategy:
    """A validated StrategyConfig with derived coefficients filled in.

    block_momentum is ζ (BMUF only, resolved from C when not given).
    elastic_lambda is λ = α / lr for synchronous EASGD.
    """

    config: StrategyConfig
    block_momentum: Optional[float] = None
    elastic_alpha: Optional[float] = None
    elastic_lambda: Optional[float] = None

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def is_async(self) -> bool:
        return self.config.kind in ASYNC_KINDS


def bmuf_resolve_zeta(c: float, block_lr: float, n_workers: int) -> float:
    """Block momentum from ζ = 1 − η / (N·C).

    Raises:
        ConfigError: inputs out of range, or ζ lands outside [0, 1).
    """
    if c < 1:
        raise ConfigError(f"must be >= 1, got {c}", key="strategy.c_constant")
    if not block_lr > 0:
        raise ConfigError(f"must be > 0, got {block_lr}", key="strategy.block_lr")
    if n_workers < 1:
        raise ConfigError(f"must be >= 1, got {n_workers}", key="strategy.n_workers")
    zeta = 1.0 - block_lr / (n_workers * c)
    if not 0.0 <= zeta < 1.0:
        raise ConfigError(
            f"block momentum 1 - {block_lr}/({n_workers}*{c}) = {zeta} is outside [0, 1)",
            key="strategy.c_constant",
        )
    return zeta


def resolve_strategy(config: StrategyConfig) -> ResolvedStrategy:
    """Validate a strategy config and derive ζ / λ.

    Raises:
        ConfigError: naming the offending `strategy.*` key.
    """
    if config.kind not in STRATEGY_KINDS:
        raise ConfigError(
            f"unknown strategy '{config.kind}'. Valid: {', '.join(STRATEGY_KINDS)}",
            key="strategy.kind",
        )
    if int(config.n_workers) < 1:
        raise ConfigError(f"must be >= 1, got {config.n_workers}", key="strategy.n_workers")
    if int(config.sync_period) < 1:
        raise ConfigError(f"must be >= 1, got {config.sync_period}", key="strategy.sync_period")
    if not config.lr > 0:
        raise ConfigError(f"must be > 0, got {config.lr}", key="strategy.lr")

    if config.kind == "bmuf":
        if not config.block_lr > 0:
            raise ConfigError(f"must be > 0, got {config.block_lr}", key="strategy.block_lr")
        if config.block_momentum is not None and config.c_constant is not None:
            raise ConfigError(
                "give either block_momentum or c_constant, not both",
                key="strategy.block_momentum",
            )
        if config.block_momentum is not None:
            zeta = float(config.block_momentum)
            if not 0.0 <= zeta < 1.0:
                raise ConfigError(f"must be in [0, 1), got {zeta}", key="strategy.block_momentum")
        else:
            c = 1.0 if config.c_constant is None else float(config.c_constant)
            zeta = bmuf_resolve_zeta(c, config.block_lr, config.n_workers)
        logger.debug("bmuf block momentum resolved to %s", zeta)
        return ResolvedStrategy(config, block_momentum=zeta)

    if config.kind.startswith("easgd"):
        alpha = config.elastic_alpha
        if alpha is None:
            raise ConfigError("required for EASGD", key="strategy.elastic_alpha")
        if not 0.0 < alpha <= 1.0:
            raise ConfigError(f"must be in (0, 1], got {alpha}", key="strategy.elastic_alpha")
        lam = alpha / config.lr if config.kind == "easgd-sync" else None
        return ResolvedStrategy(config, elastic_alpha=float(alpha), elastic_lambda=lam)

    return ResolvedStrategy(config)


# ─── Shared helpers ──────────────────────────────────────────────


def _check_locals(locals_: Sequence[ParameterVector]) -> int:
    if not locals_:
        raise RejectedInputError("need at least one local model")
    dim = locals_[0].dim
    for i, w in enumerate(locals_):
        if w.dim != dim:
            raise RejectedInputError(f"local model {i} has dim {w.dim}, expected {dim}")
    return dim


def _require_dim(vec, dim: int, what: str) -> None:
    if vec.dim != dim:
        raise RejectedInputError(f"{what} has dim {vec.dim}, expected {dim}")


GradFn = Callable[[ParameterVector, object], Gradient]


@dataclass(frozen=True)
class RoundResult:
    """Outcome of τ local SGD steps.

    gradient is the ordered sum of the step gradients (None when no step
    ran). partial is True when the batch source ran dry before τ steps.
    """

    gradient: Optional[Gradient]
    new_local: ParameterVector
    steps: int
    partial: bool


def local_sgd_round(
    local: ParameterVector,
    batches: Iterable,
    tau: int,
    lr: float,
    grad_fn: GradFn,
) -> RoundResult:
    """Run up to τ chained sgd_steps from `local`.

    grad_fn(params, batch) returns the Gradient for one batch; the batches
    iterable is consumed lazily, at most τ items.
    """
    if tau < 1:
        raise RejectedInputError(f"tau must be >= 1, got {tau}")
    w = local
    total: Optional[np.ndarray] = None
    samples = 0
    steps = 0
    for batch in batches:
        g = grad_fn(w, batch)
        w = sgd_step(w, g, lr)
        total = g.values.copy() if total is None else total + g.values
        samples += g.sample_count
        steps += 1
        if steps == tau:
            break

    gradient = Gradient.adopt(total, samples) if steps else None
    if steps < tau:
        logger.debug("partial round: %d of %d steps", steps, tau)
    return RoundResult(gradient=gradient, new_local=w, steps=steps, partial=steps < tau)


# ─── BSP ─────────────────────────────────────────────────────────


def bsp_average(locals_: Sequence[ParameterVector]) -> ParameterVector:
    """Elementwise mean of the local models.

    Accumulates deviations from the first model in worker order, so a set of
    identical models averages back to that model bit for bit.
    """
    _check_locals(locals_)
    base = locals_[0].values
    acc = np.zeros_like(base)
    for w in locals_[1:]:
        acc = acc + (w.values - base)
    return ParameterVector.adopt(base + acc / len(locals_))


# ─── ASGD ────────────────────────────────────────────────────────


def asgd_server_apply(global_: ParameterVector, grad: Gradient, lr: float) -> ParameterVector:
    """w̃ ← w̃ − η·g, whatever model version g was computed on."""
    return sgd_step(global_, grad, lr)


def asgd_worker_round(
    local: ParameterVector,
    batches: Iterable,
    tau: int,
    lr: float,
    grad_fn: GradFn,
) -> RoundResult:
    """τ local steps from the pulled global; the result's gradient is what gets pushed."""
    return local_sgd_round(local, batches, tau, lr, grad_fn)


# ─── BMUF ────────────────────────────────────────────────────────


@dataclass(frozen=True)
class BmufState:
    global_: ParameterVector
    delta: ParameterVector
    block_index: int = 0

    @classmethod
    def start(cls, global_: ParameterVector) -> "BmufState":
        return cls(global_=global_, delta=ParameterVector.zeros(global_.dim), block_index=0)


def bmuf_block_update(
    state: BmufState,
    locals_: Sequence[ParameterVector],
    zeta: float,
    block_lr: float,
) -> BmufState:
    """One block-level filter step with classical block momentum.

    G = mean(locals) − w̃, Δ ← ζΔ + ηG, w̃ ← w̃ + Δ. The new global is evaluated
    as η·mean + (1 − η)·w̃ + ζ·Δ_prev so that ζ = 0, η = 1 returns the
    plain average bit for bit.
    """
    dim = _check_locals(locals_)
    _require_dim(state.global_, dim, "BMUF global")
    _require_dim(state.delta, dim, "BMUF delta")
    if not 0.0 <= zeta < 1.0:
        raise RejectedInputError(f"block momentum must be in [0, 1), got {zeta}")
    if not block_lr > 0:
        raise RejectedInputError(f"block learning rate must be positive, got {block_lr}")

    avg = bsp_average(locals_).values
    prev = state.global_.values
    block_grad = avg - prev
    delta = zeta * state.delta.values + block_lr * block_grad
    new_global = block_lr * avg + (1.0 - block_lr) * prev + zeta * state.delta.values
    return BmufState(
        global_=ParameterVector.adopt(new_global),
        delta=ParameterVector.adopt(delta),
        block_index=state.block_index + 1,
    )


# ─── EASGD ───────────────────────────────────────────────────────


def easgd_sync_step(
    locals_: Sequence[ParameterVector],
    grads: Sequence[Optional[Gradient]],
    global_: ParameterVector,
    lr: float,
    lam: float,
) -> tuple[list[ParameterVector], ParameterVector]:
    """Synchronous elastic step.

    w_i ← w_i − η∇w_i − ηλ(w_i − w̃) and w̃ ← w̃ − ηλΣ(w̃ − w_i), all on the
    pre-step values. A None gradient drops the gradient term for that worker.
    """
    dim = _check_locals(locals_)
    _require_dim(global_, dim, "EASGD global")
    if len(grads) != len(locals_):
        raise RejectedInputError(f"{len(grads)} gradients for {len(locals_)} local models")
    if not lr > 0 or not lam > 0:
        raise RejectedInputError(f"lr and lambda must be positive, got {lr}, {lam}")

    alpha = lr * lam
    center = global_.values
    new_locals = []
    pull = np.zeros_like(center)
    for w, g in zip(locals_, grads):
        diff = w.values - center
        step = w.values - alpha * diff
        if g is not None:
            _require_dim(g, dim, "EASGD gradient")
            step = step - lr * g.values
        new_locals.append(ParameterVector.adopt(step))
        pull = pull + (center - w.values)
    return new_locals, ParameterVector.adopt(center - alpha * pull)


def easgd_sync_round(
    locals_: Sequence[ParameterVector],
    batch_lists: Sequence[Sequence],
    global_: ParameterVector,
    lr: float,
    lam: float,
    grad_fn: GradFn,
) -> tuple[list[ParameterVector], ParameterVector]:
    """One synchronization period of synchronous EASGD.

    Each worker takes plain SGD steps on all but its last minibatch; the
    last minibatch's gradient enters the elastic step together with the
    elastic pull. Workers with no minibatches only feel the pull.
    """
    if len(batch_lists) != len(locals_):
        raise RejectedInputError(f"{len(batch_lists)} batch lists for {len(locals_)} workers")
    pre_exchange = []
    last_grads: list[Optional[Gradient]] = []
    for w, batches in zip(locals_, batch_lists):
        if not batches:
            pre_exchange.append(w)
            last_grads.append(None)
            continue
        for batch in batches[:-1]:
            w = sgd_step(w, grad_fn(w, batch), lr)
        pre_exchange.append(w)
        last_grads.append(grad_fn(w, batches[-1]))
    return easgd_sync_step(pre_exchange, last_grads, global_, lr, lam)


def easgd_async_exchange(
    local: ParameterVector,
    global_: ParameterVector,
    alpha: float,
) -> tuple[ParameterVector, ParameterVector]:
    """Elastic exchange between one worker and the center, on pre-exchange values."""
    _require_dim(global_, local.dim, "EASGD global")
    if not 0.0 < alpha <= 1.0:
        raise RejectedInputError(f"elastic alpha must be in (0, 1], got {alpha}")
    diff = local.values - global_.values
    return (
        ParameterVector.adopt(local.values - alpha * diff),
        ParameterVector.adopt(global_.values + alpha * diff),
    )


# ─── Learning-rate schedule ──────────────────────────────────────


@dataclass(frozen=True)
class LrSchedulerState:
    """phase is fixed, halving or stopped; transitions only move forward."""

    phase: str
    current_lr: float
    prev_cv_loss: Optional[float] = None
    schedule: str = "newbob"


def new_scheduler(lr: float, schedule: str = "newbob") -> LrSchedulerState:
    if schedule not in SCHEDULES:
        raise ConfigError(f"unknown schedule '{schedule}'. Valid: {', '.join(SCHEDULES)}", key="train.schedule")
    if not lr > 0:
        raise ConfigError(f"must be > 0, got {lr}", key="strategy.lr")
    return LrSchedulerState(phase="fixed", current_lr=float(lr), schedule=schedule)


def _relative_decrease(prev: float, cur: float) -> float:
    if prev <= 0:
        return 0.0
    return (prev - cur) / prev


def lr_schedule_update(
    state: LrSchedulerState,
    cv_loss: float,
    start_halving: float = 0.01,
    stop_threshold: float = 0.001,
) -> tuple[LrSchedulerState, bool]:
    """Advance the schedule with one epoch's CV loss.

    Returns:
        (new state, stop flag). The first call only records the baseline.
        A constant schedule records losses and never changes or stops.
    """
    if not np.isfinite(cv_loss):
        raise RejectedInputError(f"cv_loss must be finite, got {cv_loss}")
    if state.phase == "stopped":
        return state, True
    if state.prev_cv_loss is None or state.schedule == "constant":
        return replace(state, prev_cv_loss=float(cv_loss)), False

    rel = _relative_decrease(state.prev_cv_loss, cv_loss)
    if state.phase == "fixed":
        if rel >= start_halving:
            return replace(state, prev_cv_loss=float(cv_loss)), False
        logger.info("cv loss improved %.4f%%; start halving lr %g", 100 * rel, state.current_lr)
        return LrSchedulerState("halving", state.current_lr / 2, float(cv_loss), state.schedule), False

    if rel < stop_threshold:
        logger.info("cv loss improved %.4f%%; stop", 100 * rel)
        return LrSchedulerState("stopped", state.current_lr, float(cv_loss), state.schedule), True
    return LrSchedulerState("halving", state.current_lr / 2, float(cv_loss), state.schedule), False
