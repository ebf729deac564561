#!/usr/bin/env python3
"""
Deterministic discrete-event simulation of a data-parallel SGD cluster.

N simulated workers (plus a parameter server for the asynchronous
strategies) run the update rules from strategies.py under a timing model:
every minibatch on worker i costs compute_time_per_minibatch[i] simulated
seconds and every synchronization costs exchange_cost seconds. Asynchrony
comes only from that timing model, so two runs with the same config are
bitwise identical, traces included.

Event order is the total order (time, worker, seq). Ties on time go to the
lower worker id; the server and the synchronous coordinator use worker id
SERVER (-1).

Usage:
    from cluster_sim import SimConfig, run_simulation, warm_start

    config = SimConfig(strategy, compute_time_per_minibatch=(1.0,) * 4, exchange_cost=0.5,
                       epochs_max=10, seed=42)
    result = run_simulation(config, model0, sharded, cv=cv)
    print(result.status, result.learning_curve[-1])
"""

import csv
import heapq
import itertools
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

from data_shard import Dataset, ShardedDataset, epoch_shard, shard
from errors import ConfigError, NumericError, ProtocolError, RejectedInputError
from numkit import Gradient, Model, ParameterVector, backward, forward_loss, loss_and_gradient, sgd_step
from strategies import (
    SCHEDULES,
    BmufState,
    ResolvedStrategy,
    StrategyConfig,
    asgd_server_apply,
    asgd_worker_round,
    bmuf_block_update,
    bsp_average,
    easgd_async_exchange,
    easgd_sync_round,
    local_sgd_round,
    lr_schedule_update,
    new_scheduler,
    resolve_strategy,
)

logger = logging.getLogger(__name__)

SERVER = -1
EVENT_KINDS = ("compute-done", "push", "pull", "barrier", "block-commit", "exchange")
DIVERGENCE_FACTOR = 1e3

STATUS_CONVERGED = "converged"
STATUS_MAX_EPOCHS = "max-epochs"
STATUS_DIVERGED = "diverged"

CURVE_HEADER = ["epoch", "train_loss", "cv_loss", "lr", "sim_time"]
TRACE_HEADER = ["time", "worker", "kind", "seq", "staleness"]


# ─── Types ───────────────────────────────────────────────────────


@dataclass(frozen=True)
class SimConfig:
    strategy: StrategyConfig
    compute_time_per_minibatch: tuple
    exchange_cost: float
    epochs_max: int
    seed: int
    schedule: str = "newbob"
    start_halving: float = 0.01
    stop_threshold: float = 0.001
    record_global_history: bool = False

    def __post_init__(self):
        times = tuple(float(t) for t in self.compute_time_per_minibatch)
        object.__setattr__(self, "compute_time_per_minibatch", times)
        if len(times) != self.strategy.n_workers:
            raise ConfigError(
                f"{len(times)} compute times for {self.strategy.n_workers} workers",
                key="timing.compute_time",
            )
        if any(not t > 0 for t in times):
            raise ConfigError(f"compute times must be > 0, got {times}", key="timing.compute_time")
        if self.exchange_cost < 0:
            raise ConfigError(f"must be >= 0, got {self.exchange_cost}", key="timing.exchange_cost")
        if self.epochs_max < 1:
            raise ConfigError(f"must be >= 1, got {self.epochs_max}", key="train.epochs_max")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule '{self.schedule}'", key="train.schedule")

    @property
    def n_workers(self) -> int:
        return self.strategy.n_workers

    @classmethod
    def uniform(cls, strategy: StrategyConfig, compute_time: float, **kwargs) -> "SimConfig":
        """Every worker at the same per-minibatch speed."""
        return cls(strategy, (compute_time,) * strategy.n_workers, **kwargs)


@dataclass(frozen=True)
class SimEvent:
    time: float
    worker: int
    kind: str
    seq: int
    staleness_k: Optional[int] = None

    @property
    def order_key(self) -> tuple:
        return (self.time, self.worker, self.seq)


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    train_loss: float
    cv_loss: float
    lr: float
    sim_time: float


@dataclass(frozen=True)
class RunResult:
    status: str
    final_global: ParameterVector
    learning_curve: tuple
    trace: tuple
    simulated_wall_clock: float
    epochs_completed: int
    initial_train_loss: float
    initial_cv_loss: float
    speedup_vs_reference: Optional[float] = None
    global_history: Optional[tuple] = None
    message: str = ""

    @property
    def diverged(self) -> bool:
        return self.status == STATUS_DIVERGED

    @property
    def final_cv_loss(self) -> float:
        """Last epoch's CV loss; inf for a diverged run."""
        if self.diverged or not self.learning_curve:
            return math.inf
        return self.learning_curve[-1].cv_loss

    @property
    def seconds_per_epoch(self) -> float:
        if self.epochs_completed == 0:
            return 0.0
        return self.learning_curve[-1].sim_time / self.epochs_completed


# ─── Event queue ─────────────────────────────────────────────────


@dataclass(order=True, frozen=True)
class QueuedEvent:
    time: float
    worker: int
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class EventQueue:
    """Min-heap of pending events under (time, worker, seq).

    The seq counter is shared with trace logging, so every event in a run
    has a distinct sequence number.
    """

    def __init__(self):
        self._heap: list[QueuedEvent] = []
        self._seq = itertools.count()

    def next_seq(self) -> int:
        return next(self._seq)

    def push(self, time: float, worker: int, kind: str, payload: Any = None) -> int:
        seq = self.next_seq()
        heapq.heappush(self._heap, QueuedEvent(time, worker, seq, kind, payload))
        return seq

    def pop(self) -> QueuedEvent:
        return heapq.heappop(self._heap)

    def __len__(self) -> int:
        return len(self._heap)


# ─── Parameter server ────────────────────────────────────────────


@dataclass(frozen=True)
class ServerMessage:
    time: float
    worker: int
    seq: int
    kind: str  # pull | push | exchange
    payload: Union[Gradient, ParameterVector, None] = None


@dataclass(frozen=True)
class ServerReply:
    params: ParameterVector
    staleness_k: Optional[int] = None


class ServerState:
    """Global model held by the parameter server.

    version counts applied updates; staleness of a push is the number of
    updates applied between that worker's last pull and the push.
    """

    def __init__(self, global_: ParameterVector, lr: float, alpha: Optional[float] = None):
        self.global_ = global_
        self.lr = lr
        self.alpha = alpha
        self.version = 0
        self._pulled: dict[int, int] = {}

    def _check_dim(self, message: ServerMessage) -> None:
        if message.payload is None or message.payload.dim != self.global_.dim:
            got = None if message.payload is None else message.payload.dim
            raise ProtocolError(
                f"{message.kind} from worker {message.worker} carries dim {got}, server holds {self.global_.dim}"
            )

    def handle(self, message: ServerMessage) -> ServerReply:
        if message.kind == "pull":
            self._pulled[message.worker] = self.version
            return ServerReply(self.global_)

        if message.kind == "push":
            self._check_dim(message)
            if message.worker not in self._pulled:
                raise ProtocolError(f"push from worker {message.worker} before any pull")
            staleness = self.version - self._pulled[message.worker]
            self.global_ = asgd_server_apply(self.global_, message.payload, self.lr)
            self.version += 1
            return ServerReply(self.global_, staleness_k=staleness)

        if message.kind == "exchange":
            self._check_dim(message)
            if self.alpha is None:
                raise ProtocolError("exchange received by a server without an elastic alpha")
            new_local, self.global_ = easgd_async_exchange(message.payload, self.global_, self.alpha)
            self.version += 1
            return ServerReply(new_local)

        raise ProtocolError(f"unknown message kind '{message.kind}'")


def server_loop(state: ServerState, inbox: Sequence[ServerMessage]) -> list[SimEvent]:
    """Apply a batch of messages in (time, worker, seq) order.

    Returns one event per message; pushes carry their staleness.
    """
    events = []
    for message in sorted(inbox, key=lambda m: (m.time, m.worker, m.seq)):
        reply = state.handle(message)
        events.append(SimEvent(message.time, message.worker, message.kind, message.seq, reply.staleness_k))
    return events


def barrier_sync(arrivals: Sequence[float], exchange_cost: float) -> float:
    """Time at which a synchronous round completes: last arrival plus exchange cost."""
    if not arrivals:
        raise RejectedInputError("barrier needs at least one worker")
    return max(arrivals) + exchange_cost


# ─── Simulation ──────────────────────────────────────────────────


class _Diverged(Exception):
    pass


class _Simulation:
    def __init__(
        self,
        config: SimConfig,
        resolved: ResolvedStrategy,
        model0: Model,
        sharded: ShardedDataset,
        cv: Dataset,
    ):
        self.config = config
        self.resolved = resolved
        self.model0 = model0
        self.sharded = sharded
        self.train = sharded.dataset
        self.cv = cv
        self.queue = EventQueue()
        self.trace: list[SimEvent] = []
        self.history: list[tuple[float, ParameterVector]] = []
        self.clock = 0.0
        self.limit = math.inf
        self.global_ = model0.params
        n = config.n_workers
        self.locals = [model0.params] * n
        self.bmuf = BmufState.start(model0.params)
        self.server = ServerState(model0.params, config.strategy.lr, resolved.elastic_alpha)

    # helpers

    def _log(self, time: float, worker: int, kind: str, staleness: Optional[int] = None) -> None:
        self.trace.append(SimEvent(time, worker, kind, self.queue.next_seq(), staleness))

    def _record(self, time: float) -> None:
        if self.config.record_global_history:
            self.history.append((time, self.global_))

    def _grad(self, params: ParameterVector, batch) -> Gradient:
        loss, grad = loss_and_gradient(self.model0.with_params(params), batch)
        if loss > self.limit:
            raise _Diverged(f"minibatch loss {loss:.6g} exceeds {self.limit:.6g}")
        return grad

    def _evaluate(self, params: ParameterVector) -> tuple[float, float]:
        model = self.model0.with_params(params)
        return forward_loss(model, self.train.full_batch()), forward_loss(model, self.cv.full_batch())

    # synchronous strategies

    def _sync_epoch(self, sharded: ShardedDataset, lr: float) -> None:
        kind = self.resolved.kind
        times = self.config.compute_time_per_minibatch
        tau = self.config.strategy.sync_period
        for b in range(sharded.n_blocks):
            start = self.clock
            batch_lists = [sharded.minibatches(b, i) for i in range(self.config.n_workers)]
            arrivals = []
            for i, batches in enumerate(batch_lists):
                for j in range(len(batches)):
                    self._log(start + (j + 1) * times[i], i, "compute-done")
                arrivals.append(start + len(batches) * times[i])
            done = barrier_sync(arrivals, self.config.exchange_cost)

            if kind == "easgd-sync":
                self.locals, self.global_ = easgd_sync_round(
                    self.locals, batch_lists, self.global_, lr, self.resolved.elastic_lambda, self._grad
                )
            else:
                rounds = [local_sgd_round(self.global_, batches, tau, lr, self._grad) for batches in batch_lists]
                # workers left without samples by a short final block sit the round out
                locals_ = [r.new_local for r in rounds if r.steps > 0]
                if kind == "bsp":
                    self.global_ = bsp_average(locals_)
                else:
                    self.bmuf = bmuf_block_update(
                        self.bmuf, locals_, self.resolved.block_momentum, self.config.strategy.block_lr
                    )
                    self.global_ = self.bmuf.global_

            self._log(done, SERVER, "barrier")
            if kind == "bmuf":
                self._log(done, SERVER, "block-commit")
            elif kind == "easgd-sync":
                self._log(done, SERVER, "exchange")
            self.clock = done
            self._record(done)

    # asynchronous strategies

    def _async_epoch(self, sharded: ShardedDataset, lr: float) -> None:
        asgd = self.resolved.kind == "asgd"
        times = self.config.compute_time_per_minibatch
        tau = self.config.strategy.sync_period
        cost = self.config.exchange_cost
        self.server.lr = lr

        chunks = deque(c for c in sharded.chunks() if sharded.split(*c).size > 0)
        start = self.clock
        finish = [start] * self.config.n_workers
        for i in range(self.config.n_workers):
            self.queue.push(start, i, "ready")

        while len(self.queue):
            ev = self.queue.pop()
            i = ev.worker
            if ev.kind == "ready":
                if not chunks:
                    finish[i] = ev.time
                    continue
                batches = sharded.minibatches(*chunks.popleft())
                if asgd:
                    seq = self.queue.next_seq()
                    base = self.server.handle(ServerMessage(ev.time, i, seq, "pull")).params
                    self.trace.append(SimEvent(ev.time, i, "pull", seq))
                else:
                    base = self.locals[i]
                worker_round = asgd_worker_round if asgd else local_sgd_round
                rnd = worker_round(base, batches, tau, lr, self._grad)
                for j in range(rnd.steps):
                    self._log(ev.time + (j + 1) * times[i], i, "compute-done")
                self.queue.push(ev.time + rnd.steps * times[i] + cost, i, "push", rnd)
                continue

            rnd = ev.payload
            seq = self.queue.next_seq()
            if asgd:
                reply = self.server.handle(ServerMessage(ev.time, i, seq, "push", rnd.gradient))
                self.trace.append(SimEvent(ev.time, i, "push", seq, reply.staleness_k))
            else:
                reply = self.server.handle(ServerMessage(ev.time, i, seq, "exchange", rnd.new_local))
                self.locals[i] = reply.params
                self.trace.append(SimEvent(ev.time, i, "exchange", seq))
            self.global_ = self.server.global_
            self._record(ev.time)
            self.queue.push(ev.time, i, "ready")

        self.clock = max(finish)

    # driver

    def run(self) -> RunResult:
        initial_train, initial_cv = self._evaluate(self.global_)
        if initial_train > 0:
            self.limit = DIVERGENCE_FACTOR * initial_train
        sched = new_scheduler(self.config.strategy.lr, self.config.schedule)
        curve: list[CurvePoint] = []
        status = STATUS_MAX_EPOCHS
        message = ""

        for epoch in range(1, self.config.epochs_max + 1):
            sharded = epoch_shard(self.sharded, epoch - 1)
            lr = sched.current_lr
            try:
                if self.resolved.is_async:
                    self._async_epoch(sharded, lr)
                else:
                    self._sync_epoch(sharded, lr)
                train_loss, cv_loss = self._evaluate(self.global_)
                if train_loss > self.limit:
                    raise _Diverged(f"train loss {train_loss:.6g} exceeds {self.limit:.6g}")
            except (_Diverged, NumericError) as e:
                status = STATUS_DIVERGED
                message = f"epoch {epoch}: {e}"
                logger.warning("run diverged in %s", message)
                break

            curve.append(CurvePoint(epoch, train_loss, cv_loss, lr, self.clock))
            logger.info("epoch %d train=%.6g cv=%.6g lr=%g t=%.6g", epoch, train_loss, cv_loss, lr, self.clock)
            sched, stop = lr_schedule_update(
                sched, cv_loss, self.config.start_halving, self.config.stop_threshold
            )
            if stop:
                status = STATUS_CONVERGED
                break

        trace = tuple(sorted(self.trace, key=lambda e: e.order_key))
        return RunResult(
            status=status,
            final_global=self.global_,
            learning_curve=tuple(curve),
            trace=trace,
            simulated_wall_clock=self.clock,
            epochs_completed=len(curve),
            initial_train_loss=initial_train,
            initial_cv_loss=initial_cv,
            global_history=tuple(self.history) if self.config.record_global_history else None,
            message=message,
        )


def run_simulation(
    config: SimConfig,
    model0: Model,
    dataset: ShardedDataset,
    cv: Optional[Dataset] = None,
    reference: Optional[RunResult] = None,
) -> RunResult:
    """Run the configured strategy to scheduler stop, epochs_max, or divergence.

    Args:
        config: strategy, timing model and schedule
        model0: shared warm-start model
        dataset: training set sharded for config.n_workers and the sync period
        cv: held-out set driving the schedule (the training set if None)
        reference: single-worker run; fills speedup_vs_reference

    Returns:
        RunResult. Divergence is reported through status, never raised.
    """
    resolved = resolve_strategy(config.strategy)
    if dataset.n_workers != config.n_workers or dataset.sync_period != config.strategy.sync_period:
        raise RejectedInputError(
            f"dataset sharded for N={dataset.n_workers}, tau={dataset.sync_period}; "
            f"config wants N={config.n_workers}, tau={config.strategy.sync_period}"
        )
    if model0.input_dim != dataset.dataset.d:
        raise RejectedInputError(f"model input dim {model0.input_dim} != dataset dim {dataset.dataset.d}")

    sim = _Simulation(config, resolved, model0, dataset, cv if cv is not None else dataset.dataset)
    result = sim.run()
    if reference is not None and result.epochs_completed:
        result = replace(result, speedup_vs_reference=measure_speedup(result, reference))
    return result


def simulate(
    config: SimConfig,
    model0: Model,
    train: Dataset,
    cv: Optional[Dataset],
    minibatch: int,
    reshuffle: bool = True,
    reference: Optional[RunResult] = None,
) -> RunResult:
    """Shard `train` for the config, then run_simulation."""
    sharded = shard(
        train,
        config.n_workers,
        config.strategy.sync_period,
        minibatch,
        config.seed,
        reshuffle=reshuffle,
    )
    return run_simulation(config, model0, sharded, cv=cv, reference=reference)


def reference_config(config: SimConfig) -> SimConfig:
    """Single-worker sequential SGD at worker 0's speed with free communication."""
    strategy = StrategyConfig(kind="bsp", n_workers=1, sync_period=1, lr=config.strategy.lr)
    return replace(
        config,
        strategy=strategy,
        compute_time_per_minibatch=(config.compute_time_per_minibatch[0],),
        exchange_cost=0.0,
        record_global_history=False,
    )


def reference_seconds_per_epoch(n_train: int, minibatch: int, compute_time: float) -> float:
    """Epoch time of the single-worker reference without running it.

    The reference has no communication, so its clock is one compute_time
    per minibatch regardless of what it learns.
    """
    return math.ceil(n_train / minibatch) * compute_time


def measure_speedup(result: RunResult, reference_single_worker: RunResult) -> float:
    """Reference seconds per epoch divided by parallel seconds per epoch."""
    parallel = result.seconds_per_epoch
    if not parallel > 0:
        raise RejectedInputError("parallel run has zero simulated time per epoch")
    return reference_single_worker.seconds_per_epoch / parallel


def warm_start(
    model: Model,
    train: Dataset,
    minibatch: int,
    lr: float,
    seed: int,
    epochs: int = 1,
) -> Model:
    """Shared initial model from `epochs` epochs of single-worker minibatch SGD."""
    params = model.params
    for epoch in range(epochs):
        sharded = shard(train, 1, 1, minibatch, seed, epoch=epoch)
        for b in range(sharded.n_blocks):
            for batch in sharded.minibatches(b, 0):
                params = sgd_step(params, backward(model.with_params(params), batch), lr)
    logger.debug("warm start: %d epoch(s) over %d samples", epochs, train.n)
    return model.with_params(params)


def staleness_histogram(trace: Sequence[SimEvent]) -> dict[int, int]:
    counts = Counter(e.staleness_k for e in trace if e.staleness_k is not None)
    return dict(sorted(counts.items()))


# ─── Export ──────────────────────────────────────────────────────


def write_curve_csv(curve: Sequence[CurvePoint], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
        for p in curve:
            writer.writerow([p.epoch, repr(p.train_loss), repr(p.cv_loss), repr(p.lr), repr(p.sim_time)])
    return path


def read_curve_csv(path: Union[str, Path]) -> list[CurvePoint]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CURVE_HEADER:
            raise RejectedInputError(f"{path} is not a learning-curve CSV (header {reader.fieldnames})")
        return [
            CurvePoint(int(r["epoch"]), float(r["train_loss"]), float(r["cv_loss"]), float(r["lr"]), float(r["sim_time"]))
            for r in reader
        ]


def write_trace_csv(trace: Sequence[SimEvent], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for e in trace:
            writer.writerow([repr(e.time), e.worker, e.kind, e.seq, "" if e.staleness_k is None else e.staleness_k])
    return path
