"""
Tests for cluster_sim.py: the discrete-event cluster simulation.

Tests cover:
- Event queue ordering and the parameter server protocol
- Timing model: barrier time, stragglers, exchange cost, speedup
- ASGD event trace and staleness under unequal worker speeds
- Strategy equivalences (single worker vs sequential SGD, BMUF with zero momentum vs BSP)
- Delayed-gradient server semantics, ASGD worker rounds, empty splits in a short block
- Convergence of every strategy on a convex problem
- Sync-period sensitivity of ASGD and BMUF
- Divergence reporting, determinism, CSV export
"""

import math
from dataclasses import replace

import numpy as np
import pytest

import sys
from pathlib import Path

SKILL_DIR = Path(__file__).parent.parent / "skills" / "parallel-sgd-lab" / "scripts"
sys.path.insert(0, str(SKILL_DIR))

import cluster_sim
from cluster_sim import (
    SERVER,
    EventQueue,
    ServerMessage,
    ServerState,
    SimConfig,
    barrier_sync,
    measure_speedup,
    read_curve_csv,
    reference_config,
    reference_seconds_per_epoch,
    run_simulation,
    server_loop,
    simulate,
    staleness_histogram,
    warm_start,
    write_curve_csv,
    write_trace_csv,
)
from data_shard import cv_split, make_synthetic, model_for_task, shard
from errors import ConfigError, ProtocolError, RejectedInputError
from numkit import Gradient, ParameterVector, RngState, backward, forward_loss, init_model, sgd_step
from speedup_model import SpeedupInputs, predict_speedup
from strategies import StrategyConfig, bsp_average


def make_problem(n=500, d=5, cond=10.0, noise=0.0, cv_fraction=0.2, seed=42, task="linreg"):
    data = make_synthetic(task, n=n, d=d, noise=noise, cond=cond, seed=seed)
    train, cv = cv_split(data, cv_fraction, seed)
    kind, dims = model_for_task(task, d)
    return init_model(kind, dims, RngState(seed, 0)), train, cv


def make_config(kind, n_workers, tau, lr, compute=1.0, cost=0.0, epochs=1, schedule="constant", **strategy):
    times = compute if isinstance(compute, tuple) else (compute,) * n_workers
    return SimConfig(
        StrategyConfig(kind, n_workers, tau, lr, **strategy),
        compute_time_per_minibatch=times,
        exchange_cost=cost,
        epochs_max=epochs,
        seed=42,
        schedule=schedule,
    )


# ─── Building blocks ─────────────────────────────────────────────


class TestEventQueue:
    def test_orders_by_time_worker_seq(self):
        q = EventQueue()
        q.push(2.0, 0, "push")
        q.push(1.0, 1, "push")
        q.push(1.0, 0, "ready")
        q.push(1.0, 0, "push")
        popped = [(e.time, e.worker, e.kind) for e in (q.pop(), q.pop(), q.pop(), q.pop())]
        assert popped == [(1.0, 0, "ready"), (1.0, 0, "push"), (1.0, 1, "push"), (2.0, 0, "push")]
        assert len(q) == 0

    def test_sequence_numbers_are_unique(self):
        q = EventQueue()
        seqs = [q.push(0.0, 0, "ready"), q.next_seq(), q.push(0.0, 0, "ready")]
        assert seqs == [0, 1, 2]


class TestServer:
    def test_staleness_counts_intervening_updates(self):
        state = ServerState(ParameterVector([0.0]), lr=0.5)
        grad = Gradient([1.0], sample_count=1)
        events = server_loop(
            state,
            [
                ServerMessage(0.0, 0, 0, "pull"),
                ServerMessage(0.0, 1, 1, "pull"),
                ServerMessage(1.0, 0, 2, "push", grad),
                ServerMessage(2.0, 1, 3, "push", grad),
            ],
        )
        assert [e.staleness_k for e in events] == [None, None, 0, 1]
        assert state.global_.values[0] == -1.0
        assert state.version == 2

    def test_inbox_is_sorted(self):
        state = ServerState(ParameterVector([0.0]), lr=1.0)
        events = server_loop(
            state,
            [ServerMessage(1.0, 0, 5, "push", Gradient([1.0], 1)), ServerMessage(0.0, 0, 9, "pull")],
        )
        assert [e.kind for e in events] == ["pull", "push"]

    def test_delayed_gradient_two_workers(self):
        w0 = ParameterVector([0.5, -0.2])
        lr = 0.1
        # both gradients are taken at w0; B's push lands first
        grad_a = Gradient(w0.values - np.array([1.0, 2.0]), sample_count=1)
        grad_b = Gradient(w0.values - np.array([-3.0, 0.5]), sample_count=1)
        state = ServerState(w0, lr=lr)
        events = server_loop(
            state,
            [
                ServerMessage(0.0, 0, 0, "pull"),
                ServerMessage(0.0, 1, 1, "pull"),
                ServerMessage(1.0, 1, 2, "push", grad_b),
                ServerMessage(2.0, 0, 3, "push", grad_a),
            ],
        )
        w1 = sgd_step(w0, grad_b, lr)
        w2 = sgd_step(w1, grad_a, lr)
        assert state.global_.bit_equal(w2)
        assert [e.staleness_k for e in events if e.kind == "push"] == [0, 1]

    def test_push_before_pull(self):
        state = ServerState(ParameterVector([0.0]), lr=1.0)
        with pytest.raises(ProtocolError):
            state.handle(ServerMessage(0.0, 0, 0, "push", Gradient([1.0], 1)))

    def test_dimension_mismatch(self):
        state = ServerState(ParameterVector([0.0]), lr=1.0)
        state.handle(ServerMessage(0.0, 0, 0, "pull"))
        with pytest.raises(ProtocolError):
            state.handle(ServerMessage(1.0, 0, 1, "push", Gradient([1.0, 2.0], 1)))

    def test_exchange_and_unknown_kind(self):
        state = ServerState(ParameterVector([0.0]), lr=1.0, alpha=0.5)
        reply = state.handle(ServerMessage(0.0, 0, 0, "exchange", ParameterVector([2.0])))
        assert reply.params.values[0] == 1.0
        assert state.global_.values[0] == 1.0
        with pytest.raises(ProtocolError):
            state.handle(ServerMessage(0.0, 0, 1, "gossip"))

    def test_barrier(self):
        assert barrier_sync([3.0, 5.0, 4.0], 0.5) == 5.5
        with pytest.raises(RejectedInputError):
            barrier_sync([], 0.5)


class TestSimConfig:
    def test_compute_times_per_worker(self):
        with pytest.raises(ConfigError) as exc:
            make_config("bsp", 4, 5, 0.1, compute=(1.0, 1.0))
        assert exc.value.key == "timing.compute_time"

    def test_rejects_bad_timing(self):
        with pytest.raises(ConfigError):
            make_config("bsp", 2, 5, 0.1, compute=(1.0, 0.0))
        with pytest.raises(ConfigError):
            make_config("bsp", 2, 5, 0.1, cost=-1.0)
        with pytest.raises(ConfigError):
            make_config("bsp", 2, 5, 0.1, epochs=0)

    def test_reference_config(self):
        config = make_config("easgd-async", 4, 5, 0.3, compute=(2.0, 1.0, 1.0, 1.0), cost=3.0, elastic_alpha=0.1)
        ref = reference_config(config)
        assert ref.strategy == StrategyConfig("bsp", 1, 1, 0.3)
        assert ref.compute_time_per_minibatch == (2.0,)
        assert ref.exchange_cost == 0.0


# ─── Timing ──────────────────────────────────────────────────────


class TestTiming:
    def test_bsp_without_communication_is_linear(self):
        model0, train, cv = make_problem()
        assert train.n == 400
        result = simulate(make_config("bsp", 4, 5, 0.05), model0, train, cv, minibatch=10)
        # 40 minibatches over 4 workers, two blocks of 5 steps
        assert result.seconds_per_epoch == 10.0
        ref = simulate(reference_config(make_config("bsp", 4, 5, 0.05)), model0, train, cv, minibatch=10)
        assert ref.seconds_per_epoch == 40.0
        assert measure_speedup(result, ref) == 4.0

    def test_straggler_sets_block_time(self):
        model0, train, cv = make_problem()
        config = make_config("bsp", 4, 5, 0.05, compute=(1.0, 1.0, 1.0, 10.0), cost=0.5)
        result = simulate(config, model0, train, cv, minibatch=10)
        assert result.simulated_wall_clock == 2 * (5 * 10.0 + 0.5)

    def test_reference_clock_without_running(self):
        assert reference_seconds_per_epoch(400, 10, 1.5) == 60.0
        assert reference_seconds_per_epoch(405, 10, 1.0) == 41.0

    @pytest.mark.parametrize("n_workers", [2, 4, 8])
    @pytest.mark.parametrize("tau", [5, 20, 80])
    def test_measured_speedup_matches_model(self, n_workers, tau):
        model0, train, cv = make_problem(n=3200, d=5)
        assert train.n == 2560
        compute, cost, mb = 1.0, 3.0, 4
        config = make_config("bsp", n_workers, tau, 0.02, compute=compute, cost=cost)
        result = simulate(config, model0, train, cv, minibatch=mb)
        ref = simulate(reference_config(config), model0, train, cv, minibatch=mb)
        assert ref.seconds_per_epoch == 640 * compute

        n_blocks = train.n // (n_workers * tau * mb)
        predicted = predict_speedup(SpeedupInputs(t_s=640 * compute, t_c=n_blocks * cost, n_workers=n_workers))
        assert measure_speedup(result, ref) == pytest.approx(predicted, rel=0.02)


# ─── ASGD trace ──────────────────────────────────────────────────


class TestAsgdTrace:
    @pytest.fixture
    def result(self):
        model0, train, cv = make_problem(n=44, d=3, cv_fraction=0.1)
        assert train.n == 40
        config = make_config("asgd", 2, 1, 0.01, compute=(1.0, 3.0), cost=0.0)
        return simulate(config, model0, train, cv, minibatch=1)

    def test_first_events(self, result):
        head = result.trace[:10]
        assert [e.kind for e in head] == [
            "pull", "pull", "compute-done", "push", "pull",
            "compute-done", "push", "pull", "compute-done", "push",
        ]
        assert [e.worker for e in head] == [0, 1, 0, 0, 0, 0, 0, 0, 0, 0]
        assert [e.time for e in head] == [0, 0, 1, 1, 1, 2, 2, 2, 3, 3]

    def test_push_staleness(self, result):
        pushes = sorted((e for e in result.trace if e.kind == "push"), key=lambda e: e.order_key)
        assert [e.staleness_k for e in pushes[:9]] == [0, 0, 0, 3, 1, 0, 0, 3, 1]

    def test_trace_is_totally_ordered(self, result):
        keys = [e.order_key for e in result.trace]
        assert keys == sorted(keys)
        assert len({e.seq for e in result.trace}) == len(result.trace)

    def test_every_sample_pushed_once(self, result):
        pushes = [e for e in result.trace if e.kind == "push"]
        assert len(pushes) == 40
        assert sum(staleness_histogram(result.trace).values()) == 40


# ─── Equivalences ────────────────────────────────────────────────


class TestEquivalences:
    @pytest.fixture
    def problem(self):
        return make_problem(n=300, d=4)

    def test_single_worker_strategies_agree(self, problem):
        model0, train, cv = problem
        results = [
            simulate(make_config(kind, 1, 1, 0.05, epochs=3), model0, train, cv, minibatch=8)
            for kind in ("bsp", "asgd", "bmuf")
        ]
        for other in results[1:]:
            assert other.final_global.bit_equal(results[0].final_global)
            assert other.learning_curve == results[0].learning_curve

    @pytest.mark.parametrize("kind", ["bsp", "asgd", "bmuf"])
    def test_single_worker_is_sequential_sgd(self, problem, kind):
        model0, train, cv = problem
        epochs, minibatch, lr = 4, 8, 0.05
        config = replace(make_config(kind, 1, 1, lr, epochs=epochs), record_global_history=True)
        result = simulate(config, model0, train, cv, minibatch=minibatch)

        params = model0.params
        trajectory = []
        for epoch in range(epochs):
            sharded = shard(train, 1, 1, minibatch, seed=42, epoch=epoch)
            for b in range(sharded.n_blocks):
                for batch in sharded.minibatches(b, 0):
                    params = sgd_step(params, backward(model0.with_params(params), batch), lr)
                    trajectory.append(params)

        assert len(trajectory) >= 100
        assert len(result.global_history) == len(trajectory)
        for (_, w), expected in zip(result.global_history, trajectory):
            assert w.bit_equal(expected)

    @pytest.mark.parametrize("trial", range(20))
    def test_bmuf_without_momentum_is_bsp(self, problem, trial):
        model0, train, cv = problem
        gen = RngState(2024, trial).generator()
        n_workers = int(gen.choice([2, 4, 8]))
        tau = int(gen.choice([1, 5, 20]))
        lr = float(gen.uniform(0.01, 0.1))
        minibatch = int(gen.choice([3, 5, 8]))
        histories = []
        for kind, extra in (("bsp", {}), ("bmuf", {"block_momentum": 0.0, "block_lr": 1.0})):
            config = make_config(kind, n_workers, tau, lr, epochs=2, **extra)
            config = replace(config, record_global_history=True)
            histories.append(simulate(config, model0, train, cv, minibatch=minibatch).global_history)
        bsp, bmuf = histories
        assert len(bsp) == len(bmuf) > 0
        for (t_a, w_a), (t_b, w_b) in zip(bsp, bmuf):
            assert t_a == t_b
            assert w_a.bit_equal(w_b)

    def test_deterministic(self, problem):
        model0, train, cv = problem
        config = make_config("easgd-async", 3, 4, 0.05, compute=(1.0, 1.5, 2.0), cost=0.3, epochs=2, elastic_alpha=0.2)
        a = simulate(config, model0, train, cv, minibatch=5)
        b = simulate(config, model0, train, cv, minibatch=5)
        assert a.trace == b.trace
        assert a.learning_curve == b.learning_curve
        assert a.final_global.bit_equal(b.final_global)


# ─── Trace contents ──────────────────────────────────────────────


class TestSyncTrace:
    def test_bmuf_commits_each_block(self):
        model0, train, cv = make_problem()
        result = simulate(make_config("bmuf", 4, 5, 0.05), model0, train, cv, minibatch=10)
        commits = [e for e in result.trace if e.kind == "block-commit"]
        barriers = [e for e in result.trace if e.kind == "barrier"]
        assert len(commits) == len(barriers) == 2
        assert all(e.worker == SERVER for e in commits)
        assert sum(e.kind == "compute-done" for e in result.trace) == 40

    def test_easgd_async_exchanges(self):
        model0, train, cv = make_problem()
        config = make_config("easgd-async", 4, 5, 0.05, elastic_alpha=0.1)
        result = simulate(config, model0, train, cv, minibatch=10)
        exchanges = [e for e in result.trace if e.kind == "exchange"]
        # one exchange per (block, split) chunk
        assert len(exchanges) == 8
        assert {e.worker for e in exchanges} == {0, 1, 2, 3}

    def test_asgd_workers_run_asgd_rounds(self, monkeypatch):
        calls = []
        original = cluster_sim.asgd_worker_round

        def counting(*args, **kwargs):
            calls.append(args[2])
            return original(*args, **kwargs)

        monkeypatch.setattr(cluster_sim, "asgd_worker_round", counting)
        model0, train, cv = make_problem()
        result = simulate(make_config("asgd", 4, 5, 0.05), model0, train, cv, minibatch=10)
        pushes = [e for e in result.trace if e.kind == "push"]
        assert len(calls) == len(pushes) == 8
        assert set(calls) == {5}

    def test_empty_splits_sit_out_the_average(self):
        model0, train, cv = make_problem(n=52)
        assert train.n == 42
        lr = 0.05
        config = replace(make_config("bsp", 4, 1, lr), record_global_history=True)
        result = simulate(config, model0, train, cv, minibatch=10)

        # the final block holds 2 samples: splits of 1, 1, 0, 0
        sharded = shard(train, 4, 1, 10, seed=42)
        assert [sharded.split(1, i).size for i in range(4)] == [1, 1, 0, 0]
        before = result.global_history[0][1]
        stepped = [
            sgd_step(before, backward(model0.with_params(before), sharded.minibatches(1, i)[0]), lr)
            for i in (0, 1)
        ]
        assert result.final_global.bit_equal(bsp_average(stepped))


# ─── Convergence ─────────────────────────────────────────────────


class TestConvergence:
    @pytest.mark.parametrize(
        "kind,tau,extra",
        [
            ("bsp", 5, {}),
            ("asgd", 1, {}),
            ("bmuf", 80, {"c_constant": 1.0}),
            ("easgd-sync", 64, {"elastic_alpha": 0.1}),
            ("easgd-async", 64, {"elastic_alpha": 0.1}),
        ],
    )
    def test_reaches_the_optimum(self, kind, tau, extra):
        model0, train, cv = make_problem(n=2000, d=20, cond=10.0, cv_fraction=0.1)
        config = make_config(kind, 4, tau, 0.1, epochs=60, **extra)
        result = simulate(config, model0, train, cv, minibatch=10)
        assert not result.diverged
        assert result.initial_train_loss == forward_loss(model0, train.full_batch())
        assert result.learning_curve[-1].train_loss <= 1e-3 * result.initial_train_loss


class TestSyncPeriodSensitivity:
    @pytest.fixture(scope="class")
    def problem(self):
        return make_problem(n=4000, d=20, cond=100.0, noise=1.0, cv_fraction=0.1)

    def _final_cv(self, problem, kind, tau):
        model0, train, cv = problem
        config = make_config(kind, 4, tau, 0.2, epochs=15, **({"c_constant": 1.0} if kind == "bmuf" else {}))
        return simulate(config, model0, train, cv, minibatch=20).final_cv_loss

    def test_asgd_degrades_with_tau(self, problem):
        losses = [self._final_cv(problem, "asgd", tau) for tau in (1, 5, 20, 80)]
        assert math.isfinite(losses[0])
        assert all(a <= b for a, b in zip(losses, losses[1:]))

    def test_bmuf_is_insensitive_to_tau(self, problem):
        losses = [self._final_cv(problem, "bmuf", tau) for tau in (1, 5, 20, 80)]
        assert all(math.isfinite(v) for v in losses)
        assert (max(losses) - min(losses)) / min(losses) < 0.05


# ─── Divergence / validation ─────────────────────────────────────


class TestDivergence:
    def test_reported_as_status(self):
        model0, train, cv = make_problem()
        result = simulate(make_config("bsp", 2, 5, 50.0, epochs=5), model0, train, cv, minibatch=10)
        assert result.diverged
        assert result.final_cv_loss == math.inf
        assert result.message

    def test_shard_must_match_config(self):
        model0, train, cv = make_problem()
        sharded = shard(train, 2, 5, 10, seed=42)
        with pytest.raises(RejectedInputError):
            run_simulation(make_config("bsp", 4, 5, 0.1), model0, sharded, cv=cv)

    def test_status_when_schedule_runs_out(self):
        model0, train, cv = make_problem()
        result = simulate(make_config("bsp", 2, 5, 0.05, epochs=3), model0, train, cv, minibatch=10)
        assert result.status == "max-epochs"
        assert result.epochs_completed == 3
        assert [p.epoch for p in result.learning_curve] == [1, 2, 3]


# ─── Warm start / export ─────────────────────────────────────────


class TestWarmStartAndExport:
    def test_warm_start_improves_loss(self):
        model0, train, _ = make_problem()
        warmed = warm_start(model0, train, minibatch=10, lr=0.05, seed=42)
        assert forward_loss(warmed, train.full_batch()) < forward_loss(model0, train.full_batch())
        again = warm_start(model0, train, minibatch=10, lr=0.05, seed=42)
        assert warmed.params.bit_equal(again.params)

    def test_curve_csv(self, tmp_path):
        model0, train, cv = make_problem()
        result = simulate(make_config("bsp", 2, 5, 0.05, epochs=2), model0, train, cv, minibatch=10)
        path = write_curve_csv(result.learning_curve, tmp_path / "curve.csv")
        assert path.read_text().splitlines()[0] == "epoch,train_loss,cv_loss,lr,sim_time"
        assert tuple(read_curve_csv(path)) == result.learning_curve

    def test_trace_csv(self, tmp_path):
        model0, train, cv = make_problem(n=44, d=3, cv_fraction=0.1)
        result = simulate(make_config("asgd", 2, 1, 0.01, compute=(1.0, 3.0)), model0, train, cv, minibatch=1)
        lines = write_trace_csv(result.trace, tmp_path / "trace.csv").read_text().splitlines()
        assert lines[0] == "time,worker,kind,seq,staleness"
        assert len(lines) == len(result.trace) + 1
        assert lines[1].split(",")[2] == "pull"
        assert lines[1].endswith(",")

    def test_read_curve_rejects_other_csv(self, tmp_path):
        path = tmp_path / "x.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(RejectedInputError):
            read_curve_csv(path)
