#!/usr/bin/env python3
"""
Synthetic datasets and block/split sharding for data-parallel SGD.

The training set is cut into blocks of N·τ·minibatch samples; each block
is split contiguously into N worker splits of τ minibatches. One block is
exactly one synchronization round of a synchronous strategy.

Tasks:
- linreg       linear targets X·w* plus Gaussian noise
- logreg       binary labels from the sign of X·w* plus noise
- mlp-teacher  class ids from the argmax of a fixed random ReLU network

Usage:
    from data_shard import make_synthetic, cv_split, shard

    data = make_synthetic("linreg", n=2000, d=20, noise=0.0, cond=10.0, seed=42)
    train, cv = cv_split(data, fraction=0.1, seed=42)
    sharded = shard(train, n_workers=4, sync_period=5, minibatch=10, seed=42)
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from errors import NumericError, RejectedInputError
from numkit import (
    CV_STREAM,
    DATA_STREAM,
    SHUFFLE_STREAM,
    TEACHER_STREAM,
    MinibatchView,
    RngState,
    init_model,
    model_outputs,
    ordered_matmul,
    sequential_sum,
)

logger = logging.getLogger(__name__)

TASKS = ("linreg", "logreg", "mlp-teacher")
TASK_CODES = {task: code for code, task in enumerate(TASKS)}

# Hidden width of the fixed teacher network behind mlp-teacher.
TEACHER_HIDDEN = 16


# ─── Dataset ─────────────────────────────────────────────────────


@dataclass(frozen=True)
class GeneratorSpec:
    task: str
    n: int
    d: int
    noise: float
    cond: float
    seed: int
    n_classes: int = 2


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    targets: np.ndarray
    task: str
    generator_spec: Optional[GeneratorSpec] = None

    def __post_init__(self):
        if self.task not in TASK_CODES:
            raise RejectedInputError(f"unknown task '{self.task}'. Valid: {', '.join(TASKS)}")
        features = np.array(self.features, dtype=np.float64)
        targets = np.array(self.targets, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0 or features.shape[1] == 0:
            raise RejectedInputError(f"features must be a nonempty (n, d) matrix, got {features.shape}")
        if targets.shape != (features.shape[0],):
            raise RejectedInputError(f"targets shape {targets.shape} does not match {features.shape[0]} rows")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
            raise RejectedInputError("dataset contains NaN or Inf")
        features.flags.writeable = False
        targets.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.targets[indices], self.task, self.generator_spec)

    def batch(self, indices: np.ndarray) -> MinibatchView:
        return MinibatchView(self.features[indices], self.targets[indices])

    def full_batch(self) -> MinibatchView:
        return MinibatchView(self.features, self.targets)

    def save(self, path: Union[str, Path]) -> Path:
        """Header (u64 n, u64 d, u32 task), then features and targets as f64 LE."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = struct.pack("<QQI", self.n, self.d, TASK_CODES[self.task])
        body = self.features.astype("<f8").tobytes() + self.targets.astype("<f8").tobytes()
        path.write_bytes(header + body)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Dataset":
        blob = Path(path).read_bytes()
        header_size = struct.calcsize("<QQI")
        try:
            n, d, code = struct.unpack_from("<QQI", blob, 0)
        except struct.error as e:
            raise RejectedInputError(f"truncated dataset header in {path}: {e}") from e
        if code >= len(TASKS):
            raise RejectedInputError(f"unknown task code {code} in {path}")
        expected = header_size + 8 * (n * d + n)
        if len(blob) != expected:
            raise RejectedInputError(f"{path} holds {len(blob)} bytes, header promises {expected}")
        features = np.frombuffer(blob, dtype="<f8", count=n * d, offset=header_size).reshape(n, d)
        targets = np.frombuffer(blob, dtype="<f8", count=n, offset=header_size + 8 * n * d)
        return cls(features, targets, TASKS[code])


def model_for_task(task: str, d: int, n_classes: int = 2, hidden: tuple = (TEACHER_HIDDEN,)) -> tuple[str, tuple]:
    """Model kind and layer dims that fit a task."""
    if task == "linreg":
        return "linear-regression", (d, 1)
    if task == "logreg":
        return "logistic-regression", (d, 1)
    return "mlp", (d, *hidden, n_classes)


def orthonormal_columns(a: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt, each column projected twice, on ordered dot products."""
    q = np.array(a, dtype=np.float64)
    for j in range(q.shape[1]):
        for _ in range(2):
            for i in range(j):
                q[:, j] -= sequential_sum(q[:, i] * q[:, j]) * q[:, i]
        norm = np.sqrt(sequential_sum(q[:, j] * q[:, j]))
        if norm == 0.0:
            raise NumericError(f"column {j} is linearly dependent on the ones before it")
        q[:, j] /= norm
    return q


def _conditioned_features(gen: np.random.Generator, n: int, d: int, cond: float) -> np.ndarray:
    """Gaussian matrix reshaped so its singular values run from √n down to √n/cond.

    The left and right singular bases are orthonormalized slices of the
    same draw: its first r columns and its first r rows.
    """
    raw = gen.standard_normal((n, d))
    rank = min(n, d)
    left = orthonormal_columns(raw[:, :rank])
    right = orthonormal_columns(raw[:rank, :].T)
    spectrum = np.sqrt(n) * np.geomspace(1.0, 1.0 / cond, rank)
    return ordered_matmul(left * spectrum, right.T)


def make_synthetic(
    task: str,
    n: int,
    d: int,
    noise: float,
    cond: float,
    seed: int,
    n_classes: int = 4,
) -> Dataset:
    """Generate a reproducible synthetic task.

    Args:
        task: linreg, logreg or mlp-teacher
        n, d: sample count and feature dimension
        noise: standard deviation of the additive Gaussian noise
        cond: ratio of the largest to smallest singular value of X
        seed: root seed; generation uses fixed streams derived from it
        n_classes: classes for mlp-teacher (ignored otherwise)

    Raises:
        RejectedInputError: invalid sizes or ranges.
    """
    if task not in TASK_CODES:
        raise RejectedInputError(f"unknown task '{task}'. Valid: {', '.join(TASKS)}")
    if n < 1 or d < 1:
        raise RejectedInputError(f"n and d must be >= 1, got n={n}, d={d}")
    if noise < 0:
        raise RejectedInputError(f"noise must be >= 0, got {noise}")
    if cond < 1:
        raise RejectedInputError(f"cond must be >= 1, got {cond}")
    if task == "mlp-teacher" and n_classes < 2:
        raise RejectedInputError(f"mlp-teacher needs n_classes >= 2, got {n_classes}")

    gen = RngState(seed, DATA_STREAM).generator()
    features = _conditioned_features(gen, n, d, cond)
    teacher_gen = RngState(seed, TEACHER_STREAM).generator()
    eps = noise * gen.standard_normal(n) if noise > 0 else np.zeros(n)

    if task == "linreg":
        w_star = teacher_gen.standard_normal(d)
        targets = ordered_matmul(features, w_star) + eps
    elif task == "logreg":
        w_star = teacher_gen.standard_normal(d)
        targets = (ordered_matmul(features, w_star) + eps > 0).astype(np.float64)
    else:
        kind, dims = model_for_task(task, d, n_classes)
        teacher = init_model(kind, dims, RngState(seed, TEACHER_STREAM))
        logits = model_outputs(teacher, features)
        if noise > 0:
            logits = logits + noise * gen.standard_normal(logits.shape)
        targets = np.argmax(logits, axis=1).astype(np.float64)

    spec = GeneratorSpec(task, n, d, float(noise), float(cond), int(seed), n_classes if task == "mlp-teacher" else 2)
    logger.debug("generated %s n=%d d=%d noise=%g cond=%g", task, n, d, noise, cond)
    return Dataset(features, targets, task, spec)


def regenerate(spec: GeneratorSpec) -> Dataset:
    return make_synthetic(spec.task, spec.n, spec.d, spec.noise, spec.cond, spec.seed, spec.n_classes)


# ─── CV split ────────────────────────────────────────────────────


def cv_split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train, cv) index arrays; |cv| = round(fraction·n)."""
    if not 0.0 < fraction <= 0.5:
        raise RejectedInputError(f"cv fraction must be in (0, 0.5], got {fraction}")
    n_cv = int(round(fraction * n))
    if n_cv == 0:
        raise RejectedInputError(f"cv fraction {fraction} of {n} samples leaves the CV set empty")
    perm = RngState(seed, CV_STREAM).generator().permutation(n)
    return np.sort(perm[n_cv:]), np.sort(perm[:n_cv])


def cv_split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    train_idx, cv_idx = cv_split_indices(dataset.n, fraction, seed)
    return dataset.subset(train_idx), dataset.subset(cv_idx)


# ─── Sharding ────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ShardedDataset:
    """One epoch's partition of a dataset into blocks of N worker splits.

    blocks[b][i] holds the sample indices of worker i in block b. Only the
    last block may be short, in which case short_final_block is set.
    """

    dataset: Dataset
    blocks: tuple
    n_workers: int
    sync_period: int
    minibatch_size: int
    seed: int
    epoch: int = 0
    reshuffle: bool = True
    short_final_block: bool = False

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def split(self, block: int, worker: int) -> np.ndarray:
        return self.blocks[block][worker]

    def minibatch_indices(self, block: int, worker: int) -> list[np.ndarray]:
        idx = self.blocks[block][worker]
        mb = self.minibatch_size
        return [idx[start:start + mb] for start in range(0, idx.size, mb)]

    def minibatches(self, block: int, worker: int) -> list[MinibatchView]:
        return [self.dataset.batch(idx) for idx in self.minibatch_indices(block, worker)]

    def chunks(self) -> Iterator[tuple[int, int]]:
        """(block, split) pairs in block-major order; async workers draw from these."""
        for b in range(self.n_blocks):
            for i in range(self.n_workers):
                yield b, i

    def all_indices(self) -> np.ndarray:
        return np.concatenate([s for block in self.blocks for s in block])

    def total_minibatches(self) -> int:
        return sum(len(self.minibatch_indices(b, i)) for b, i in self.chunks())


def shard(
    dataset: Dataset,
    n_workers: int,
    sync_period: int,
    minibatch: int,
    seed: int,
    epoch: int = 0,
    reshuffle: bool = True,
) -> ShardedDataset:
    """Shuffle and deal `dataset` into blocks and worker splits.

    The permutation depends only on (seed, epoch), or on seed alone when
    reshuffle is off.

    Raises:
        RejectedInputError: sizes below 1, or minibatch larger than a worker's share.
    """
    if n_workers < 1 or sync_period < 1 or minibatch < 1:
        raise RejectedInputError(
            f"n_workers, sync_period and minibatch must be >= 1, got {n_workers}, {sync_period}, {minibatch}"
        )
    if dataset.n < n_workers * minibatch:
        raise RejectedInputError(
            f"minibatch {minibatch} exceeds the per-worker share {dataset.n // n_workers} "
            f"of {dataset.n} samples over {n_workers} workers"
        )

    stream = SHUFFLE_STREAM + (epoch if reshuffle else 0)
    perm = RngState(seed, stream).generator().permutation(dataset.n)
    block_size = n_workers * sync_period * minibatch
    blocks = []
    for start in range(0, dataset.n, block_size):
        block = perm[start:start + block_size]
        splits = tuple(np.array(s) for s in np.array_split(block, n_workers))
        for s in splits:
            s.flags.writeable = False
        blocks.append(splits)

    short = dataset.n % block_size != 0
    if short:
        logger.debug("final block short: %d of %d samples", dataset.n % block_size, block_size)
    return ShardedDataset(
        dataset=dataset,
        blocks=tuple(blocks),
        n_workers=n_workers,
        sync_period=sync_period,
        minibatch_size=minibatch,
        seed=seed,
        epoch=epoch,
        reshuffle=reshuffle,
        short_final_block=short,
    )


def epoch_shard(sharded: ShardedDataset, epoch: int) -> ShardedDataset:
    """The same partition scheme dealt for another epoch."""
    if epoch == sharded.epoch:
        return sharded
    if not sharded.reshuffle:
        return ShardedDataset(
            dataset=sharded.dataset,
            blocks=sharded.blocks,
            n_workers=sharded.n_workers,
            sync_period=sharded.sync_period,
            minibatch_size=sharded.minibatch_size,
            seed=sharded.seed,
            epoch=epoch,
            reshuffle=False,
            short_final_block=sharded.short_final_block,
        )
    return shard(
        sharded.dataset,
        sharded.n_workers,
        sharded.sync_period,
        sharded.minibatch_size,
        sharded.seed,
        epoch=epoch,
        reshuffle=True,
    )
