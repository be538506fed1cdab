"""FedAvg and local top-k sparsification, plus global (server) momentum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AggregationError, ConfigurationError, DataError, ShapeError
from .models import ModelSpec, loss_and_grad
from .sketch import SparseUpdate


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise-linear multiplier over training progress in ``[0, 1]``.

    Progress is ``round / total_rounds``, so running fewer rounds compresses
    the schedule along the iteration axis instead of truncating it.
    """

    points: tuple[tuple[float, float], ...] = ((0.0, 1.0), (1.0, 1.0))

    def __post_init__(self):
        xs = [p for p, _ in self.points]
        if len(xs) < 1 or xs != sorted(xs) or xs[0] < 0 or xs[-1] > 1:
            raise ConfigurationError("schedule points must be sorted progress values in [0, 1]")

    def at(self, round_idx: int, total_rounds: int) -> float:
        progress = round_idx / max(total_rounds, 1)
        xs, ys = zip(*self.points)
        return float(np.interp(progress, xs, ys))


@dataclass(frozen=True)
class FedAvgConfig:
    """Local SGD settings for FedAvg.

    ``local_epochs`` may be fractional: a fraction of a pass over the shuffled
    shard, rounded to whole minibatch steps (at least one).
    ``global_epochs_fraction`` scales the number of communication rounds.
    """

    local_epochs: float = 1.0
    local_batch: int = 32
    local_lr: float = 0.1
    global_epochs_fraction: float = 1.0
    global_momentum: float = 0.0
    lr_schedule: LRSchedule | None = None

    def __post_init__(self):
        if not self.local_epochs > 0:
            raise ConfigurationError("local_epochs must be positive")
        if self.local_batch < 1:
            raise ConfigurationError("local_batch must be positive")
        if not self.local_lr > 0:
            raise ConfigurationError("local_lr must be positive")
        if not 0 < self.global_epochs_fraction <= 1:
            raise ConfigurationError("global_epochs_fraction must lie in (0, 1]")
        if not 0 <= self.global_momentum < 1:
            raise ConfigurationError("global_momentum must lie in [0, 1)")

    def rounds(self, base_rounds: int) -> int:
        return math.ceil(base_rounds * self.global_epochs_fraction)


@dataclass(frozen=True)
class LocalTopKConfig:
    k: int
    lr: float = 0.1
    local_error: bool = False
    global_momentum: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be positive")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if not 0 <= self.global_momentum < 1:
            raise ConfigurationError("global_momentum must lie in [0, 1)")


def local_steps(shard_size: int, cfg: FedAvgConfig) -> tuple[int, int]:
    """Return ``(batch_size, total_steps)`` for one client's local training."""
    batch = min(cfg.local_batch, shard_size)
    per_epoch = math.ceil(shard_size / batch)
    return batch, max(1, round(cfg.local_epochs * per_epoch))


def fedavg_local_train(
    weights: np.ndarray,
    shard,
    cfg: FedAvgConfig,
    model: ModelSpec,
    rng: np.random.Generator,
    lr: float | None = None,
) -> np.ndarray:
    """Run local minibatch SGD from ``weights``; return ``initial - final``."""
    X, y = shard.X, shard.y
    n = len(y)
    if n == 0:
        raise DataError("cannot train on an empty shard")
    lr = cfg.local_lr if lr is None else lr
    batch, steps = local_steps(n, cfg)
    w = np.array(weights, dtype=np.float64)
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + batch]
        pos += batch
        _, g = loss_and_grad(model, w, (X[idx], y[idx]))
        w -= lr * g
    return weights - w


def fedavg_aggregate(deltas: Sequence[np.ndarray], shard_sizes: Sequence[int]) -> np.ndarray:
    """Dataset-size weighted mean of client deltas."""
    if len(deltas) == 0:
        raise AggregationError("no deltas to aggregate")
    if len(deltas) != len(shard_sizes):
        raise AggregationError("deltas and shard_sizes differ in length")
    total = float(sum(shard_sizes))
    out = np.zeros_like(np.asarray(deltas[0], dtype=np.float64))
    for d, n in zip(deltas, shard_sizes):
        out += (n / total) * np.asarray(d, dtype=np.float64)
    return out


def topk_dense(v: np.ndarray, k: int) -> SparseUpdate:
    return SparseUpdate.from_dense(v).top(k)


def localtopk_client(
    gradient: np.ndarray,
    cfg: LocalTopKConfig,
    local_error_state: np.ndarray | None = None,
) -> tuple[SparseUpdate, np.ndarray | None]:
    """Top-k of ``gradient + error``; returns the update and the new error.

    The new error is ``acc - update`` when ``cfg.local_error`` is on and None
    otherwise.
    """
    acc = np.asarray(gradient, dtype=np.float64)
    if local_error_state is not None and cfg.local_error:
        if local_error_state.shape != acc.shape:
            raise ShapeError(f"error state shape {local_error_state.shape} != {acc.shape}")
        acc = acc + local_error_state
    if cfg.k > acc.size:
        raise ShapeError(f"k={cfg.k} exceeds dimension {acc.size}")
    update = topk_dense(acc, cfg.k)
    if not cfg.local_error:
        return update, None
    err = acc.copy()
    err[update.indices] = 0.0
    return update, err


def aggregate_sparse(updates: Sequence[SparseUpdate], weights: Sequence[float] | None = None) -> np.ndarray:
    """Weighted sum of sparse client updates as a dense vector (uniform ``1/W`` by default)."""
    if len(updates) == 0:
        raise AggregationError("no updates to aggregate")
    if weights is None:
        weights = [1.0 / len(updates)] * len(updates)
    out = np.zeros(updates[0].dim)
    for u, w in zip(updates, weights):
        if u.dim != out.size:
            raise AggregationError("sparse updates differ in dimension")
        out[u.indices] += w * u.values
    return out


def global_momentum_step(velocity: np.ndarray, update: np.ndarray, rho_g: float) -> tuple[np.ndarray, np.ndarray]:
    """``velocity <- rho_g * velocity + update``; the applied update is the new velocity."""
    velocity = rho_g * np.asarray(velocity, dtype=np.float64) + np.asarray(update, dtype=np.float64)
    return velocity, velocity
