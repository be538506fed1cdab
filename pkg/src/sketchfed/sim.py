"""Deterministic federated simulation: data, partitioning, rounds, byte accounting.

All randomness comes from named substreams of one master seed (see
``sketchfed.rng``): ``("sampling", t)`` picks the round-``t`` participants and
``("batch", t, client)`` draws that client's minibatch or local shuffles.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence, Union

import numpy as np

from . import baselines
from .baselines import FedAvgConfig, LocalTopKConfig
from .errors import DataError, ParameterError, PartitionError
from .fetchsgd import FetchConfig, FetchServerState, client_encode, server_aggregate, server_step
from .models import ModelSpec, loss_and_grad
from .rng import substream

Optimizer = Union[FetchConfig, FedAvgConfig, LocalTopKConfig]

BYTES_PER_VALUE = 4
METRIC_FIELDS = ("round", "train_loss", "grad_norm_sq", "bytes_up", "bytes_down", "update_nnz")


@dataclass(eq=False)
class ClientShard:
    client_id: int
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.y) == 0:
            raise DataError(f"client {self.client_id} has no examples")
        if len(self.X) != len(self.y):
            raise DataError("features and labels differ in length")

    @property
    def weight(self) -> int:
        return len(self.y)

    def __len__(self) -> int:
        return len(self.y)


class Federation:
    """The client shards of one simulation, with the pooled data cached."""

    def __init__(self, shards: Sequence[ClientShard]):
        if len(shards) == 0:
            raise DataError("a federation needs at least one shard")
        self.shards = list(shards)

    def __len__(self) -> int:
        return len(self.shards)

    def __getitem__(self, i: int) -> ClientShard:
        return self.shards[i]

    def __iter__(self):
        return iter(self.shards)

    @cached_property
    def pooled(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.concatenate([s.X for s in self.shards]), np.concatenate([s.y for s in self.shards]))

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s.weight for s in self.shards])


def as_federation(shards) -> Federation:
    return shards if isinstance(shards, Federation) else Federation(shards)


# -- synthetic data ----------------------------------------------------------


def make_least_squares_clients(
    num_clients: int,
    examples_per_client: int,
    num_features: int,
    rng: np.random.Generator,
    cluster_scale: float = 1.0,
    noise: float = 0.1,
) -> tuple[list[ClientShard], np.ndarray]:
    """Non-i.i.d. regression: client ``i`` draws features around its own mean.

    Labels come from one shared weight vector plus Gaussian noise. Returns the
    shards and the true weights.
    """
    w_true = rng.normal(size=num_features) / math.sqrt(num_features)
    shards = []
    for cid in range(num_clients):
        center = cluster_scale * rng.normal(size=num_features)
        X = center + rng.normal(size=(examples_per_client, num_features))
        X /= math.sqrt(num_features)
        y = X @ w_true + noise * rng.normal(size=examples_per_client)
        shards.append(ClientShard(cid, X, y))
    return shards, w_true


def make_blobs(
    num_examples: int,
    num_features: int,
    num_classes: int,
    rng: np.random.Generator,
    separation: float = 3.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Balanced Gaussian-blob classification data, one blob per class."""
    centers = separation * rng.normal(size=(num_classes, num_features)) / math.sqrt(num_features)
    y = np.arange(num_examples) % num_classes
    X = centers[y] + rng.normal(size=(num_examples, num_features)) / math.sqrt(num_features)
    return X, y


# -- partitioning and sampling -------------------------------------------------


def partition_noniid(X, y, num_clients: int, classes_per_client: int, seed: int) -> list[ClientShard]:
    """Pathological non-i.i.d. split: each client sees at most ``classes_per_client`` classes.

    Examples are grouped by class (shuffled within a class under ``seed``) and
    cut into ``num_clients * classes_per_client`` contiguous pieces that never
    straddle a class boundary. Pieces are then dealt to clients at random.
    """
    X, y = np.asarray(X), np.asarray(y)
    n = len(y)
    if num_clients < 1 or classes_per_client < 1:
        raise PartitionError("num_clients and classes_per_client must be positive")
    if n == 0:
        raise PartitionError("dataset is empty")
    pieces_total = num_clients * classes_per_client
    if num_clients > n or pieces_total > n:
        raise PartitionError(f"cannot cut {n} examples into {pieces_total} nonempty pieces")
    rng = substream(seed, "partition")
    classes, counts = np.unique(y, return_counts=True)
    if pieces_total < len(classes):
        raise PartitionError(
            f"{len(classes)} classes need at least as many pieces; got {num_clients} x {classes_per_client}"
        )

    # one piece per class, the remainder proportional to class size (largest remainder)
    alloc = np.ones(len(classes), dtype=int)
    extra = pieces_total - len(classes)
    share = extra * counts / n
    alloc += np.floor(share).astype(int)
    leftover = pieces_total - alloc.sum()
    order = np.lexsort((np.arange(len(classes)), -(share - np.floor(share))))
    for c in order:
        if leftover == 0:
            break
        if alloc[c] < counts[c]:
            alloc[c] += 1
            leftover -= 1
    if leftover or np.any(alloc > counts):
        raise PartitionError("classes are too small for the requested number of pieces")

    pieces = []
    for cls, m in zip(classes, alloc):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        pieces.extend(np.array_split(idx, m))
    deal = rng.permutation(len(pieces))
    shards = []
    for cid in range(num_clients):
        mine = [pieces[p] for p in deal[cid * classes_per_client : (cid + 1) * classes_per_client]]
        idx = np.sort(np.concatenate(mine))
        shards.append(ClientShard(cid, X[idx], y[idx]))
    return shards


def partition_iid(X, y, num_clients: int, seed: int) -> list[ClientShard]:
    X, y = np.asarray(X), np.asarray(y)
    if num_clients < 1 or num_clients > len(y):
        raise PartitionError(f"cannot split {len(y)} examples among {num_clients} clients")
    perm = substream(seed, "partition").permutation(len(y))
    return [ClientShard(cid, X[idx], y[idx]) for cid, idx in enumerate(np.array_split(perm, num_clients))]


def sample_clients(num_clients: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """``w`` distinct client ids, uniformly without replacement, in sampled order."""
    if not 1 <= w <= num_clients:
        raise ParameterError(f"need 1 <= W <= {num_clients}, got W={w}")
    return rng.choice(num_clients, size=w, replace=False)


# -- byte accounting -----------------------------------------------------------


def account_bytes(payload: tuple, sparse_encoding: str = "values", sketch_encoding: str = "table") -> int:
    """Bytes on the wire for ``("dense", d)``, ``("sparse", nnz)`` or ``("sketch", rows, cols)``.

    Sparse payloads count only values by default (a zero-overhead index
    encoding); ``sparse_encoding="index_value"`` adds a 4-byte index per entry.
    Sketches count every counter by default; ``sketch_encoding="cols"`` counts
    one row's worth.
    """
    kind = payload[0]
    if kind == "dense":
        return BYTES_PER_VALUE * int(payload[1])
    if kind == "sparse":
        per_entry = {"values": BYTES_PER_VALUE, "index_value": 2 * BYTES_PER_VALUE}[sparse_encoding]
        return per_entry * int(payload[1])
    if kind == "sketch":
        rows, cols = int(payload[1]), int(payload[2])
        if sketch_encoding == "cols":
            return BYTES_PER_VALUE * cols
        if sketch_encoding != "table":
            raise ParameterError(f"unknown sketch encoding {sketch_encoding!r}")
        return BYTES_PER_VALUE * rows * cols
    raise ParameterError(f"unknown payload kind {kind!r}")


def compression_ratio(baseline_bytes: float, actual_bytes: float) -> float:
    if actual_bytes == 0:
        return math.inf if baseline_bytes else math.nan
    return baseline_bytes / actual_bytes


# -- risk ----------------------------------------------------------------------


def evaluate_risk(weights: np.ndarray, shards, model: ModelSpec) -> float:
    """Dataset-size weighted average of per-client mean losses."""
    shards = list(shards)
    total = sum(s.weight for s in shards)
    return sum(s.weight * loss_and_grad(model, weights, (s.X, s.y))[0] for s in shards) / total


def risk_and_grad(weights: np.ndarray, fed: Federation, model: ModelSpec) -> tuple[float, np.ndarray]:
    """Weighted risk and its gradient, computed on the pooled data.

    Weighting clients by size is the same as averaging over all examples.
    """
    return loss_and_grad(model, weights, fed.pooled)


def accuracy(weights: np.ndarray, fed: Federation, model: ModelSpec) -> float | None:
    if not hasattr(model, "predict"):
        return None
    X, y = fed.pooled
    return float(np.mean(model.predict(weights, X) == y))


# -- rounds --------------------------------------------------------------------


@dataclass(frozen=True)
class RoundConfig:
    """Per-round simulation settings.

    Attributes:
        participants: clients sampled per round (W)
        batch_size: local minibatch size for gradient methods; None uses the whole shard
        weighting: "uniform" (1/W) or "size" (D_i / sum D) aggregation of gradient methods
        download: "last_sync" counts coordinates changed since a client's last
            participation; "dense" charges the full model every time
    """

    participants: int
    batch_size: int | None = None
    weighting: str = "uniform"
    download: str = "last_sync"
    sparse_encoding: str = "values"
    sketch_encoding: str = "table"

    def __post_init__(self):
        if self.participants < 1:
            raise ParameterError("participants must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be positive")
        if self.weighting not in ("uniform", "size"):
            raise ParameterError(f"unknown weighting {self.weighting!r}")
        if self.download not in ("last_sync", "dense"):
            raise ParameterError(f"unknown download model {self.download!r}")
        if self.sparse_encoding not in ("values", "index_value"):
            raise ParameterError(f"unknown sparse encoding {self.sparse_encoding!r}")
        if self.sketch_encoding not in ("table", "cols"):
            raise ParameterError(f"unknown sketch encoding {self.sketch_encoding!r}")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    train_loss: float
    grad_norm_sq: float
    bytes_up: int
    bytes_down: int
    update_nnz: int

    def csv_row(self) -> list[str]:
        return [
            str(self.round),
            f"{self.train_loss:.9g}",
            f"{self.grad_norm_sq:.9g}",
            str(self.bytes_up),
            str(self.bytes_down),
            str(self.update_nnz),
        ]


@dataclass
class SimState:
    weights: np.ndarray
    num_clients: int
    round: int = 0
    server: FetchServerState | None = None
    velocity: np.ndarray | None = None
    client_errors: dict = field(default_factory=dict)
    last_sync: np.ndarray | None = None
    last_changed: np.ndarray | None = None
    bytes_up: int = 0
    bytes_down: int = 0

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        if self.last_sync is None:
            self.last_sync = np.zeros(self.num_clients, dtype=np.int64)
        if self.last_changed is None:
            self.last_changed = np.full(self.weights.size, -1, dtype=np.int64)


def init_state(weights: np.ndarray, optimizer: Optimizer, num_clients: int) -> SimState:
    state = SimState(weights, num_clients)
    if isinstance(optimizer, FetchConfig):
        state.server = FetchServerState.initial(weights, optimizer)
    else:
        state.velocity = np.zeros_like(state.weights)
    return state


def _client_batch(shard: ClientShard, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= len(shard):
        return shard.X, shard.y
    idx = np.sort(rng.choice(len(shard), size=batch_size, replace=False))
    return shard.X[idx], shard.y[idx]


def _agg_weights(fed: Federation, ids: np.ndarray, weighting: str) -> list[float]:
    if weighting == "uniform":
        return [1.0 / len(ids)] * len(ids)
    sizes = fed.sizes[ids].astype(np.float64)
    return list(sizes / sizes.sum())


def _download_bytes(state: SimState, ids: np.ndarray, dense: bool, cfg: RoundConfig) -> int:
    d = state.weights.size
    if dense or cfg.download == "dense":
        return len(ids) * account_bytes(("dense", d))
    total = 0
    for cid in ids:
        stale = int(np.count_nonzero(state.last_changed >= state.last_sync[cid]))
        total += account_bytes(("sparse", stale), cfg.sparse_encoding)
    return total


def run_round(
    state: SimState,
    optimizer: Optimizer,
    shards,
    model: ModelSpec,
    round_cfg: RoundConfig,
    seed: int,
    total_rounds: int | None = None,
) -> tuple[SimState, RoundMetrics]:
    """Run one communication round; ``state`` is updated in place and returned.

    ``total_rounds`` is only consulted by FedAvg learning-rate schedules.
    """
    fed = as_federation(shards)
    t = state.round
    ids = sample_clients(len(fed), round_cfg.participants, substream(seed, "sampling", t))
    d = state.weights.size
    old = state.weights

    if isinstance(optimizer, FetchConfig):
        up = 0
        sketches = []
        for cid in ids:
            X, y = _client_batch(fed[cid], round_cfg.batch_size, substream(seed, "batch", t, int(cid)))
            _, g = loss_and_grad(model, old, (X, y))
            sketches.append(client_encode(g, optimizer.sketch))
            up += account_bytes(("sketch", optimizer.sketch.rows, optimizer.sketch.cols), sketch_encoding=round_cfg.sketch_encoding)
        down = _download_bytes(state, ids, False, round_cfg)
        aggregated = server_aggregate(sketches, _agg_weights(fed, ids, round_cfg.weighting))
        state.server.weights = old
        server_step(state.server, aggregated, optimizer)
        new = state.server.weights
    elif isinstance(optimizer, LocalTopKConfig):
        up = 0
        updates = []
        for cid in ids:
            X, y = _client_batch(fed[cid], round_cfg.batch_size, substream(seed, "batch", t, int(cid)))
            _, g = loss_and_grad(model, old, (X, y))
            update, err = baselines.localtopk_client(g, optimizer, state.client_errors.get(int(cid)))
            if err is not None:
                state.client_errors[int(cid)] = err
            updates.append(update)
            up += account_bytes(("sparse", update.nnz), round_cfg.sparse_encoding)
        down = _download_bytes(state, ids, False, round_cfg)
        agg = baselines.aggregate_sparse(updates, _agg_weights(fed, ids, round_cfg.weighting))
        state.velocity, applied = baselines.global_momentum_step(state.velocity, agg, optimizer.global_momentum)
        new = old - optimizer.lr * applied
    elif isinstance(optimizer, FedAvgConfig):
        lr = optimizer.local_lr
        if optimizer.lr_schedule is not None and total_rounds:
            lr *= optimizer.lr_schedule.at(t, total_rounds)
        deltas = [
            baselines.fedavg_local_train(old, fed[cid], optimizer, model, substream(seed, "batch", t, int(cid)), lr)
            for cid in ids
        ]
        up = len(ids) * account_bytes(("dense", d))
        down = _download_bytes(state, ids, True, round_cfg)
        agg = baselines.fedavg_aggregate(deltas, fed.sizes[ids])
        state.velocity, applied = baselines.global_momentum_step(state.velocity, agg, optimizer.global_momentum)
        new = old - applied
    else:
        raise TypeError(f"unsupported optimizer config {type(optimizer).__name__}")

    changed = np.flatnonzero(new != old)
    state.last_sync[ids] = t
    state.last_changed[changed] = t
    state.weights = new
    state.round = t + 1
    state.bytes_up += up
    state.bytes_down += down
    loss, grad = risk_and_grad(new, fed, model)
    metrics = RoundMetrics(t + 1, float(loss), float(grad @ grad), int(up), int(down), int(changed.size))
    return state, metrics


def simulate(
    weights: np.ndarray,
    optimizer: Optimizer,
    shards,
    model: ModelSpec,
    round_cfg: RoundConfig,
    rounds: int,
    seed: int,
) -> tuple[SimState, list[RoundMetrics]]:
    fed = as_federation(shards)
    state = init_state(weights, optimizer, len(fed))
    history = []
    for _ in range(rounds):
        state, m = run_round(state, optimizer, fed, model, round_cfg, seed, total_rounds=rounds)
        history.append(m)
    return state, history


def metrics_csv(history: Sequence[RoundMetrics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for m in history:
        writer.writerow(m.csv_row())
    return buf.getvalue()


def write_metrics(history: Sequence[RoundMetrics], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(metrics_csv(history))
