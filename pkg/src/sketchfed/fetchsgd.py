"""FetchSGD: sketched federated SGD with momentum and error feedback on the server.

Clients sketch their gradients and hold no state. The server averages the
sketches and then, entirely in sketch space, applies momentum and error
accumulation before extracting an approximate top-k update::

    S    = sum_i weight_i * S(g_i)
    S_u  = rho * S_u + S
    S_e  = S_e + eta * S_u
    d    = top_k(U(S_e))
    S_e  = S_e with the buckets of S(d) zeroed   (or S_e - S(d))
    S_u  = S_u with the buckets of S(d) zeroed   (momentum masking)
    w    = w - d

Zeroing buckets and masking momentum are the defaults; ``error_mode="subtract"``
and ``momentum_masking=False`` give the plain recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import AggregationError, ConfigurationError, ShapeError, StateError
from .sketch import CountSketch, SketchConfig, SparseUpdate
from .sliding import ERROR_MODES, SlidingWindowSketch

ERROR_STRUCTURES = ("single", "sliding")


@dataclass(frozen=True)
class FetchConfig:
    """Hyperparameters of the FetchSGD server.

    ``rho=None`` selects the default momentum: 0.9 with a single error
    sketch, 0 with a sliding window. In sliding mode ``tau`` is the
    heavy-hitter threshold and ``window`` the number of staggered sketches.
    """

    eta: float
    k: int
    sketch: SketchConfig
    rho: float | None = None
    error_mode: str = "zero_buckets"
    momentum_masking: bool = True
    error_structure: str = "single"
    window: int = 1
    tau: float = 0.1

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError(f"eta must be positive, got {self.eta}")
        if not 1 <= self.k <= self.sketch.dim:
            raise ConfigurationError(f"k must lie in [1, {self.sketch.dim}], got {self.k}")
        if self.rho is not None and not 0 <= self.rho < 1:
            raise ConfigurationError(f"rho must lie in [0, 1), got {self.rho}")
        if self.error_mode not in ERROR_MODES:
            raise ConfigurationError(f"error_mode must be one of {ERROR_MODES}")
        if self.error_structure not in ERROR_STRUCTURES:
            raise ConfigurationError(f"error_structure must be one of {ERROR_STRUCTURES}")
        if self.window < 1:
            raise ConfigurationError("window must be positive")
        if not 0 < self.tau < 1:
            raise ConfigurationError("tau must lie in (0, 1)")

    @property
    def momentum(self) -> float:
        if self.rho is not None:
            return self.rho
        return 0.0 if self.error_structure == "sliding" else 0.9


@dataclass
class FetchServerState:
    weights: np.ndarray
    s_u: CountSketch
    s_e: CountSketch | SlidingWindowSketch
    step: int = 0

    @classmethod
    def initial(cls, weights: np.ndarray, cfg: FetchConfig) -> FetchServerState:
        """Zero momentum and error sketches around a copy of ``weights``."""
        weights = np.array(weights, dtype=np.float64)
        if weights.shape != (cfg.sketch.dim,):
            raise ShapeError(f"weights shape {weights.shape} != ({cfg.sketch.dim},)")
        if cfg.error_structure == "sliding":
            s_e = SlidingWindowSketch(cfg.sketch, cfg.window)
        else:
            s_e = CountSketch(cfg.sketch)
        return cls(weights, CountSketch(cfg.sketch), s_e)


def client_encode(gradient: np.ndarray, sketch_cfg: SketchConfig) -> CountSketch:
    """Sketch a client gradient. Pure: same inputs, bit-identical table."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != (sketch_cfg.dim,):
        raise ShapeError(f"gradient shape {gradient.shape} != ({sketch_cfg.dim},)")
    return CountSketch.of(gradient, sketch_cfg)


def server_aggregate(sketches: Sequence[CountSketch], weights: Sequence[float] | None = None) -> CountSketch:
    """Weighted sum of client sketches, reduced left to right.

    ``weights=None`` means uniform ``1/W``. Weights are used as given; pass
    ``D_i / sum(D)`` for the dataset-size weighting.
    """
    if len(sketches) == 0:
        raise AggregationError("cannot aggregate an empty list of sketches")
    if weights is None:
        weights = [1.0 / len(sketches)] * len(sketches)
    if len(weights) != len(sketches):
        raise AggregationError("weights and sketches differ in length")
    if any(w < 0 for w in weights):
        raise AggregationError("weights must be nonnegative")
    config = sketches[0].config
    out = CountSketch(config)
    for sk, w in zip(sketches, weights):
        if sk.config != config:
            raise AggregationError(f"sketch config {sk.config} != {config}")
        out.table += w * sk.table
    return out


def apply_sparse_update(weights: np.ndarray, delta: SparseUpdate) -> np.ndarray:
    """Return ``weights - delta`` without modifying ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    if delta.dim != weights.size:
        raise ShapeError(f"delta dim {delta.dim} != weights dim {weights.size}")
    out = weights.copy()
    out[delta.indices] -= delta.values
    return out


def server_step(
    state: FetchServerState, aggregated: CountSketch, cfg: FetchConfig
) -> tuple[SparseUpdate, FetchServerState]:
    """One server round. ``state`` is updated in place and returned."""
    if aggregated.config != cfg.sketch or state.s_u.config != cfg.sketch or state.s_e.config != cfg.sketch:
        raise StateError("sketch configs of state, aggregate and FetchConfig disagree")
    sliding = isinstance(state.s_e, SlidingWindowSketch)
    if sliding != (cfg.error_structure == "sliding"):
        raise StateError(f"state error structure does not match {cfg.error_structure!r}")

    s_u = state.s_u
    s_u.table *= cfg.momentum
    s_u += aggregated
    if sliding:
        state.s_e.insert(s_u.scale(cfg.eta))
        delta = state.s_e.find_heavy(cfg.tau).top(cfg.k)
        state.s_e.remove(delta, cfg.error_mode)
    else:
        s_e = state.s_e
        s_e.table += cfg.eta * s_u.table
        delta = s_e.unsketch_topk(cfg.k)
        if delta.nnz:
            if cfg.error_mode == "zero_buckets":
                s_e.zero_buckets(delta.indices)
            else:
                s_e.accumulate(delta, -1.0)
    if cfg.momentum_masking and delta.nnz:
        s_u.zero_buckets(delta.indices)
    state.weights = apply_sparse_update(state.weights, delta)
    state.step += 1
    return delta, state


@dataclass
class TrueTopK:
    """Uncompressed reference: the same recurrences on dense vectors.

    With a collision-free sketch FetchSGD tracks this oracle; it is also the
    "true top-k" method (clients send full gradients, server keeps the k
    largest accumulated coordinates).
    """

    eta: float
    k: int
    rho: float = 0.9
    momentum_masking: bool = True
    u: np.ndarray | None = field(default=None, repr=False)
    e: np.ndarray | None = field(default=None, repr=False)

    def step(self, gradient: np.ndarray) -> SparseUpdate:
        g = np.asarray(gradient, dtype=np.float64)
        if self.u is None:
            self.u = np.zeros_like(g)
            self.e = np.zeros_like(g)
        self.u = self.rho * self.u + g
        self.e = self.e + self.eta * self.u
        delta = SparseUpdate.from_dense(self.e).top(self.k)
        # zeroing a coordinate and subtracting its exact value coincide here
        self.e[delta.indices] = 0.0
        if self.momentum_masking:
            self.u[delta.indices] = 0.0
        return delta
