"""Count Sketch over real-valued vectors.

A ``CountSketch`` is an ``rows x cols`` table of counters together with, for
every row, a bucket hash and a sign hash over coordinates ``[0, dim)``.
Sketching is linear, so sketches built under the same ``SketchConfig`` can be
added, scaled and merged in any order.

Hashes are degree-3 polynomials modulo the Mersenne prime ``2**61 - 1`` (a
4-wise independent family). Coefficients come from a Philox stream keyed on
``(seed, row, role)``, which makes the hash family a pure function of the
config: clients and the aggregator only need to agree on the seed.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from typing import Union

import numba
import numpy as np

from .errors import (
    BoundsError,
    ConfigurationError,
    IncompatibleSketchError,
    ParameterError,
    ShapeError,
)

MERSENNE_61 = (1 << 61) - 1
_ROLE_BUCKET = 0
_ROLE_SIGN = 1
_HEADER = struct.Struct("<4Q")
_MAX_DIM = 1 << 31


@dataclass(frozen=True)
class SketchConfig:
    """Shape and hash seed of a Count Sketch."""

    rows: int
    cols: int
    dim: int
    seed: int = 0

    def __post_init__(self):
        for name in ("rows", "cols", "dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.dim >= _MAX_DIM:
            raise ConfigurationError(f"dim must be below 2**31, got {self.dim}")
        if not 0 <= self.seed < (1 << 64):
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")

    @property
    def num_counters(self) -> int:
        return self.rows * self.cols


def sketch_size(
    tau: float,
    delta: float,
    dim: int,
    rounds: int = 1,
    regime: str = "sliding",
    slack: float = 8.0,
    min_cols: int = 16,
) -> tuple[int, int]:
    """Map heavy-hitter parameters to ``(rows, cols)``.

    ``rows = ceil(ln(dim * rounds / delta))``. Columns are ``ceil(slack / tau**2)``
    in the ``"sliding"`` regime (heavy hitters of window sums, no momentum) and
    ``ceil(slack / tau)`` in the ``"contraction"`` regime; both are clamped to
    at least ``min_cols``.
    """
    if not 0 < tau < 1:
        raise ParameterError(f"tau must lie in (0, 1), got {tau}")
    if not 0 < delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if dim < 1 or rounds < 1:
        raise ParameterError("dim and rounds must be positive")
    rows = max(1, math.ceil(math.log(dim * rounds / delta)))
    if regime == "sliding":
        cols = math.ceil(slack / tau**2)
    elif regime == "contraction":
        cols = math.ceil(slack / tau)
    else:
        raise ParameterError(f"unknown sizing regime {regime!r}")
    return rows, max(min_cols, cols)


def _hash_coefficients(seed: int, row: int, role: int) -> np.ndarray:
    seq = np.random.SeedSequence([seed, row, role])
    gen = np.random.Generator(np.random.Philox(seq))
    return gen.integers(0, MERSENNE_61, size=4, dtype=np.uint64)


@numba.njit(cache=True)
def _poly_hash_kernel(coeffs, x, out):
    p = np.uint64(MERSENNE_61)
    m31 = np.uint64((1 << 31) - 1)
    m30 = np.uint64((1 << 30) - 1)
    s61 = np.uint64(61)
    s31 = np.uint64(31)
    s30 = np.uint64(30)
    for r in range(coeffs.shape[0]):
        for i in range(x.shape[0]):
            xi = x[i]
            h = coeffs[r, 3]
            for j in range(2, -1, -1):
                m = (h >> s31) * xi
                t = (m >> s30) + ((m & m30) << s31) + (h & m31) * xi + coeffs[r, j]
                t = (t & p) + (t >> s61)
                h = (t & p) + (t >> s61)
            if h >= p:
                h -= p
            out[r, i] = h


def poly_hash(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate ``sum_j coeffs[..., j] * x**j mod 2**61-1`` by Horner's rule.

    ``coeffs`` has shape ``(rows, 4)``; ``x`` holds integers below ``2**31``
    so every intermediate product fits in 64 bits. Returns ``(rows, len(x))``.
    """
    coeffs = np.ascontiguousarray(coeffs, dtype=np.uint64)
    x = np.ascontiguousarray(x, dtype=np.uint64).reshape(-1)
    out = np.empty((coeffs.shape[0], x.shape[0]), dtype=np.uint64)
    _poly_hash_kernel(coeffs, x, out)
    return out


@functools.lru_cache(maxsize=16)
def hash_tables(config: SketchConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(buckets, signs, flat)`` arrays of shape ``(rows, dim)``.

    ``flat`` indexes the row-major flattened table. Arrays are cached per
    config and marked read-only.
    """
    coords = np.arange(config.dim, dtype=np.uint64)
    bucket_coeffs = np.stack([_hash_coefficients(config.seed, j, _ROLE_BUCKET) for j in range(config.rows)])
    sign_coeffs = np.stack([_hash_coefficients(config.seed, j, _ROLE_SIGN) for j in range(config.rows)])
    buckets = (poly_hash(bucket_coeffs, coords) % np.uint64(config.cols)).astype(np.intp)
    signs = 1.0 - 2.0 * (poly_hash(sign_coeffs, coords) & 1).astype(np.float64)
    flat = buckets + (np.arange(config.rows, dtype=np.intp) * config.cols)[:, None]
    for arr in (buckets, signs, flat):
        arr.setflags(write=False)
    return buckets, signs, flat


def _median_rows(a: np.ndarray) -> np.ndarray:
    # np.median is several times slower than a bare partition here
    r = a.shape[0]
    mid = r // 2
    if r % 2:
        return np.partition(a, mid, axis=0)[mid]
    part = np.partition(a, (mid - 1, mid), axis=0)
    return 0.5 * (part[mid - 1] + part[mid])


@dataclass(eq=False)
class SparseUpdate:
    """A sparse vector of dimension ``dim`` stored as sorted index/value pairs.

    Indices are strictly increasing and every stored value is nonzero.
    """

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.dim < 1:
            raise ShapeError(f"dim must be positive, got {self.dim}")
        if self.indices.shape != self.values.shape:
            raise ShapeError("indices and values must have the same length")
        if self.indices.size:
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise BoundsError(f"indices must lie in [0, {self.dim})")
            if np.any(np.diff(self.indices) <= 0):
                raise ShapeError("indices must be strictly increasing")
        if np.any(self.values == 0):
            raise ShapeError("sparse updates may not store exact zeros")

    @classmethod
    def empty(cls, dim: int) -> SparseUpdate:
        return cls(dim, np.empty(0, np.int64), np.empty(0))

    @classmethod
    def from_dense(cls, v: np.ndarray) -> SparseUpdate:
        v = np.asarray(v, dtype=np.float64)
        idx = np.flatnonzero(v)
        return cls(v.size, idx, v[idx])

    @classmethod
    def from_pairs(cls, dim: int, indices, values) -> SparseUpdate:
        """Build from unsorted pairs, dropping zeros. Duplicate indices are an error."""
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        order = np.argsort(indices, kind="stable")
        indices, values = indices[order], values[order]
        keep = values != 0
        return cls(dim, indices[keep], values[keep])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def __len__(self) -> int:
        return self.nnz

    def __neg__(self) -> SparseUpdate:
        return SparseUpdate(self.dim, self.indices.copy(), -self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseUpdate):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def scaled(self, alpha: float) -> SparseUpdate:
        if alpha == 0:
            return SparseUpdate.empty(self.dim)
        return SparseUpdate(self.dim, self.indices.copy(), self.values * alpha)

    def top(self, k: int) -> SparseUpdate:
        """Keep the ``k`` entries of largest magnitude (ties to the lower index)."""
        if k >= self.nnz:
            return self
        order = np.argsort(-np.abs(self.values), kind="stable")[:k]
        order.sort()
        return SparseUpdate(self.dim, self.indices[order], self.values[order])


Vector = Union[np.ndarray, SparseUpdate]


class CountSketch:
    """Linear Count Sketch of ``config.dim``-dimensional real vectors.

    Counters are float64 in memory and float32 on the wire. Mutating methods
    (``accumulate``, ``zero_buckets``, ``+=``) work in place and return
    ``self``; ``+`` and ``scale`` return new sketches.
    """

    def __init__(self, config: SketchConfig, table: np.ndarray | None = None):
        self.config = config
        if table is None:
            table = np.zeros((config.rows, config.cols))
        else:
            table = np.array(table, dtype=np.float64)
            if table.shape != (config.rows, config.cols):
                raise ShapeError(f"table shape {table.shape} does not match config")
        self.table = table

    def __repr__(self) -> str:
        c = self.config
        return f"CountSketch(rows={c.rows}, cols={c.cols}, dim={c.dim}, seed={c.seed})"

    @classmethod
    def of(cls, v: Vector, config: SketchConfig, scale: float = 1.0) -> CountSketch:
        """Sketch a vector: ``S(scale * v)``."""
        return cls(config).accumulate(v, scale)

    def copy(self) -> CountSketch:
        return CountSketch(self.config, self.table)

    def _check_compatible(self, other: CountSketch) -> None:
        if not isinstance(other, CountSketch):
            raise TypeError(f"expected CountSketch, got {type(other).__name__}")
        if other.config != self.config:
            raise IncompatibleSketchError(f"cannot combine {self!r} with {other!r}")

    def accumulate(self, v: Vector, scale: float = 1.0) -> CountSketch:
        """Add ``S(scale * v)`` into the table."""
        buckets, signs, flat = hash_tables(self.config)
        cfg = self.config
        if isinstance(v, SparseUpdate):
            if v.dim != cfg.dim:
                raise ShapeError(f"vector dim {v.dim} != sketch dim {cfg.dim}")
            if v.nnz == 0 or scale == 0:
                return self
            idx = flat[:, v.indices]
            contrib = signs[:, v.indices] * (scale * v.values)
        else:
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (cfg.dim,):
                raise ShapeError(f"vector shape {v.shape} != ({cfg.dim},)")
            if scale == 0:
                return self
            idx = flat
            contrib = signs * (scale * v)
        update = np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=cfg.num_counters)
        self.table += update.reshape(cfg.rows, cfg.cols)
        return self

    def __iadd__(self, other: CountSketch) -> CountSketch:
        self._check_compatible(other)
        self.table += other.table
        return self

    def __add__(self, other: CountSketch) -> CountSketch:
        self._check_compatible(other)
        return CountSketch(self.config, self.table + other.table)

    def __sub__(self, other: CountSketch) -> CountSketch:
        self._check_compatible(other)
        return CountSketch(self.config, self.table - other.table)

    def scale(self, alpha: float) -> CountSketch:
        return CountSketch(self.config, self.table * alpha)

    __mul__ = scale
    __rmul__ = scale

    def estimate(self, i: int) -> float:
        """Median over rows of ``sign_j(i) * table[j, bucket_j(i)]``."""
        if not 0 <= i < self.config.dim:
            raise BoundsError(f"coordinate {i} outside [0, {self.config.dim})")
        buckets, signs, _ = hash_tables(self.config)
        rows = np.arange(self.config.rows)
        return float(np.median(signs[:, i] * self.table[rows, buckets[:, i]]))

    def estimate_all(self) -> np.ndarray:
        """Estimate every coordinate; the decompression operator."""
        _, signs, flat = hash_tables(self.config)
        return _median_rows(signs * self.table.ravel()[flat])

    def unsketch_topk(self, k: int) -> SparseUpdate:
        """Return the ``k`` largest-magnitude estimates.

        Ties go to the lower index. Coordinates estimated as exactly zero are
        never returned, so the result can hold fewer than ``k`` entries.
        """
        if not 1 <= k <= self.config.dim:
            raise ParameterError(f"k must lie in [1, {self.config.dim}], got {k}")
        return SparseUpdate.from_dense(self.estimate_all()).top(k)

    def l2_estimate(self) -> float:
        """AMS-style norm estimate: median over rows of each row's L2 norm."""
        norms = np.sqrt(np.einsum("ij,ij->i", self.table, self.table))
        return float(_median_rows(norms[:, None])[0])

    def touched_buckets(self, indices: np.ndarray) -> np.ndarray:
        """Flat table positions that coordinates ``indices`` hash to."""
        _, _, flat = hash_tables(self.config)
        return np.unique(flat[:, np.asarray(indices, dtype=np.intp)])

    def zero_buckets(self, indices: np.ndarray) -> CountSketch:
        """Zero, in every row, the bucket each listed coordinate hashes to."""
        indices = np.asarray(indices, dtype=np.intp)
        if indices.size:
            self.table.ravel()[self.touched_buckets(indices)] = 0.0
        return self

    def is_zero(self) -> bool:
        return not np.any(self.table)

    def to_bytes(self) -> bytes:
        """Little-endian header ``(rows, cols, dim, seed)`` then float32 counters."""
        c = self.config
        return _HEADER.pack(c.rows, c.cols, c.dim, c.seed) + self.table.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> CountSketch:
        rows, cols, dim, seed = _HEADER.unpack_from(data)
        config = SketchConfig(rows, cols, dim, seed)
        body = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
        if body.size != rows * cols:
            raise ShapeError(f"expected {rows * cols} counters, found {body.size}")
        return cls(config, body.reshape(rows, cols).astype(np.float64))

    @property
    def wire_bytes(self) -> int:
        """Payload size of the counters alone (4 bytes each)."""
        return 4 * self.config.num_counters


def sketch_vector(v: Vector, config: SketchConfig, scale: float = 1.0) -> CountSketch:
    return CountSketch.of(v, config, scale)
