"""Small differentiable objectives with hand-derived gradients.

All models are pure functions of ``(weights, batch)`` where ``weights`` is a
flat float64 vector and ``batch`` is a ``(features, targets)`` pair. Losses are
means over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DataError, ShapeError

Batch = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True, eq=False)
class Quadratic:
    """``f(w) = 0.5 * w^T A w - b^T w``; the batch is ignored."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
            raise ShapeError("A must be square and b must match its size")
        if not np.allclose(A, A.T):
            raise ShapeError("A must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.b.size

    def loss_and_grad(self, w, batch=None):
        Aw = self.A @ w
        return 0.5 * float(w @ Aw) - float(self.b @ w), Aw - self.b

    def minimizer(self) -> np.ndarray:
        return np.linalg.lstsq(self.A, self.b, rcond=None)[0]


@dataclass(frozen=True)
class LeastSquares:
    """Per-example loss ``0.5 * (x . w - y)**2``."""

    num_features: int

    @property
    def dim(self) -> int:
        return self.num_features

    def loss_and_grad(self, w, batch):
        X, y = batch
        resid = X @ w - y
        n = len(y)
        return 0.5 * float(resid @ resid) / n, X.T @ resid / n


def _softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    n = len(y)
    rows = np.arange(n)
    loss = float(np.mean(log_norm - shifted[rows, y]))
    probs = np.exp(shifted - log_norm[:, None])
    probs[rows, y] -= 1.0
    return loss, probs / n


@dataclass(frozen=True)
class Logistic:
    """Multinomial logistic regression; weights are ``[W (f x C), b (C)]`` flattened."""

    num_features: int
    num_classes: int

    @property
    def dim(self) -> int:
        return (self.num_features + 1) * self.num_classes

    def unpack(self, w):
        f, c = self.num_features, self.num_classes
        return w[: f * c].reshape(f, c), w[f * c :]

    def loss_and_grad(self, w, batch):
        X, y = batch
        W, b = self.unpack(w)
        loss, dlogits = _softmax_xent(X @ W + b, y)
        return loss, np.concatenate([(X.T @ dlogits).ravel(), dlogits.sum(axis=0)])

    def predict(self, w, X):
        W, b = self.unpack(w)
        return np.argmax(X @ W + b, axis=1)


@dataclass(frozen=True)
class MLP:
    """One hidden ReLU layer, softmax output, no normalization layers.

    Weights flatten as ``[W1 (f x h), b1 (h), W2 (h x C), b2 (C)]``.
    """

    num_features: int
    hidden: int
    num_classes: int

    @property
    def dim(self) -> int:
        f, h, c = self.num_features, self.hidden, self.num_classes
        return f * h + h + h * c + c

    def unpack(self, w):
        f, h, c = self.num_features, self.hidden, self.num_classes
        i = 0
        parts = []
        for shape in ((f, h), (h,), (h, c), (c,)):
            size = int(np.prod(shape))
            parts.append(w[i : i + size].reshape(shape))
            i += size
        return parts

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        W1 = rng.normal(0.0, np.sqrt(2.0 / self.num_features), (self.num_features, self.hidden))
        W2 = rng.normal(0.0, np.sqrt(1.0 / self.hidden), (self.hidden, self.num_classes))
        return np.concatenate([W1.ravel(), np.zeros(self.hidden), W2.ravel(), np.zeros(self.num_classes)])

    def loss_and_grad(self, w, batch):
        X, y = batch
        W1, b1, W2, b2 = self.unpack(w)
        pre = X @ W1 + b1
        act = np.maximum(pre, 0.0)
        loss, dlogits = _softmax_xent(act @ W2 + b2, y)
        dact = dlogits @ W2.T
        dpre = dact * (pre > 0)
        grad = np.concatenate(
            [(X.T @ dpre).ravel(), dpre.sum(axis=0), (act.T @ dlogits).ravel(), dlogits.sum(axis=0)]
        )
        return loss, grad

    def predict(self, w, X):
        W1, b1, W2, b2 = self.unpack(w)
        return np.argmax(np.maximum(X @ W1 + b1, 0.0) @ W2 + b2, axis=1)


ModelSpec = Union[Quadratic, LeastSquares, Logistic, MLP]


def loss_and_grad(spec: ModelSpec, weights: np.ndarray, batch: Batch | None = None) -> tuple[float, np.ndarray]:
    """Mean loss over ``batch`` and its exact gradient."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (spec.dim,):
        raise ShapeError(f"weights shape {weights.shape} != ({spec.dim},)")
    if not isinstance(spec, Quadratic):
        if batch is None or len(batch[1]) == 0:
            raise DataError("batch must be nonempty")
    return spec.loss_and_grad(weights, batch)


def init_weights(spec: ModelSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    if isinstance(spec, MLP):
        if rng is None:
            raise ValueError("MLP initialization needs a generator")
        return spec.init_weights(rng)
    return np.zeros(spec.dim)


def power_iteration(A: np.ndarray, tol: float = 1e-8, max_iter: int = 100_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric PSD matrix via the Rayleigh quotient."""
    A = np.asarray(A, dtype=np.float64)
    v = np.random.default_rng(seed).normal(size=A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        Av = A @ v
        norm = np.linalg.norm(Av)
        if norm == 0.0:
            return 0.0
        new_lam = float(v @ Av)
        v = Av / norm
        if abs(new_lam - lam) <= tol * abs(new_lam):
            return new_lam
        lam = new_lam
    return lam


def smoothness_constant(spec: ModelSpec, features: np.ndarray | None = None) -> float | None:
    """Smoothness constant ``L``, or None where no closed form exists.

    For least squares the constant depends on the data, so ``features`` (the
    pooled design matrix) must be supplied.
    """
    if isinstance(spec, Quadratic):
        return power_iteration(spec.A)
    if isinstance(spec, LeastSquares) and features is not None:
        X = np.asarray(features, dtype=np.float64)
        return power_iteration(X.T @ X / len(X))
    return None
