"""Sliding-window error accumulation with ``window`` staggered Count Sketches.

Every slot receives every inserted sketch. Slots are zeroed round-robin, one
per iteration, so after warm-up the slots hold the sketched sums of the last
1, 2, ..., ``window`` insertions. The reset scheduled for an iteration is
applied lazily at the start of the next insertion, which lets callers run
recovery and error subtraction on the full window before it is dropped.
"""

from __future__ import annotations

import numpy as np

from .errors import IncompatibleSketchError, ParameterError, ShapeError
from .sketch import CountSketch, SketchConfig, SparseUpdate, _median_rows, hash_tables

ERROR_MODES = ("zero_buckets", "subtract")


class SlidingWindowSketch:
    """``window`` Count Sketches sharing one config, reset round-robin.

    Attributes:
        slots: the sketches; ``slots[j]`` is zeroed at iterations ``j, j+window, ...``
        ages: insertions each slot has absorbed since it was last zeroed
        iteration: number of insertions so far
    """

    def __init__(self, config: SketchConfig, window: int):
        if window < 1:
            raise ParameterError(f"window must be positive, got {window}")
        self.config = config
        self.window = window
        self.slots = [CountSketch(config) for _ in range(window)]
        self.ages = [0] * window
        self.iteration = 0

    def __repr__(self) -> str:
        return f"SlidingWindowSketch(window={self.window}, iteration={self.iteration}, {self.config})"

    @property
    def pending_reset(self) -> int | None:
        """Slot that will be zeroed before the next insertion, if any."""
        if self.iteration == 0:
            return None
        return (self.iteration - 1) % self.window

    def insert(self, s: CountSketch) -> SlidingWindowSketch:
        if s.config != self.config:
            raise IncompatibleSketchError(f"sketch config {s.config} != window config {self.config}")
        slot = self.pending_reset
        if slot is not None:
            self.slots[slot].table[:] = 0.0
            self.ages[slot] = 0
        for j, sk in enumerate(self.slots):
            sk += s
            self.ages[j] += 1
        self.iteration += 1
        return self

    def slot_for_length(self, length: int) -> CountSketch:
        """Slot holding the sum of the last ``length`` insertions (after warm-up)."""
        if not 1 <= length <= self.window:
            raise ParameterError(f"length must lie in [1, {self.window}]")
        return self.slots[self.ages.index(length)]

    def find_heavy(self, tau: float) -> SparseUpdate:
        """Union over slots of coordinates with ``est**2 >= tau * l2_est**2``.

        A coordinate found in several slots takes its value from the slot with
        the largest absolute estimate.
        """
        if not 0 < tau < 1:
            raise ParameterError(f"tau must lie in (0, 1), got {tau}")
        _, signs, flat = hash_tables(self.config)
        best = np.zeros(self.config.dim)
        for sk in self.slots:
            norm = sk.l2_estimate()
            if norm == 0.0:
                continue
            est = _median_rows(signs * sk.table.ravel()[flat])
            heavy = (est * est >= tau * norm * norm) & (est != 0)
            better = heavy & (np.abs(est) > np.abs(best))
            best[better] = est[better]
        return SparseUpdate.from_dense(best)

    def remove(self, delta: SparseUpdate, mode: str = "zero_buckets") -> SlidingWindowSketch:
        """Take recovered coordinates out of every slot.

        ``zero_buckets`` zeroes the buckets that ``S(delta)`` touches;
        ``subtract`` subtracts ``S(delta)``.
        """
        if delta.dim != self.config.dim:
            raise ShapeError(f"delta dim {delta.dim} != {self.config.dim}")
        if mode not in ERROR_MODES:
            raise ParameterError(f"unknown error mode {mode!r}")
        if delta.nnz == 0:
            return self
        if mode == "zero_buckets":
            for sk in self.slots:
                sk.zero_buckets(delta.indices)
        else:
            removed = CountSketch.of(delta, self.config)
            for sk in self.slots:
                sk.table -= removed.table
        return self
