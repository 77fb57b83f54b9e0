"""Survival-probability tables for one dense block.

Source ``i`` ranges over the block input (0) and the ``n`` composite layers;
consumer ``j`` ranges over the ``n`` layers and the block output (``n + 1``),
which feeds the next transition. Every table stores ``p[i, j]`` for
``0 <= i < j <= n + 1``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List

import numpy as np


class ScheduleKind(enum.Enum):
    UNIFORM = "uniform"
    V1 = "v1"
    V2 = "v2"
    V3 = "v3"


@dataclass(frozen=True)
class ScheduleMatrix:
    kind: ScheduleKind
    n: int
    table: np.ndarray  # (n + 1, n + 2); NaN where i >= j

    def prob(self, i: int, j: int) -> float:
        if not 0 <= i < j <= self.n + 1:
            raise IndexError(f"no entry p[{i}, {j}] for a block of {self.n} layers")
        return float(self.table[i, j])

    def consumer_probs(self, j: int) -> List[float]:
        """Probabilities for every source feeding consumer ``j``, oldest first."""
        return [self.prob(i, j) for i in range(j)]

    def entries(self):
        for j in range(1, self.n + 2):
            for i in range(j):
                yield i, j, float(self.table[i, j])


def build_schedule(kind: ScheduleKind, n: int, uniform_p: float = 0.5) -> ScheduleMatrix:
    if n < 1:
        raise ValueError(f"a dense block needs at least one layer, got n={n}")
    if kind is ScheduleKind.UNIFORM and not 0.0 < uniform_p <= 1.0:
        raise ValueError(f"uniform survival probability {uniform_p} outside (0, 1]")

    i = np.arange(n + 1)[:, None].astype(np.float64)
    j = np.arange(n + 2)[None, :].astype(np.float64)
    if kind is ScheduleKind.UNIFORM:
        table = np.full((n + 1, n + 2), float(uniform_p))
    elif kind is ScheduleKind.V1:
        table = np.broadcast_to(1.0 - 0.5 * (j - 1) / n, (n + 1, n + 2)).copy()
    elif kind is ScheduleKind.V2:
        table = np.broadcast_to(0.5 + 0.5 * (j - 1) / n, (n + 1, n + 2)).copy()
    else:
        # Constant step between adjacent sources: distance 1 keeps everything,
        # distance n + 1 (block input at the block output) keeps half.
        step = 0.5 / n
        table = 1.0 - step * (j - i - 1)
    rows, cols = np.indices(table.shape)
    table[rows >= cols] = np.nan
    table.setflags(write=False)
    return ScheduleMatrix(kind, n, table)
