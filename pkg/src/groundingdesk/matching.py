"""Minimum-cost bipartite matching between predicted queries and ground truth.

Costs are converted to exact integers before solving, so the optimum is exact
rather than approximate.  A lexicographic secondary key is folded into each
integer cost so that equal-cost optima resolve to the assignment whose sorted
(query, gt) pair list is smallest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # sorted by query index
    cost: float

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pairs)


def _exact_integer_costs(cost: np.ndarray) -> list[list[int]]:
    ratios = [[float(c).as_integer_ratio() for c in row] for row in cost]
    denom = max((den for row in ratios for _, den in row), default=1)
    return [[num * (denom // den) for num, den in row] for row in ratios]


def _solve(cost: list[list[int]], n: int, m: int) -> list[int]:
    """Shortest-augmenting-path Hungarian method for n <= m.

    Returns the column assigned to each row.
    """
    INF = math.inf
    u = [0] * (n + 1)
    v = [0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            ui0 = u[i0]
            delta = INF
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign


def hungarian_match(cost) -> MatchResult:
    """Min-cost injective assignment on a [num_query, n_gt] cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got shape {cost.shape}")
    nq, ng = cost.shape
    if nq == 0 or ng == 0:
        return MatchResult([], 0.0)
    if not np.all(np.isfinite(cost)):
        raise NumericError("matching cost contains NaN or infinite entries")
    primary = _exact_integer_costs(cost)
    n_pairs = nq * ng
    shift = 1 << (n_pairs + 1)
    # -2^(N-1-rank): the set holding the smallest differing rank wins
    keyed = [[primary[q][g] * shift - (1 << (n_pairs - 1 - (q * ng + g))) for g in range(ng)]
             for q in range(nq)]
    if nq <= ng:
        cols = _solve(keyed, nq, ng)
        pairs = [(q, cols[q]) for q in range(nq)]
    else:
        transposed = [[keyed[q][g] for q in range(nq)] for g in range(ng)]
        rows = _solve(transposed, ng, nq)
        pairs = sorted((rows[g], g) for g in range(ng))
    return MatchResult(pairs, math.fsum(cost[q, g] for q, g in pairs))
