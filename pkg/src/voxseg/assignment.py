"""Exact minimum-cost bipartite assignment (rectangular Hungarian method).

Solves min over injective sigma of sum_j cost[j, sigma(j)] for an R x C
matrix with R <= C, via shortest augmenting paths with dual potentials
(O(R^2 * C)).  Ties between equally cheap assignments are broken
deterministically toward the lexicographically smallest column sequence
(row 0 gets the lowest column index it can have in any optimal solution,
then row 1, and so on).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError


@dataclass
class Assignment:
    """Injective map from rows (ground-truth segments) to columns (queries)."""

    column_of: np.ndarray  # int64 (R,)
    total_cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(j, int(c)) for j, c in enumerate(self.column_of)]


def _solve_min_cost(cost: np.ndarray) -> np.ndarray:
    """Augmenting-path assignment; returns column_of rows, no tie policy."""
    r_n, c_n = cost.shape
    inf = np.inf
    # potentials over (virtual 0-row +) columns, 1-indexed columns internally
    u = np.zeros(r_n + 1)
    v = np.zeros(c_n + 1)
    way = np.zeros(c_n + 1, dtype=np.int64)
    match = np.zeros(c_n + 1, dtype=np.int64)  # column -> row (1-indexed), 0 = free

    for i in range(1, r_n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(c_n + 1, inf)
        used = np.zeros(c_n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            for j in range(1, c_n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(c_n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    column_of = np.zeros(r_n, dtype=np.int64)
    for j in range(1, c_n + 1):
        if match[j]:
            column_of[match[j] - 1] = j - 1
    return column_of


def _assignment_cost(cost: np.ndarray, column_of: np.ndarray) -> float:
    # summed in fixed row order so equal-cost ties compare exactly
    total = 0.0
    for j, c in enumerate(column_of):
        total += float(cost[j, c])
    return total


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective assignment of all rows to distinct columns.

    Requires R <= C and finite entries.  Among all optimal assignments the
    lexicographically smallest column sequence is returned (fix row 0 to
    its lowest optimal column, re-solve, and so on), so results are
    deterministic even with tied or duplicated columns.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise DimensionError(f"cost must be 2-D, got shape {cost.shape}")
    r_n, c_n = cost.shape
    if r_n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    if r_n > c_n:
        raise DimensionError(f"more rows than columns: {r_n} > {c_n}")
    if not np.isfinite(cost).all():
        raise NumericError("non-finite entry in cost matrix")

    best_cols = _solve_min_cost(cost)
    best_total = _assignment_cost(cost, best_cols)

    # Lexicographic tie-break: lock rows in order to the smallest column
    # that still admits an optimal completion.  Candidate totals are summed
    # in the same fixed row order as best_total, so equality is exact.
    locked: list[int] = []
    free_cols = list(range(c_n))
    for row in range(r_n):
        chosen = None
        for col in sorted(free_cols):
            candidate = np.empty(r_n, dtype=np.int64)
            candidate[:row] = locked
            candidate[row] = col
            if row < r_n - 1:
                rest = [c for c in free_cols if c != col]
                sub_cols = _solve_min_cost(cost[row + 1:, rest])
                candidate[row + 1:] = [rest[c] for c in sub_cols]
            if _assignment_cost(cost, candidate) == best_total:
                chosen = col
                break
        if chosen is None:
            # equal-cost optima whose row-order float sums differ by rounding;
            # keep the direct solution (still deterministic)
            return Assignment(best_cols, best_total)
        locked.append(chosen)
        free_cols.remove(chosen)

    column_of = np.asarray(locked, dtype=np.int64)
    return Assignment(column_of, _assignment_cost(cost, column_of))
