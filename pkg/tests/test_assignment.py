"""Hungarian solver vs exhaustive enumeration."""

import itertools
from functools import lru_cache

import numpy as np
import pytest

from voxseg.assignment import hungarian
from voxseg.errors import DimensionError, NumericError


@lru_cache(maxsize=None)
def _perms(r, c):
    return np.array(list(itertools.permutations(range(c), r)), dtype=np.int64)


def brute_force_min(cost):
    """Exact minimum over all injections, vectorized over the permutations."""
    r, c = cost.shape
    perms = _perms(r, c)
    totals = cost[np.arange(r)[None, :], perms].sum(axis=1)
    return float(totals.min())


class TestHungarian:
    def test_identity_favoring(self):
        cost = np.ones((3, 3)) - np.eye(3)
        a = hungarian(cost)
        assert list(a.column_of) == [0, 1, 2]
        assert a.total_cost == 0.0

    def test_two_by_two_hand_case(self):
        a = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert list(a.column_of) == [0, 1]
        assert a.total_cost == 2.0

    def test_rectangular(self):
        cost = np.array([[5.0, 1.0, 9.0, 2.0],
                         [4.0, 6.0, 3.0, 7.0]])
        a = hungarian(cost)
        assert a.total_cost == brute_force_min(cost)
        assert len(set(a.column_of)) == 2

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            r = int(rng.integers(1, 8))
            c = int(rng.integers(r, 10))
            cost = rng.uniform(-10, 10, size=(r, c))
            a = hungarian(cost)
            assert sorted(set(a.column_of.tolist())) == sorted(a.column_of.tolist())
            assert a.total_cost == brute_force_min(cost)

    def test_tie_broken_to_lowest_column(self):
        # identical columns: row 0 must take the earlier one
        cost = np.array([[3.0, 3.0, 7.0],
                         [1.0, 1.0, 9.0]])
        a = hungarian(cost)
        assert list(a.column_of) == [0, 1]

    def test_all_equal_matrix_is_identity_assignment(self):
        a = hungarian(np.full((4, 6), 2.5))
        assert list(a.column_of) == [0, 1, 2, 3]

    def test_empty(self):
        a = hungarian(np.zeros((0, 4)))
        assert a.column_of.size == 0
        assert a.total_cost == 0.0

    def test_more_rows_than_columns(self):
        with pytest.raises(DimensionError):
            hungarian(np.zeros((3, 2)))

    def test_non_finite_entry(self):
        with pytest.raises(NumericError):
            hungarian(np.array([[np.nan, 1.0]]))
