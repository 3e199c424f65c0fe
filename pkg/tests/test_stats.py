import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pinchgate.stats import mapsswe, normal_two_tailed_p, read_error_counts, write_error_counts


class TestNormalTail:
    def test_zero(self):
        assert normal_two_tailed_p(0.0) == 1.0

    def test_infinite(self):
        assert normal_two_tailed_p(math.inf) == 0.0
        assert normal_two_tailed_p(40.0) < 1e-300

    def test_critical_value(self):
        assert normal_two_tailed_p(1.959964) == pytest.approx(0.05, abs=1e-4)
        assert normal_two_tailed_p(-1.959964) == pytest.approx(0.05, abs=1e-4)

    @given(st.floats(0, 10), st.floats(0, 10))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert normal_two_tailed_p(hi) <= normal_two_tailed_p(lo)


class TestMapsswe:
    def test_identical_lists(self):
        r = mapsswe([1, 2, 0, 3], [1, 2, 0, 3])
        assert r.z == 0.0 and not r.significant

    def test_constant_difference_is_degenerate_significant(self):
        r = mapsswe([2, 3, 4, 5], [1, 2, 3, 4])
        assert r.degenerate and r.significant and r.mean_diff == 1.0

    def test_hand_example(self):
        r = mapsswe([3, 1, 4, 2, 5], [1, 1, 2, 2, 3])
        assert r.mean_diff == pytest.approx(1.2)
        assert r.z == pytest.approx(1.2 / math.sqrt(1.2 / 5), abs=1e-12)
        assert r.z == pytest.approx(2.4495, abs=1e-4)
        assert r.p == pytest.approx(0.0143, abs=1e-3)
        assert r.significant

    def test_rejects_short_or_mismatched(self):
        with pytest.raises(ValueError):
            mapsswe([1], [2])
        with pytest.raises(ValueError):
            mapsswe([1, 2], [1, 2, 3])


pairs = st.integers(2, 40).flatmap(
    lambda n: st.tuples(st.lists(st.integers(0, 9), min_size=n, max_size=n), st.lists(st.integers(0, 9), min_size=n, max_size=n))
)


@given(pairs)
def test_antisymmetry(ab):
    a, b = ab
    r1, r2 = mapsswe(a, b), mapsswe(b, a)
    assert r1.z == -r2.z or (r1.z == 0 and r2.z == 0)
    assert r1.p == r2.p


@given(pairs, st.integers(0, 20))
def test_shift_invariance(ab, c):
    a, b = ab
    r1 = mapsswe(a, b)
    r2 = mapsswe([x + c for x in a], [x + c for x in b])
    assert r1.z == r2.z


def test_error_count_files_round_trip(tmp_path):
    path = tmp_path / "errs.txt"
    write_error_counts(path, [0, 3, 1])
    assert read_error_counts(path) == [0, 3, 1]
    path.write_text("1\nx\n")
    with pytest.raises(ValueError):
        read_error_counts(path)
