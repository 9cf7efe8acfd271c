import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from btard.vecmath import (
    LayoutError,
    PartitionLayout,
    SeededStream,
    exact_mean,
    fdot,
    fnorm,
    merge,
    random_unit_direction,
    split,
)


class TestLayout:
    @pytest.mark.parametrize("d,n,sizes", [(10, 3, (4, 3, 3)), (6, 6, (1,) * 6), (7, 2, (4, 3))])
    def test_sizes(self, d, n, sizes):
        assert PartitionLayout(d, n).sizes == sizes
        assert [len(p) for p in split(np.arange(d, dtype=float), n)] == list(sizes)

    def test_dimension_smaller_than_parts(self):
        with pytest.raises(LayoutError):
            split(np.zeros(3), 4)

    def test_offsets_and_bounds(self):
        lay = PartitionLayout(10, 3)
        assert lay.offsets == (0, 4, 7, 10)
        assert lay.bounds(1) == slice(4, 7)

    @given(st.integers(1, 300), st.integers(1, 40))
    def test_sizes_balanced(self, d, n):
        if d < n:
            d, n = n, d
        s = PartitionLayout(d, n).sizes
        assert sum(s) == d
        assert max(s) - min(s) <= 1
        assert list(s) == sorted(s, reverse=True)


class TestMerge:
    def test_round_trip(self):
        v = np.array([1.0, 2, 3, 4, 5])
        np.testing.assert_array_equal(merge(split(v, 2)), v)

    def test_empty(self):
        with pytest.raises(LayoutError):
            merge([])

    def test_swapped_sizes(self):
        with pytest.raises(LayoutError):
            merge([np.zeros(3), np.zeros(4)], PartitionLayout(7, 2))

    def test_sizes_out_of_order_without_layout(self):
        with pytest.raises(LayoutError):
            merge([np.zeros(3), np.zeros(4)])

    @given(st.integers(1, 200), st.integers(1, 30), st.integers(0, 2**31))
    def test_round_trip_bit_exact(self, d, n, seed):
        if d < n:
            d, n = n, d
        v = np.random.default_rng(seed).standard_normal(d) * 1e3
        out = merge(split(v, n), PartitionLayout(d, n))
        assert out.tobytes() == v.tobytes()


class TestReductions:
    def test_fdot_exact(self):
        a = np.array([1e16, 1.0, -1e16])
        assert fdot(a, np.ones(3)) == 1.0

    def test_fnorm(self):
        assert fnorm(np.array([3.0, 4.0])) == 5.0

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.randoms())
    def test_fdot_order_independent(self, xs, rnd):
        a = np.array(xs)
        perm = list(range(len(xs)))
        rnd.shuffle(perm)
        assert fdot(a, a) == fdot(a[perm], a[perm])

    def test_exact_mean_matches_slices(self):
        rows = [np.random.default_rng(i).standard_normal(11) for i in range(7)]
        full = exact_mean(rows)
        lay = PartitionLayout(11, 3)
        pieces = [exact_mean([r[lay.bounds(j)] for r in rows]) for j in range(3)]
        assert merge(pieces, lay).tobytes() == full.tobytes()

    def test_exact_mean_empty(self):
        with pytest.raises(ValueError):
            exact_mean([])


class TestSeededStream:
    def test_reproducible(self):
        a, b = SeededStream(b"seed"), SeededStream(b"seed")
        np.testing.assert_array_equal(a.normal(10_000), b.normal(10_000))

    def test_seed_types_distinct(self):
        assert not np.array_equal(SeededStream(1).uniform(4), SeededStream(2).uniform(4))
        np.testing.assert_array_equal(SeededStream("x").uniform(4), SeededStream(b"x").uniform(4))

    def test_bad_seed_type(self):
        with pytest.raises(TypeError):
            SeededStream(1.5)

    def test_uniform_open_interval(self):
        u = SeededStream(7).uniform(100_000)
        assert u.min() > 0 and u.max() < 1
        assert abs(u.mean() - 0.5) < 4 * np.sqrt(1 / 12 / 1e5)

    def test_normal_moments(self):
        z = SeededStream(3).normal(200_001)
        assert z.shape == (200_001,)
        assert abs(z.mean()) < 4 / np.sqrt(2e5)
        assert abs(z.var() - 1) < 0.02

    def test_integer_unbiased_range(self):
        s = SeededStream(5)
        draws = [s.integer(6) for _ in range(6000)]
        counts = np.bincount(draws, minlength=6)
        assert counts.min() > 850 and counts.max() < 1150
        with pytest.raises(ValueError):
            s.integer(0)

    def test_sample_without_replacement(self):
        s = SeededStream(9)
        pick = s.sample_without_replacement(range(16), 4)
        assert len(set(pick)) == 4 and all(0 <= p < 16 for p in pick)
        with pytest.raises(ValueError):
            s.sample_without_replacement(range(3), 4)

    def test_bytes_length(self):
        assert len(SeededStream(0).bytes(13)) == 13


class TestUnitDirection:
    def test_deterministic(self):
        lay = PartitionLayout(50, 4)
        np.testing.assert_array_equal(random_unit_direction(b"r", lay), random_unit_direction(b"r", lay))

    @given(st.integers(1, 400), st.integers(1, 20), st.binary(min_size=1, max_size=8))
    def test_part_norms_are_one(self, d, n, seed):
        if d < n:
            d, n = n, d
        lay = PartitionLayout(d, n)
        z = random_unit_direction(seed, lay)
        for j in range(n):
            assert abs(np.linalg.norm(z[lay.bounds(j)]) - 1.0) < 1e-12

    def test_distinct_seeds_nearly_orthogonal(self):
        lay = PartitionLayout(512, 1)
        cos = [float(np.dot(random_unit_direction(2 * t, lay), random_unit_direction(2 * t + 1, lay)))
               for t in range(100)]
        assert max(abs(c) for c in cos) < 0.2
