import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from streamcp.tensor import (DimensionError, ObservationMask, cp_construct, frobenius_norm,
                             generalized_inner_product, hadamard, inner_product, khatri_rao,
                             khatri_rao_excluding, sampled_inner_product, subtensor_fix_index,
                             unfold)


def cp_loop(factors):
    """Entry-by-entry CP oracle."""
    dims = tuple(f.shape[0] for f in factors)
    out = np.zeros(dims)
    for idx in itertools.product(*(range(d) for d in dims)):
        out[idx] = sum(np.prod([f[i, r] for f, i in zip(factors, idx)])
                       for r in range(factors[0].shape[1]))
    return out


class TestInnerProducts:
    def test_all_ones(self):
        assert inner_product(np.ones((2, 2)), np.ones((2, 2))) == 4.0

    def test_zero(self):
        assert inner_product(np.zeros((2, 3)), np.arange(6.0).reshape(2, 3)) == 0.0

    def test_hand_value(self):
        assert inner_product([[1, 2], [3, 4]], [[5, 6], [7, 8]]) == 70.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            inner_product(np.ones((2, 2)), np.ones((2, 3)))

    def test_frobenius(self):
        assert frobenius_norm(np.zeros((2, 2))) == 0.0
        assert frobenius_norm([3.0]) == 3.0
        assert frobenius_norm([3.0, 4.0]) == 5.0

    def test_generalized(self):
        assert generalized_inner_product([np.ones(5)] * 3) == 5.0
        assert generalized_inner_product([np.ones(3), np.zeros(3)]) == 0.0
        assert generalized_inner_product([[1, 2], [3, 4], [5, 6]]) == 63.0

    def test_generalized_length_mismatch(self):
        with pytest.raises(DimensionError):
            generalized_inner_product([np.ones(2), np.ones(3)])

    def test_sampled(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        assert sampled_inner_product(b, a, ObservationMask.empty((2, 2))) == 0.0
        assert sampled_inner_product(b, a, ObservationMask.full((2, 2))) == 70.0
        assert sampled_inner_product(b, a, ObservationMask.from_indices((2, 2), [(0, 0)])) == 5.0

    def test_sampled_mask_mismatch(self):
        with pytest.raises(DimensionError):
            sampled_inner_product(np.ones((2, 2)), np.ones((2, 2)), ObservationMask.full((3, 2)))


class TestHadamardKhatriRao:
    def test_hadamard(self):
        np.testing.assert_array_equal(hadamard([[[1, 2], [3, 4]], [[5, 6], [7, 8]]]),
                                      [[5, 12], [21, 32]])

    def test_hadamard_mismatch(self):
        with pytest.raises(DimensionError):
            hadamard([np.ones((2, 2)), np.ones((2, 3))])

    def test_single_matrix(self):
        a = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(khatri_rao([a]), a)

    def test_row_convention(self):
        # row (i, j) with the last index fastest holds a[i] * b[j]
        np.testing.assert_array_equal(khatri_rao([[[1], [2]], [[3], [4]]]).ravel(), [3, 4, 6, 8])

    def test_all_ones(self):
        np.testing.assert_array_equal(khatri_rao([np.ones((2, 2)), np.ones((3, 2))]), np.ones((6, 2)))

    def test_column_mismatch(self):
        with pytest.raises(DimensionError):
            khatri_rao([np.ones((2, 2)), np.ones((2, 3))])

    def test_matches_unfolding_of_cp(self):
        rng = np.random.default_rng(0)
        fs = [rng.standard_normal((d, 3)) for d in (2, 3, 4)]
        x = cp_construct(fs)
        for n in range(3):
            np.testing.assert_allclose(unfold(x, n), fs[n] @ khatri_rao_excluding(fs, n).T,
                                       rtol=1e-12, atol=1e-12)

    def test_excluding(self):
        rng = np.random.default_rng(1)
        a, b, c = (rng.standard_normal((d, 2)) for d in (2, 3, 4))
        np.testing.assert_array_equal(khatri_rao_excluding([a, b], 0), b)
        np.testing.assert_array_equal(khatri_rao_excluding([a, b, c], 1), khatri_rao([a, c]))
        with pytest.raises(IndexError):
            khatri_rao_excluding([a, b], 2)


class TestCPConstruct:
    def test_rank_one(self):
        np.testing.assert_array_equal(cp_construct([[[1], [2]], [[3], [4]]]), [[3, 4], [6, 8]])

    def test_zero_factor(self):
        rng = np.random.default_rng(2)
        out = cp_construct([rng.standard_normal((3, 2)), np.zeros((4, 2))])
        np.testing.assert_array_equal(out, np.zeros((3, 4)))

    def test_weight_masking(self):
        rng = np.random.default_rng(3)
        fs = [rng.standard_normal((d, 2)) for d in (3, 2, 2)]
        np.testing.assert_allclose(cp_construct(fs, [1.0, 0.0]), cp_construct([f[:, :1] for f in fs]))

    def test_rank_mismatch(self):
        with pytest.raises(DimensionError):
            cp_construct([np.ones((2, 2)), np.ones((2, 3))])

    @settings(max_examples=30, deadline=None)
    @given(dims=st.lists(st.integers(1, 3), min_size=1, max_size=4), rank=st.integers(1, 3),
           seed=st.integers(0, 2 ** 16))
    def test_against_loop(self, dims, rank, seed):
        rng = np.random.default_rng(seed)
        fs = [rng.standard_normal((d, rank)) for d in dims]
        np.testing.assert_allclose(cp_construct(fs), cp_loop(fs).reshape(dims), rtol=1e-12, atol=1e-12)


class TestUnfoldSubtensor:
    def test_vector(self):
        np.testing.assert_array_equal(unfold([1.0, 2.0, 3.0], 0), [[1.0], [2.0], [3.0]])

    def test_matrix(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(unfold(a, 0), a)
        np.testing.assert_array_equal(unfold(a, 1), a.T)

    def test_bad_mode(self):
        with pytest.raises(IndexError):
            unfold(np.ones((2, 2)), 2)

    def test_fix_index(self):
        a = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(subtensor_fix_index(a, 0, 1), [3.0, 4.0, 5.0])
        with pytest.raises(IndexError):
            subtensor_fix_index(a, 1, 3)

    def test_fix_index_matches_unfold_row(self):
        a = np.random.default_rng(4).standard_normal((2, 3, 4))
        for n in range(3):
            for i in range(a.shape[n]):
                np.testing.assert_array_equal(subtensor_fix_index(a, n, i).ravel(), unfold(a, n)[i])


class TestObservationMask:
    def test_roundtrip(self):
        m = ObservationMask.from_indices((2, 3), [(1, 2), (0, 1)])
        np.testing.assert_array_equal(m.flat, [1, 5])
        np.testing.assert_array_equal(m.coords, [[0, 1], [1, 2]])
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(m.gather(x), [1.0, 5.0])
        np.testing.assert_array_equal(m.scatter([1.0, 5.0]), x * m.indicator())

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            ObservationMask((2, 2), [1, 1])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            ObservationMask.from_indices((2, 2), [(2, 0)])

    def test_full_and_empty(self):
        assert len(ObservationMask.full((3, 4))) == 12
        assert len(ObservationMask.empty((3, 4))) == 0
