import numpy as np
import pytest

from streamcp.synthetic import (SyntheticSpec, generate_drifting_stream, generate_rank_test_stream,
                                rank_test_spec, recovery_spec)


def small(**kw):
    base = dict(num_slices=6, dims=(12, 10), true_rank=3, seed=0)
    base.update(kw)
    return generate_drifting_stream(SyntheticSpec(**base))


class TestSpecs:
    def test_recovery_defaults(self):
        s = recovery_spec()
        assert (s.num_slices, s.dims, s.true_rank) == (100, (40, 40), 5)
        assert (s.outlier_frac, s.outlier_magnitude, s.noise_var, s.sample_frac) == (0.02, 10.0, 1e-2, 1.0)

    def test_rank_test_parameters(self):
        s = rank_test_spec()
        assert (s.num_slices, s.dims, s.true_rank) == (100, (50, 50), 10)
        assert (s.outlier_frac, s.outlier_magnitude, s.sample_frac) == (0.10, 10.0, 0.10)

    @pytest.mark.parametrize("bad", [dict(true_rank=20), dict(outlier_frac=1.0),
                                     dict(sample_frac=0.0), dict(noise_var=-1.0), dict(num_slices=0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            SyntheticSpec(**{"dims": (10, 10), **bad})


class TestStream:
    def test_decomposition_identity(self):
        s = small()
        for t in range(len(s)):
            np.testing.assert_array_equal(s.observed[t], s.low_rank[t] + s.outliers[t] + s.noise[t])

    def test_outlier_counts_and_values(self):
        s = small(outlier_frac=0.05, outlier_magnitude=7.0)
        for out in s.outliers:
            assert np.count_nonzero(out) == round(0.05 * 120)
            np.testing.assert_array_equal(np.abs(out[out != 0]), 7.0)

    def test_unit_mean_magnitude(self):
        for low in small().low_rank:
            assert np.mean(np.abs(low)) == pytest.approx(1.0, rel=1e-12)

    def test_static_noiseless_is_low_rank(self):
        s = small(drift=False, noise_var=0.0, outlier_frac=0.0)
        for low in s.low_rank:
            np.testing.assert_array_equal(low, s.low_rank[0])
            sv = np.linalg.svd(low, compute_uv=False)
            assert np.all(sv[3:] <= 1e-10 * sv[0])

    def test_drift_moves_slices(self):
        s = small()
        assert not np.allclose(s.low_rank[0], s.low_rank[-1])

    def test_mask_size_and_redraw(self):
        s = small(sample_frac=0.15)
        assert all(len(m) == round(0.15 * 120) for m in s.masks)
        assert s.masks[0] != s.masks[1]

    def test_noise_variance(self):
        s = generate_drifting_stream(SyntheticSpec(num_slices=70, dims=(40, 40), noise_var=0.04, seed=1))
        var = np.var(np.concatenate([n.ravel() for n in s.noise]))
        assert var == pytest.approx(0.04, rel=0.1)

    def test_seed_determinism(self):
        a, b, c = small(seed=5), small(seed=5), small(seed=6)
        np.testing.assert_array_equal(a.observed[3], b.observed[3])
        assert a.masks[2] == b.masks[2]
        assert not np.array_equal(a.observed[3], c.observed[3])

    def test_rank_test_stream(self):
        s = generate_rank_test_stream(rank_test_spec(num_slices=2))
        assert s.observed[0].shape == (50, 50)
        assert len(s.masks[0]) == 250
        assert np.count_nonzero(s.outliers[0]) == 250

    def test_outlier_mask(self):
        s = small()
        assert len(s.outlier_mask(0)) == np.count_nonzero(s.outliers[0])
