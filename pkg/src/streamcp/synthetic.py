"""Synthetic low-rank + outlier + noise streams with slowly drifting factors."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import ObservationMask, cp_construct


@dataclass
class SyntheticSpec:
    num_slices: int = 100
    dims: tuple = (40, 40)
    true_rank: int = 5
    drift: bool = True
    outlier_frac: float = 0.02
    outlier_magnitude: float = 10.0
    noise_var: float = 1e-2
    sample_frac: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.num_slices < 1:
            raise ValueError("num_slices must be >= 1")
        if not self.dims or min(self.dims) < 1:
            raise ValueError(f"invalid dims {self.dims}")
        if not 1 <= self.true_rank <= min(self.dims):
            raise ValueError("true_rank must lie in [1, min(dims)]")
        if not 0.0 <= self.outlier_frac < 1.0:
            raise ValueError("outlier_frac must lie in [0, 1)")
        if not 0.0 < self.sample_frac <= 1.0:
            raise ValueError("sample_frac must lie in (0, 1]")
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")


def recovery_spec(**overrides):
    """100 drifting rank-5 40x40 slices, 2% outliers of magnitude 10, noise variance 1e-2."""
    return SyntheticSpec(**{"num_slices": 100, "dims": (40, 40), "true_rank": 5,
                            "outlier_frac": 0.02, "outlier_magnitude": 10.0,
                            "noise_var": 1e-2, "sample_frac": 1.0, **overrides})


def rank_test_spec(**overrides):
    """100 drifting rank-10 50x50 slices, 10% outliers, 10% of entries sampled."""
    return SyntheticSpec(**{"num_slices": 100, "dims": (50, 50), "true_rank": 10,
                            "outlier_frac": 0.10, "outlier_magnitude": 10.0,
                            "noise_var": 1e-2, "sample_frac": 0.10, **overrides})


@dataclass
class SyntheticStream:
    """Per-slice observation, mask, low-rank truth and outlier truth.

    ``observed[t] == low_rank[t] + outliers[t] + noise[t]`` on every entry.
    """

    spec: SyntheticSpec
    observed: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    low_rank: list = field(default_factory=list)
    outliers: list = field(default_factory=list)
    noise: list = field(default_factory=list)

    def __len__(self):
        return len(self.observed)

    def __iter__(self):
        return iter(zip(self.observed, self.masks))

    def outlier_mask(self, t):
        return ObservationMask.from_indicator(self.outliers[t] != 0)


def generate_drifting_stream(spec):
    """Draw a stream whose factors move from one random set to another.

    Slice ``t = 1..num_slices`` uses factors ``(1 - t/T) P + (t/T) Q`` (or
    ``P`` when drift is off); each low-rank slice is rescaled so its mean
    absolute entry is 1.  Outliers sit on ``round(outlier_frac * size)``
    uniformly chosen entries with random sign; the mask keeps
    ``round(sample_frac * size)`` uniformly chosen entries.
    """
    rng = np.random.default_rng(spec.seed)
    dims = spec.dims
    size = int(np.prod(dims))
    p = [rng.standard_normal((d, spec.true_rank)) for d in dims]
    q = [rng.standard_normal((d, spec.true_rank)) for d in dims]
    n_out = int(round(spec.outlier_frac * size))
    n_obs = int(round(spec.sample_frac * size))
    noise_std = np.sqrt(spec.noise_var)

    out = SyntheticStream(spec)
    for t in range(1, spec.num_slices + 1):
        s = t / spec.num_slices if spec.drift else 0.0
        low = cp_construct([(1.0 - s) * pk + s * qk for pk, qk in zip(p, q)])
        low = low / np.mean(np.abs(low))

        outliers = np.zeros(dims)
        pos = rng.choice(size, size=n_out, replace=False)
        outliers.ravel()[pos] = spec.outlier_magnitude * rng.choice([-1.0, 1.0], size=n_out)

        noise = noise_std * rng.standard_normal(dims)
        observed = low + outliers + noise

        if n_obs == size:
            mask = ObservationMask.full(dims)
        else:
            mask = ObservationMask(dims, np.sort(rng.choice(size, size=n_obs, replace=False)))

        out.observed.append(observed)
        out.masks.append(mask)
        out.low_rank.append(low)
        out.outliers.append(outliers)
        out.noise.append(noise)
    return out


def generate_rank_test_stream(spec=None):
    return generate_drifting_stream(spec or rank_test_spec())
