"""Variational posterior containers.

The mean-field posterior factorizes into Gaussian rows for every factor
matrix (the last one indexes time inside the window), an entrywise Gaussian
for the outliers of the current slice, and Gamma posteriors for the rank
precisions ``lambda``, outlier precisions ``gamma`` and noise precision
``tau``.
"""

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .tensor import ObservationMask


def gamma_mean(a, b):
    """Mean ``a / b`` of a Gamma(shape=a, rate=b) distribution."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("Gamma parameters must be strictly positive")
    out = a / b
    return float(out) if out.ndim == 0 else out


@dataclass
class HyperPriors:
    """Shape/rate constants of the Gamma hyperpriors.

    All default to the vague value 1e-6 except ``a0_gamma``.  An entry with
    residual ``r`` is handed to the sparse term once ``tau * r**2`` exceeds
    ``2*k - 1 + 2*sqrt(k*(k - 1))`` with ``k = 2*a0_gamma + 1``.  A vague
    shape puts that threshold at one noise variance, so ordinary noise is
    absorbed, ``tau`` grows and the low-rank fit degrades.  ``a0_gamma = 2``
    moves it to about 4.2 noise standard deviations.
    """

    a0_tau: float = 1e-6
    b0_tau: float = 1e-6
    c0: float = 1e-6
    d0: float = 1e-6
    a0_gamma: float = 2.0
    b0_gamma: float = 1e-6

    def __post_init__(self):
        for name, value in vars(self).items():
            if not value > 0:
                raise ValueError(f"hyperprior {name} must be > 0, got {value}")


class GammaPosterior:
    """Array of independent Gamma(shape=a, rate=b) factors.

    Used for the per-rank ``lambda``, the per-entry ``gamma`` and the
    scalar ``tau``.
    """

    def __init__(self, a, b):
        a = np.array(a, dtype=np.float64)
        b = np.array(b, dtype=np.float64)
        a, b = np.broadcast_arrays(a, b)
        if np.any(~(a > 0)) or np.any(~(b > 0)):
            raise ValueError("Gamma posterior parameters must be strictly positive")
        self.a = a.copy()
        self.b = b.copy()

    @property
    def mean(self):
        return self.a / self.b

    @property
    def mean_log(self):
        return digamma(self.a) - np.log(self.b)

    def entropy(self):
        a, b = self.a, self.b
        return a - np.log(b) + gammaln(a) + (1.0 - a) * digamma(a)

    def expected_log_density(self, a0, b0):
        """``E_q[ln Ga(x | a0, b0)]`` elementwise."""
        return a0 * np.log(b0) - gammaln(a0) + (a0 - 1.0) * self.mean_log - b0 * self.mean

    def take(self, keep):
        return GammaPosterior(self.a[keep], self.b[keep])

    def __repr__(self):
        return f"GammaPosterior(a={self.a!r}, b={self.b!r})"


def expected_lambda_diag(lam):
    """``E[Lambda]`` as an ``R x R`` diagonal matrix."""
    return np.diag(lam.mean)


class FactorPosterior:
    """Gaussian rows ``N(mean[i], cov[i])`` of one factor matrix.

    ``second_moment[i]`` caches ``vec(mean_i mean_i^T + cov_i)`` as a
    length ``R**2`` row; call :meth:`refresh` after touching ``mean`` or
    ``cov``.
    """

    def __init__(self, mean, cov):
        self.mean = np.array(mean, dtype=np.float64)
        self.cov = np.array(cov, dtype=np.float64)
        if self.mean.ndim != 2:
            raise ValueError("factor mean must be a matrix")
        rows, rank = self.mean.shape
        if self.cov.shape != (rows, rank, rank):
            raise ValueError(f"covariance stack must be {(rows, rank, rank)}, got {self.cov.shape}")
        self.second_moment = None
        self.refresh()

    @classmethod
    def from_mean(cls, mean, row_cov):
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.broadcast_to(row_cov, (mean.shape[0],) + np.shape(row_cov)).copy()
        return cls(mean, cov)

    @property
    def rows(self):
        return self.mean.shape[0]

    @property
    def rank(self):
        return self.mean.shape[1]

    def refresh(self):
        outer = self.mean[:, :, None] * self.mean[:, None, :]
        self.second_moment = (outer + self.cov).reshape(self.rows, self.rank ** 2)
        return self

    def column_sq_norms(self):
        """``E[a_r^T a_r]`` for every column ``r``."""
        return np.sum(self.mean ** 2, axis=0) + np.einsum("irr->r", self.cov)

    def take_columns(self, keep):
        return FactorPosterior(self.mean[:, keep], self.cov[:, keep][:, :, keep])

    def take_rows(self, keep):
        return FactorPosterior(self.mean[keep], self.cov[keep])

    def append_row(self, mean, cov):
        self.mean = np.vstack([self.mean, np.asarray(mean, dtype=np.float64)[None]])
        self.cov = np.concatenate([self.cov, np.asarray(cov, dtype=np.float64)[None]])
        return self.refresh()


def refresh_row_second_moments(fp):
    return fp.refresh()


@dataclass
class SparsePosterior:
    """Entrywise Gaussian over the outliers on the current slice's mask."""

    mask: ObservationMask
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).copy()
        self.var = np.asarray(self.var, dtype=np.float64).copy()
        n = len(self.mask)
        if self.mean.shape != (n,) or self.var.shape != (n,):
            raise ValueError("sparse posterior arrays must align with the mask")
        if np.any(~(self.var > 0)):
            raise ValueError("outlier variances must be positive")

    def dense_mean(self):
        return self.mask.scatter(self.mean)


@dataclass
class WindowState:
    """Past de-sparsified slices kept for the sliding window.

    ``slices`` holds ``(D_t, mask_t)`` pairs oldest first.  While a slice is
    being processed the window holds at most ``capacity - 1`` past slices;
    between slices it holds at most ``capacity`` and its length equals the
    number of temporal factor rows.
    """

    capacity: int
    mu: float
    slices: deque = field(default_factory=deque)
    time_index: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("window capacity must be >= 1")
        if not 0.0 < self.mu <= 1.0:
            raise ValueError("forgetting factor must lie in (0, 1]")
        self.slices = deque(self.slices)

    def __len__(self):
        return len(self.slices)

    def push(self, slice_, mask):
        self.slices.append((np.asarray(slice_, dtype=np.float64), mask))
        self.time_index += 1

    def evict_oldest(self):
        return self.slices.popleft()

    def weights(self, current=True):
        """Forgetting weights ``mu**(T - t)`` oldest first, current slice last."""
        k = len(self.slices)
        powers = np.arange(k, -1 if current else 0, -1)
        return self.mu ** powers


@dataclass
class ModelState:
    """All posterior factors plus the fixed hyperprior constants."""

    factors: list
    sparse: SparsePosterior
    lam: GammaPosterior
    gamma: GammaPosterior
    tau: GammaPosterior
    priors: HyperPriors = field(default_factory=HyperPriors)

    def __post_init__(self):
        ranks = {f.rank for f in self.factors}
        if len(ranks) != 1:
            raise ValueError(f"factor posteriors disagree on the rank: {sorted(ranks)}")
        if self.lam.a.shape != (self.rank,):
            raise ValueError("lambda posterior must have one entry per rank column")

    @property
    def rank(self):
        return self.factors[0].rank

    @property
    def order(self):
        """Number of non-temporal modes ``N``."""
        return len(self.factors) - 1

    @property
    def dims(self):
        return tuple(f.rows for f in self.factors[:-1])

    @property
    def temporal(self):
        return self.factors[-1]

    def refresh(self):
        for f in self.factors:
            f.refresh()
        return self

    def copy(self):
        return copy.deepcopy(self)

    def drop_columns(self, keep):
        keep = np.asarray(keep)
        self.factors = [f.take_columns(keep) for f in self.factors]
        self.lam = self.lam.take(keep)

    def invariant_violations(self, sym_tol=1e-10):
        """Human-readable list of broken structural invariants (empty if none)."""
        problems = []
        for n, f in enumerate(self.factors):
            if not np.all(np.isfinite(f.mean)) or not np.all(np.isfinite(f.cov)):
                problems.append(f"mode {n}: non-finite factor posterior")
                continue
            asym = np.max(np.abs(f.cov - np.swapaxes(f.cov, 1, 2)), initial=0.0)
            if asym > sym_tol:
                problems.append(f"mode {n}: covariance asymmetry {asym:.3g}")
            try:
                np.linalg.cholesky(f.cov)
            except np.linalg.LinAlgError:
                problems.append(f"mode {n}: covariance not positive definite")
            expected = (f.mean[:, :, None] * f.mean[:, None, :] + f.cov).reshape(f.rows, -1)
            if not np.allclose(f.second_moment, expected, rtol=1e-12, atol=1e-12):
                problems.append(f"mode {n}: stale second-moment cache")
        for name in ("lam", "gamma", "tau"):
            g = getattr(self, name)
            if np.any(~(g.a > 0)) or np.any(~(g.b > 0)):
                problems.append(f"{name}: non-positive Gamma parameter")
        if np.any(~(self.sparse.var > 0)):
            problems.append("sparse: non-positive variance")
        return problems
