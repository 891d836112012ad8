"""Slice-by-slice driver: initialization, inference loop, window upkeep,
outlier removal, rank pruning and accuracy metrics."""

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import updates
from .state import (FactorPosterior, GammaPosterior, HyperPriors, ModelState,
                    SparsePosterior, WindowState)
from .tensor import DimensionError, ObservationMask, as_tensor, cp_construct, unfold

log = logging.getLogger(__name__)


@dataclass
class EngineConfig:
    """Engine settings.

    ``window`` counts the current slice, so at most ``window - 1`` past
    slices are refit alongside it.  With ``restart_while_filling`` every
    slice that arrives before the window is full starts from a fresh
    initialization over all slices seen so far instead of the previous
    posterior: a lone sparsely sampled slice cannot support the full rank,
    and columns that collapse early never come back.

    ``include_temporal_in_shape`` counts the temporal rows in the shape of
    the ``lambda`` update as well as in its rate.  Only then is that update
    the exact maximizer of the bound, and only then does an unused column's
    precision grow until the column can be pruned; with the spatial rows
    alone it drifts down and the column keeps a unit-size variance.
    """

    rank_init: int = 10
    window: int = 20
    mu: float = 0.8
    tol: float = 1e-4
    max_sweeps: int = 100
    prune_threshold: float = 1e-2
    tau_mode: str = "current_slice_only"
    rng_seed: int = 0
    include_temporal_in_shape: bool = True
    restart_while_filling: bool = True
    priors: HyperPriors = field(default_factory=HyperPriors)

    def __post_init__(self):
        if isinstance(self.priors, dict):
            self.priors = HyperPriors(**self.priors)
        if self.rank_init < 1:
            raise ValueError("rank_init must be >= 1")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 < self.mu <= 1.0:
            raise ValueError("forgetting factor mu must lie in (0, 1]")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.prune_threshold < 0:
            raise ValueError("prune_threshold must be >= 0")
        if self.tau_mode not in updates.TAU_MODES:
            raise ValueError(f"tau_mode must be one of {updates.TAU_MODES}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SliceResult:
    time_index: int
    low_rank_slice: np.ndarray
    sparse_mean: SparsePosterior
    rank_estimate: int
    relative_error: float | None
    sweeps_used: int
    elbo_trace: tuple
    residual_error: float | None = None
    converged: bool = False


def relative_error(recon, truth):
    """``||truth - recon||_F / ||truth||_F``."""
    recon, truth = as_tensor(recon), as_tensor(truth)
    if recon.shape != truth.shape:
        raise DimensionError(f"shape mismatch {recon.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth.ravel())
    if denom == 0:
        raise ValueError("relative error undefined for an all-zero reference")
    return float(np.linalg.norm((truth - recon).ravel()) / denom)


def residual_error(x, recon, sparse, mask):
    """``||(X - recon - S)_mask||_F / ||X_mask||_F``.

    ``sparse`` is either a dense tensor or a :class:`SparsePosterior`
    (its mean is used).
    """
    x, recon = as_tensor(x), as_tensor(recon)
    if x.shape != recon.shape or mask.dims != x.shape:
        raise DimensionError("tensor/mask shapes disagree")
    if isinstance(sparse, SparsePosterior):
        s = sparse.mask.scatter(sparse.mean)
    else:
        s = as_tensor(sparse)
    xo = mask.gather(x)
    denom = np.linalg.norm(xo)
    if denom == 0:
        raise ValueError("residual error undefined for an all-zero observation")
    return float(np.linalg.norm(xo - mask.gather(recon) - mask.gather(s)) / denom)


def rank_cap(dims):
    """Largest admissible CP rank ``min_n prod_{j != n} I_j``."""
    total = int(np.prod(dims))
    return min(total // d for d in dims)


INIT_OUTLIER_CUTOFF = 5.0


def _init_inliers(obs, cutoff=INIT_OUTLIER_CUTOFF):
    """Entries within ``cutoff`` robust standard deviations of the median.

    Gross outliers would otherwise claim leading singular vectors of the
    starting SVD, and the factors would keep explaining them.
    """
    keep = np.ones(obs.shape, dtype=bool)
    if obs.size == 0:
        return keep
    med = np.median(obs)
    scale = 1.4826 * np.median(np.abs(obs - med))
    if scale > 0:
        keep = np.abs(obs - med) <= cutoff * scale
    return keep


def start_sparse(resid, mask, tau_mean, priors, cutoff=INIT_OUTLIER_CUTOFF):
    """Outlier posterior and precisions for a new slice.

    Entries whose residual ``resid`` under the current model is flagged by
    the median/MAD rule start as outliers carrying that residual, all
    others at zero; ``gamma`` takes its update value given that split.
    """
    keep = _init_inliers(resid, cutoff)
    s_mean = np.where(keep, 0.0, resid)
    s_var = np.full(len(mask), 1.0 / tau_mean)
    gamma = GammaPosterior(np.full(len(mask), priors.a0_gamma + 0.5),
                           priors.b0_gamma + 0.5 * (s_mean ** 2 + s_var))
    return SparsePosterior(mask, s_mean, s_var), gamma


def _balance_columns(means):
    """Rescale each CP column so its RMS entry is the same in every mode.

    The CP product is unchanged.  Without this the unit starting covariance
    swamps whichever mode happens to carry a small scale.
    """
    rms = np.stack([np.sqrt(np.mean(a ** 2, axis=0)) for a in means])
    ok = np.all(rms > 0, axis=0)
    target = np.exp(np.mean(np.log(np.where(ok, rms, 1.0)), axis=0))
    scale = np.where(ok, target / np.where(ok, rms, 1.0), 1.0)
    return [a * s for a, s in zip(means, scale)]


def _pool(slices):
    """Entrywise average of the observed values across ``(values, mask)`` slices."""
    dims = slices[0][1].dims
    total = np.zeros(dims)
    count = np.zeros(dims)
    for values, mask in slices:
        total.ravel()[mask.flat] += mask.gather(values)
        count.ravel()[mask.flat] += 1.0
    seen = count > 0
    total[seen] /= count[seen]
    return total, ObservationMask.from_indicator(seen)


def initialize(slices, config, rng=None):
    """Posterior for a window of ``(values, mask)`` slices, current slice last.

    Factor means are ``U Sigma^{1/2}`` from the SVD of each mode-n
    unfolding of the zero-filled data (averaged entrywise when several
    slices are given), with entries far outside the bulk (median/MAD rule)
    zero-filled as well.  Each temporal row is the least-squares fit of its
    slice's remaining entries given those factors, and columns are then
    rescaled to a common size across modes.  ``E[Lambda] = I``; the row
    covariances come from one covariance update pass starting from zero.
    Flagged entries of the current slice start as outliers and all others
    at zero; ``tau`` and ``gamma`` take their update values
    given that starting fit.
    """
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    if isinstance(slices, tuple) and len(slices) == 2 and isinstance(slices[1], ObservationMask):
        slices = [slices]
    slices = [(as_tensor(y), m) for y, m in slices]
    if not slices:
        raise ValueError("need at least one slice")
    dims = slices[-1][0].shape
    for y, m in slices:
        if y.shape != dims or m.dims != dims:
            raise DimensionError("slices and masks must share one shape")
    rank = config.rank_init
    cap = rank_cap(dims)
    if rank > cap:
        warnings.warn(f"rank_init {rank} exceeds the cap {cap} for dims {dims}; clamping",
                      stacklevel=2)
        rank = cap

    # screen every slice on its own first: averaging dilutes a spike below
    # the cutoff while leaving it large enough to claim a singular vector
    screened = []
    for y, m in slices:
        keep = _init_inliers(m.gather(y))
        screened.append((y, ObservationMask(m.dims, m.flat[keep])))
    pooled, pmask = _pool(screened)
    pobs = pmask.gather(pooled)
    filled = pmask.scatter(np.where(_init_inliers(pobs), pobs, 0.0))

    spatial = []
    for n in range(len(dims)):
        u, s, _ = np.linalg.svd(unfold(filled, n), full_matrices=False)
        k = min(rank, s.size)
        mean = np.zeros((dims[n], rank))
        mean[:, :k] = u[:, :k] * np.sqrt(s[:k])
        if k < rank:
            # zero columns are a fixed point of the updates
            scale = np.sqrt(s[0]) if s.size and s[0] > 0 else 1.0
            mean[:, k:] = 1e-3 * scale * rng.standard_normal((dims[n], rank - k))
        spatial.append(mean)

    temporal = np.ones((len(slices), rank))
    for t, (y, m) in enumerate(slices):
        obs = m.gather(y)
        keep = _init_inliers(obs)
        if keep.any():
            design = _design(spatial, m.coords[keep])
            temporal[t] = np.linalg.lstsq(design, obs[keep], rcond=None)[0]
    means = _balance_columns(spatial + [temporal])
    eye = np.eye(rank)
    factors = [FactorPosterior.from_mean(a, eye) for a in means]

    # tau starts at its update value given the inlier residuals of every
    # slice, so an empty current slice still gets a data-driven start
    p = config.priors
    count, sq, scale = 0, 0.0, 0.0
    for (d, m), row in zip(slices, means[-1]):
        obs = m.gather(d)
        resid = obs - _design(means[:-1], m.coords) @ row
        keep = _init_inliers(resid)
        count += int(keep.sum())
        sq += float(np.sum(resid[keep] ** 2))
        scale += float(np.sum(obs ** 2))
    sq = max(sq, 1e-12 * scale, 1e-300)
    tau = GammaPosterior(p.a0_tau + 0.5 * count, p.b0_tau + 0.5 * sq)
    y, mask = slices[-1]
    resid = mask.gather(y) - _design(means[:-1], mask.coords) @ means[-1][-1]
    sparse, gamma = start_sparse(resid, mask, tau.mean, p)
    state = ModelState(
        factors=factors,
        sparse=sparse,
        lam=GammaPosterior(np.ones(rank), np.ones(rank)),
        gamma=gamma,
        tau=tau,
        priors=p,
    )

    # one covariance pass started from the point estimates: a unit
    # covariance in every mode inflates the expected grams far beyond the
    # data scale and the first sweep then shrinks everything towards zero
    for f in state.factors:
        f.cov = np.zeros_like(f.cov)
        f.refresh()
    window = WindowState(len(slices), config.mu)
    for d, m in slices[:-1]:
        window.push(d, m)
    ctx = updates.UpdateContext(y, mask, window, state)
    for n in range(ctx.n_modes):
        updates.update_mode_covariances(ctx, n)
    return state


def _design(spatial, coords):
    out = np.ones((coords.shape[0], spatial[0].shape[1]))
    for n, a in enumerate(spatial):
        out *= a[coords[:, n]]
    return out


def column_scales(state):
    """``prod_n E[||a_r^(n)||^2]^{1/2}`` for every column ``r``."""
    out = np.ones(state.rank)
    for f in state.factors:
        out *= np.sqrt(f.column_sq_norms())
    return out


def prune_ranks(state, config):
    """Drop columns whose scale is below ``prune_threshold`` times the largest.

    Never goes below rank 1.  Returns the (possibly) modified state.
    """
    if config.prune_threshold <= 0 or state.rank <= 1:
        return state
    scale = column_scales(state)
    keep = scale >= config.prune_threshold * scale.max()
    if not keep.any():
        keep[np.argmax(scale)] = True
    if not keep.all():
        log.info("pruning %d of %d rank columns", int((~keep).sum()), state.rank)
        state.drop_columns(np.flatnonzero(keep))
    return state


class StreamingEngine:
    """Runs the variational scheme over a stream of partially observed slices.

    Examples
    --------
    >>> eng = StreamingEngine(EngineConfig(rank_init=5, window=10))
    >>> for y, mask in stream:                          # doctest: +SKIP
    ...     res = eng.process_slice(y, mask)
    """

    def __init__(self, config=None):
        self.config = config or EngineConfig()
        self.rng = np.random.default_rng(self.config.rng_seed)
        self.state = None
        self.window = WindowState(self.config.window, self.config.mu)
        self.slices_seen = 0
        self.on_block = None  # optional hook forwarded to updates.sweep
        self.context = None  # UpdateContext of the slice being fit

    @property
    def dims(self):
        return None if self.state is None else self.state.dims

    def _start_slice(self, y, mask):
        if self.state is None:
            self.state = initialize([(y, mask)], self.config, self.rng)
            return
        if self.config.restart_while_filling and self.slices_seen < self.config.window:
            if len(self.window) >= self.config.window:
                self.window.evict_oldest()
            with warnings.catch_warnings():
                # the rank clamp was already reported for the first slice
                warnings.simplefilter("ignore", UserWarning)
                self.state = initialize(list(self.window.slices) + [(y, mask)], self.config, self.rng)
            return
        if y.shape != self.state.dims:
            raise DimensionError(f"slice shape {y.shape} does not match stream dims {self.state.dims}")
        st = self.state
        prev_mean, prev_cov = st.temporal.mean[-1].copy(), st.temporal.cov[-1].copy()
        if len(self.window) >= self.config.window:
            self.window.evict_oldest()
            st.factors[-1] = st.temporal.take_rows(slice(1, None))
        st.temporal.append_row(prev_mean, prev_cov)
        resid = mask.gather(y) - _design([f.mean for f in st.factors[:-1]], mask.coords) @ prev_mean
        st.sparse, st.gamma = start_sparse(resid, mask, st.tau.mean, st.priors)

    def process_slice(self, y, mask=None, truth=None):
        """Fit one new slice and return its :class:`SliceResult`.

        ``mask`` defaults to every entry.  ``truth`` (the noise- and
        outlier-free slice), when given, fills in ``relative_error``.
        """
        y = as_tensor(y)
        mask = ObservationMask.full(y.shape) if mask is None else mask
        if mask.dims != y.shape:
            raise DimensionError(f"mask {mask.dims} does not match slice {y.shape}")
        cfg = self.config
        self._start_slice(y, mask)
        st = self.state
        ctx = updates.UpdateContext(y, mask, self.window, st, tau_mode=cfg.tau_mode,
                                    include_temporal_in_shape=cfg.include_temporal_in_shape)
        self.context = ctx
        st.refresh()

        trace = [updates.elbo(ctx).value]
        converged = False
        sweeps = 0
        for sweeps in range(1, cfg.max_sweeps + 1):
            updates.sweep(ctx, self.on_block)
            trace.append(updates.elbo(ctx).value)
            if abs(trace[-1] - trace[-2]) < cfg.tol:
                converged = True
                break

        desparsified = mask.scatter(mask.gather(y) - st.sparse.mean)
        sparse = st.sparse
        self.window.push(desparsified, mask)
        prune_ranks(st, cfg)
        self.slices_seen += 1

        recon = self.reconstruction()
        rel = None if truth is None else relative_error(recon, truth)
        res = None
        if len(mask) and np.any(mask.gather(y) != 0):
            res = residual_error(y, recon, sparse, mask)
        return SliceResult(
            time_index=self.slices_seen,
            low_rank_slice=recon,
            sparse_mean=sparse,
            rank_estimate=st.rank,
            relative_error=rel,
            sweeps_used=sweeps,
            elbo_trace=tuple(trace),
            residual_error=res,
            converged=converged,
        )

    def reconstruction(self, position=-1):
        """Low-rank slice ``[[A^(1), ..., A^(N); a_t]]`` for a window position."""
        if self.state is None:
            raise RuntimeError("no slice processed yet")
        st = self.state
        return cp_construct([f.mean for f in st.factors[:-1]], st.temporal.mean[position])

    def run(self, stream, truths=None):
        """Process an iterable of ``(y, mask)`` pairs; returns the results list."""
        truths = iter(truths) if truths is not None else None
        out = []
        for y, mask in stream:
            truth = next(truths) if truths is not None else None
            t0 = time.perf_counter()
            out.append(self.process_slice(y, mask, truth))
            log.debug("slice %d: %.3fs", self.slices_seen, time.perf_counter() - t0)
        return out
