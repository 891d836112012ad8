"""Closed-form mean-field updates for the robust streaming CP model.

The window is handled as one sparse order-``N+1`` tensor: every observed
entry of every slice in the window becomes a row of ``UpdateContext.coords``
whose last column is the slice's position (its temporal factor row), with a
forgetting weight ``mu**(T - t)``.  The non-temporal and temporal factor
updates are then the same weighted regression, differing only in which mode
is being solved for.

Sweep order: all row covariances, non-temporal means, temporal means, a
column rescaling between modes, ``lambda``, the outlier posterior,
``gamma`` and ``tau``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import optimize

from .state import FactorPosterior, GammaPosterior, SparsePosterior
from .tensor import DimensionError, khatri_rao

log = logging.getLogger(__name__)

TAU_MODES = ("current_slice_only", "exact")
LOG_2PI = np.log(2.0 * np.pi)


class SingularPosteriorError(np.linalg.LinAlgError):
    """A row precision matrix could not be factorized even after jitter."""


class UpdateContext:
    """Current observation, window of past slices and the posterior being fit.

    Parameters
    ----------
    y : ndarray
        Current slice (only entries in ``mask`` are read).
    mask : ObservationMask
        Observed entries of ``y``.
    window : WindowState
        Past de-sparsified slices, oldest first.
    state : ModelState
        Posterior; its temporal factor must have ``len(window) + 1`` rows.
    tau_mode : {'current_slice_only', 'exact'}
    include_temporal_in_shape : bool
        Count the temporal rows in the ``lambda`` shape update.
    rescale : bool
        Run :func:`rescale_columns` after the mean updates in each sweep.
    """

    def __init__(self, y, mask, window, state, tau_mode="current_slice_only",
                 include_temporal_in_shape=True, rescale=True):
        if tau_mode not in TAU_MODES:
            raise ValueError(f"tau_mode must be one of {TAU_MODES}, got {tau_mode!r}")
        y = np.asarray(y, dtype=np.float64)
        dims = state.dims
        if y.shape != dims or mask.dims != dims:
            raise DimensionError(f"slice {y.shape} / mask {mask.dims} do not match model dims {dims}")
        for past, past_mask in window.slices:
            if past.shape != dims or past_mask.dims != dims:
                raise DimensionError("window slice dimensions do not match the model")
        if state.temporal.rows != len(window) + 1:
            raise ValueError(
                f"temporal factor has {state.temporal.rows} rows, expected {len(window) + 1}")
        if len(state.sparse.mask) != len(mask) or not np.array_equal(state.sparse.mask.flat, mask.flat):
            raise ValueError("sparse posterior is not defined on the current mask")

        self.y = y
        self.mask = mask
        self.window = window
        self.state = state
        self.tau_mode = tau_mode
        self.include_temporal_in_shape = include_temporal_in_shape
        self.rescale = rescale

        parts = [(d, m) for d, m in window.slices] + [(y, mask)]
        slice_w = window.weights(current=True)
        coords, values, ids = [], [], []
        for t, (d, m) in enumerate(parts):
            c = m.coords
            coords.append(np.column_stack([c, np.full(len(m), t, dtype=np.int64)]))
            values.append(m.gather(d))
            ids.append(np.full(len(m), t, dtype=np.int64))
        self.coords = np.concatenate(coords).astype(np.int64, copy=False)
        self.values = np.concatenate(values)
        self.slice_id = np.concatenate(ids)
        self.slice_weights = slice_w
        self.weights = slice_w[self.slice_id]
        self.n_slices = len(parts)
        self.n_current = len(mask)
        self.current = slice(self.values.size - self.n_current, self.values.size)

        self.shape = dims + (len(parts),)
        self._incidence = [_ModeIncidence(self, n) for n in range(len(dims))]
        sq = self.values ** 2
        self._past_sq = np.bincount(self.slice_id, weights=sq, minlength=self.n_slices)

    @property
    def n_modes(self):
        return len(self.shape)

    def targets(self):
        """Regression targets: past ``D_t`` values, then ``Y - E[S]`` on the current mask."""
        out = self.values.copy()
        out[self.current] -= self.state.sparse.mean
        return out


class _ModeIncidence:
    """Window entries grouped by (slice, row of mode ``n``) as a CSR matrix.

    Columns index the remaining non-temporal modes in C order, so
    ``matrix(data) @ khatri_rao(other tables)`` sums
    ``data_e * prod_{k != n} table_k[e_k]`` within each (slice, row) group.
    """

    def __init__(self, ctx, n):
        dims = ctx.shape[:-1]
        others = [k for k in range(len(dims)) if k != n]
        self.others = others
        rows = ctx.slice_id * dims[n] + ctx.coords[:, n]
        if others:
            cols = np.ravel_multi_index(tuple(ctx.coords[:, k] for k in others),
                                        tuple(dims[k] for k in others))
            n_cols = int(np.prod([dims[k] for k in others]))
        else:
            cols = np.zeros_like(rows)
            n_cols = 1
        self.order = np.lexsort((cols, rows))
        n_rows = ctx.n_slices * dims[n]
        counts = np.bincount(rows, minlength=n_rows)
        self.indptr = np.concatenate([[0], np.cumsum(counts)])
        self.indices = cols[self.order]
        self.shape = (n_rows, n_cols)
        self.block = (ctx.n_slices, dims[n])
        self._ones = None

    def matrix(self, data=None):
        if data is None:
            if self._ones is None:
                self._ones = sp.csr_matrix(
                    (np.ones(self.indices.size), self.indices, self.indptr), shape=self.shape)
            return self._ones
        return sp.csr_matrix((data[self.order], self.indices, self.indptr), shape=self.shape)

    def sums(self, tables, data=None):
        """``(K, I_n, cols)`` grouped sums of products of the other modes' rows."""
        if self.others:
            kr = khatri_rao([tables[k] for k in self.others])
        else:
            kr = np.ones((1, tables[0].shape[1]))
        out = self.matrix(data) @ kr
        return np.asarray(out).reshape(self.block + (kr.shape[1],))


def _temporal_sums(ctx, tables, data=None):
    """``(K, cols)``: per slice, sum over entries of ``data_e * prod_k table_k[e_k]``."""
    s0 = ctx._incidence[0].sums(tables, data)
    return np.einsum("tiq,iq->tq", s0, tables[0])


def _rows_product(ctx, n, per_mode, entries=slice(None)):
    """Product over modes ``k != n`` of ``per_mode[k][coords[:, k]]``."""
    out = None
    coords = ctx.coords[entries]
    for k, table in enumerate(per_mode):
        if k == n:
            continue
        rows = table[coords[:, k]]
        out = rows if out is None else out * rows
    return out


def _second_moments(ctx):
    return [f.second_moment for f in ctx.state.factors]


def _means(ctx):
    return [f.mean for f in ctx.state.factors]


def expected_gram_excluded(ctx, n, t, row=None):
    """``E[A^(\\n)T A^(\\n)]`` sampled on slice ``t`` (no forgetting weight).

    Returns the ``R x R`` matrix for ``row`` of mode ``n`` or, when ``row``
    is None, an ``(I_n, R, R)`` stack for every row.
    """
    if not 0 <= n < ctx.n_modes:
        raise IndexError(f"mode {n} out of range")
    if not 0 <= t < ctx.n_slices:
        raise IndexError(f"window position {t} out of range")
    r = ctx.state.rank
    for f in ctx.state.factors:
        f.refresh()
    sel = ctx.slice_id == t
    if row is not None:
        sel &= ctx.coords[:, n] == row
    idx = np.flatnonzero(sel)
    if row is not None:
        if idx.size == 0:
            return np.zeros((r, r))
        h = _rows_product(ctx, n, _second_moments(ctx), idx)
        return h.sum(axis=0).reshape(r, r)
    out = np.zeros((ctx.shape[n], r * r))
    if idx.size:
        h = _rows_product(ctx, n, _second_moments(ctx), idx)
        np.add.at(out, ctx.coords[idx, n], h)
    return out.reshape(-1, r, r)


def _gram_sums(ctx, n):
    """Unweighted-by-tau grams ``sum_t w_t E[gram]_t`` for every row of mode ``n``."""
    st = ctx.state
    tables = [f.second_moment for f in st.factors[:-1]]
    bt = st.temporal.second_moment
    if n == ctx.n_modes - 1:
        return ctx.slice_weights[:, None] * _temporal_sums(ctx, tables)
    s = ctx._incidence[n].sums(tables)
    return np.einsum("tiq,tq->iq", s, ctx.slice_weights[:, None] * bt)


def _data_sums(ctx, n):
    st = ctx.state
    tables = [f.mean for f in st.factors[:-1]]
    at = st.temporal.mean
    data = ctx.targets()
    if n == ctx.n_modes - 1:
        return ctx.slice_weights[:, None] * _temporal_sums(ctx, tables, data)
    s = ctx._incidence[n].sums(tables, data)
    return np.einsum("tir,tr->ir", s, ctx.slice_weights[:, None] * at)


def mode_precision(ctx, n):
    """Row precisions ``E[tau] sum_t w_t E[gram]_t + E[Lambda]`` for mode ``n``."""
    r = ctx.state.rank
    g = _gram_sums(ctx, n).reshape(-1, r, r)
    return ctx.state.tau.mean * g + np.diag(ctx.state.lam.mean)


def mode_rhs(ctx, n):
    """``E[tau] sum_t w_t E[A^(\\n)]^T vec(target_t)`` for every row of mode ``n``."""
    return ctx.state.tau.mean * _data_sums(ctx, n)


def _cholesky_with_jitter(p):
    try:
        return np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(p)
    r = p.shape[-1]
    for i, pi in enumerate(p):
        try:
            out[i] = np.linalg.cholesky(pi)
        except np.linalg.LinAlgError:
            jitter = 1e-10 * np.trace(pi) / r
            try:
                out[i] = np.linalg.cholesky(pi + jitter * np.eye(r))
            except np.linalg.LinAlgError as exc:
                raise SingularPosteriorError(
                    "row precision is not positive definite; lambda may have degenerated") from exc
            log.debug("added jitter %.3g to row precision %d", jitter, i)
    return out


def spd_inverse(p):
    """Inverse of a stack of SPD matrices, symmetrized."""
    chol = _cholesky_with_jitter(p)
    linv = np.linalg.inv(chol)
    v = np.swapaxes(linv, -1, -2) @ linv
    return 0.5 * (v + np.swapaxes(v, -1, -2))


def spd_solve(p, rhs):
    chol = _cholesky_with_jitter(p)
    linv = np.linalg.inv(chol)
    return (np.swapaxes(linv, -1, -2) @ (linv @ rhs[..., None]))[..., 0]


def _row_update(ctx, n, row):
    r = ctx.state.rank
    idx = np.flatnonzero(ctx.coords[:, n] == row)
    lam = np.diag(ctx.state.lam.mean)
    tau = ctx.state.tau.mean
    if idx.size == 0:
        cov = spd_inverse(lam[None])[0]
        return np.zeros(r), cov
    for f in ctx.state.factors:
        f.refresh()
    w = ctx.weights[idx]
    h2 = _rows_product(ctx, n, _second_moments(ctx), idx)
    h1 = _rows_product(ctx, n, _means(ctx), idx)
    gram = (h2 * w[:, None]).sum(axis=0).reshape(r, r)
    cov = spd_inverse((tau * gram + lam)[None])[0]
    rhs = tau * h1.T @ (w * ctx.targets()[idx])
    return cov @ rhs, cov


def update_nontemporal_row(ctx, n, i):
    """Posterior ``(mean, cov)`` of row ``i`` of non-temporal mode ``n``.

    Pure function of the context; the state is not modified.
    """
    if not 0 <= n < ctx.n_modes - 1:
        raise IndexError(f"{n} is not a non-temporal mode")
    if not 0 <= i < ctx.shape[n]:
        raise IndexError(f"row {i} out of range for mode {n}")
    return _row_update(ctx, n, i)


def update_temporal_row(ctx, t):
    """Posterior ``(mean, cov)`` of the temporal row for window position ``t``.

    The last position is the current slice and regresses on ``Y - E[S]``;
    earlier positions regress on their stored de-sparsified slices.
    """
    if not 0 <= t < ctx.n_slices:
        raise IndexError(f"window position {t} out of range")
    return _row_update(ctx, ctx.n_modes - 1, t)


def update_mode_covariances(ctx, n):
    f = ctx.state.factors[n]
    f.cov = spd_inverse(mode_precision(ctx, n))
    f.refresh()


def update_mode_means(ctx, n):
    """Mean update for all rows of mode ``n``.

    Solves against the precision evaluated now, so the step is an exact
    coordinate ascent even after other modes moved since the covariance
    block.
    """
    f = ctx.state.factors[n]
    f.mean = spd_solve(mode_precision(ctx, n), mode_rhs(ctx, n))
    f.refresh()


def _gauge_root(rows, load):
    """Root ``nu < min(rows)`` of ``sum(log(rows - nu)) = sum(log(load))``."""
    target = np.sum(np.log(load))
    g = lambda nu: np.sum(np.log(rows - nu)) - target
    hi = rows.min() * (1.0 - 1e-12)
    lo = min(0.0, hi) - 1.0
    while g(lo) < 0:
        lo = 2.0 * lo - 1.0
    if g(hi) > 0:
        return hi
    return optimize.brentq(g, lo, hi, xtol=1e-14, rtol=1e-14)


def rescale_columns(ctx):
    """Move each column's scale between modes to maximize the bound.

    Scaling column ``r`` of mode ``n`` by ``c_n`` with ``prod_n c_n = 1``
    leaves every expected product of rows, and so the likelihood, unchanged.
    Only the ARD prior and the row entropies move, and their joint maximum
    has the closed form ``c_n**2 = (I_n - nu) / (E[lambda_r] q_n)`` where
    ``q_n`` is the current expected squared column norm.
    """
    st = ctx.state
    rows = np.array([f.rows for f in st.factors], dtype=np.float64)
    sq = np.array([f.column_sq_norms() for f in st.factors])
    lam = st.lam.mean
    scales = np.ones_like(sq)
    for r in range(st.rank):
        load = lam[r] * sq[:, r]
        if not np.all(load > 0):
            continue
        nu = _gauge_root(rows, load)
        c = np.sqrt((rows - nu) / load)
        scales[:, r] = c / np.exp(np.mean(np.log(c)))
    for f, c in zip(st.factors, scales):
        f.mean = f.mean * c
        f.cov = f.cov * c[:, None] * c[None, :]
        f.refresh()
    return scales


def lambda_shape(state, include_temporal=True):
    rows = sum(f.rows for f in state.factors[:-1])
    if include_temporal:
        rows += state.temporal.rows
    return state.priors.c0 + 1.0 + 0.5 * rows


def update_lambda(state, include_temporal=True):
    c = lambda_shape(state, include_temporal)
    d = state.priors.d0 + 0.5 * sum(f.column_sq_norms() for f in state.factors)
    return GammaPosterior(np.full(state.rank, c), d)


def _current_model_mean(ctx):
    """Product-of-means CP value at every current-slice entry."""
    h = _rows_product(ctx, -1, _means(ctx), ctx.current)
    return h.sum(axis=1)


def update_sparse(ctx):
    state = ctx.state
    tau = state.tau.mean
    var = 1.0 / (state.gamma.mean + tau)
    resid = ctx.values[ctx.current] - _current_model_mean(ctx)
    return SparsePosterior(ctx.mask, var * tau * resid, var)


def update_gamma(state):
    p = state.priors
    s = state.sparse
    a = np.full(s.mean.shape, p.a0_gamma + 0.5)
    b = p.b0_gamma + 0.5 * (s.mean ** 2 + s.var)
    return GammaPosterior(a, b)


def expected_cp_sq_norm(factors, temporal_row=-1):
    """``E[||[[A^(1), ..., A^(N); a_t]]||_F^2]`` over the full index range.

    ``factors`` lists the ``N`` non-temporal posteriors followed by the
    temporal one; ``temporal_row`` picks the time row.  The sum over all
    entries factorizes into per-mode column sums of the second moments.
    """
    *spatial, temporal = factors
    for f in factors:
        f.refresh()
    acc = temporal.second_moment[temporal_row].copy()
    for f in spatial:
        acc *= f.second_moment.sum(axis=0)
    return float(acc.sum())


def _entry_moments(ctx, entries=slice(None)):
    """Model mean and second moment at window entries."""
    coords = ctx.coords[entries]
    m = None
    x2 = None
    for k, f in enumerate(ctx.state.factors):
        f.refresh()
        a = f.mean[coords[:, k]]
        b = f.second_moment[coords[:, k]]
        m = a if m is None else m * a
        x2 = b if x2 is None else x2 * b
    if m is None or m.shape[0] == 0:
        return np.zeros(0), np.zeros(0)
    return m.sum(axis=1), x2.sum(axis=1)


def expected_residual_sq(ctx):
    """``E[||(Y - S - [[A; a_T]])_Omega_T||^2]`` for the current slice."""
    if ctx.n_current == 0:
        return 0.0
    y = ctx.values[ctx.current]
    m, x2 = _entry_moments(ctx, ctx.current)
    s = ctx.state.sparse
    return float(
        y @ y - 2.0 * y @ m + x2.sum() - 2.0 * y @ s.mean + 2.0 * m @ s.mean
        + np.sum(s.mean ** 2 + s.var))


def window_residuals(ctx):
    """Expected squared residual of every window slice (current slice last).

    Past slices have no outlier term: their outliers were already removed.
    """
    st = ctx.state
    out = np.zeros(ctx.n_slices)
    if ctx.n_slices > 1:
        x2 = _temporal_sums(ctx, [f.second_moment for f in st.factors[:-1]])
        x2 = np.sum(x2 * st.temporal.second_moment, axis=1)
        dm = _temporal_sums(ctx, [f.mean for f in st.factors[:-1]], ctx.values)
        dm = np.sum(dm * st.temporal.mean, axis=1)
        out[:-1] = (ctx._past_sq - 2.0 * dm + x2)[:-1]
    out[-1] = expected_residual_sq(ctx)
    return out


def update_tau(ctx, mode=None):
    mode = mode or ctx.tau_mode
    if mode not in TAU_MODES:
        raise ValueError(f"unknown tau mode {mode!r}")
    p = ctx.state.priors
    if mode == "exact":
        a = p.a0_tau + 0.5 * ctx.values.size
        b = p.b0_tau + 0.5 * float(ctx.slice_weights @ window_residuals(ctx))
    else:
        if ctx.n_current == 0:
            return GammaPosterior(ctx.state.tau.a, ctx.state.tau.b)
        a = p.a0_tau + 0.5 * ctx.n_current
        b = p.b0_tau + 0.5 * expected_residual_sq(ctx)
    return GammaPosterior(a, b)


@dataclass
class ElboValue:
    value: float
    breakdown: dict = field(default_factory=dict)


def elbo(ctx):
    """Variational lower bound ``E_q[ln p(data, theta)] - E_q[ln q(theta)]``.

    The ``lambda`` prior enters with shape ``c0 + 1`` so that the shape
    update (which carries the extra ``+1``) is the exact maximizer when the
    temporal rows are counted.
    """
    st = ctx.state
    p = st.priors
    r = st.rank
    tau = st.tau
    terms = {}

    resid = window_residuals(ctx)
    n_obs = ctx.values.size
    terms["likelihood"] = float(
        0.5 * n_obs * (float(tau.mean_log) - LOG_2PI)
        + 0.5 * np.sum(np.log(ctx.weights))
        - 0.5 * float(tau.mean) * (ctx.slice_weights @ resid))

    lam = st.lam
    n_rows = sum(f.rows for f in st.factors)
    col_sq = sum(f.column_sq_norms() for f in st.factors)
    terms["factor_prior"] = float(
        n_rows * (0.5 * lam.mean_log.sum() - 0.5 * r * LOG_2PI) - 0.5 * lam.mean @ col_sq)
    logdets = [np.linalg.slogdet(f.cov)[1].sum() for f in st.factors]
    terms["factor_entropy"] = float(0.5 * n_rows * r * (1.0 + LOG_2PI) + 0.5 * sum(logdets))

    s = st.sparse
    g = st.gamma
    terms["sparse_prior"] = float(np.sum(
        0.5 * g.mean_log - 0.5 * LOG_2PI - 0.5 * g.mean * (s.mean ** 2 + s.var)))
    terms["sparse_entropy"] = float(np.sum(0.5 * (1.0 + LOG_2PI + np.log(s.var))))

    terms["tau_prior"] = float(tau.expected_log_density(p.a0_tau, p.b0_tau))
    terms["lambda_prior"] = float(np.sum(lam.expected_log_density(p.c0 + 1.0, p.d0)))
    terms["gamma_prior"] = float(np.sum(g.expected_log_density(p.a0_gamma, p.b0_gamma)))
    terms["gamma_entropies"] = float(np.sum(tau.entropy()) + np.sum(lam.entropy()) + np.sum(g.entropy()))

    value = float(sum(terms.values()))
    return ElboValue(value, terms)


BLOCKS = ("covariances", "spatial_means", "temporal_means", "rescale", "lambda", "sparse", "gamma", "tau")


def sweep(ctx, on_block=None):
    """One pass over the update blocks listed in :data:`BLOCKS`.

    ``on_block(name)`` is called after each block, which the tests use to
    watch the bound between blocks.
    """
    st = ctx.state
    n_modes = ctx.n_modes

    def done(name):
        if on_block is not None:
            on_block(name)

    for n in range(n_modes):
        update_mode_covariances(ctx, n)
    done("covariances")
    for n in range(n_modes - 1):
        update_mode_means(ctx, n)
    done("spatial_means")
    update_mode_means(ctx, n_modes - 1)
    done("temporal_means")
    if ctx.rescale:
        rescale_columns(ctx)
        done("rescale")
    st.lam = update_lambda(st, ctx.include_temporal_in_shape)
    done("lambda")
    st.sparse = update_sparse(ctx)
    done("sparse")
    st.gamma = update_gamma(st)
    done("gamma")
    st.tau = update_tau(ctx)
    done("tau")
