"""Small builders shared by the test modules."""

import numpy as np

from streamcp.state import (FactorPosterior, GammaPosterior, HyperPriors, ModelState,
                            SparsePosterior, WindowState)
from streamcp.tensor import (ObservationMask, cp_construct, frobenius_norm, khatri_rao,
                             khatri_rao_excluding, unfold)
from streamcp.updates import (UpdateContext, expected_cp_sq_norm, expected_gram_excluded,
                              expected_residual_sq)

# PASS/FAIL lines of the acceptance suite, echoed in the terminal summary
ACCEPTANCE = []


def record(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def random_mask(rng, dims, frac=0.6):
    ind = rng.random(dims) < frac
    return ObservationMask.from_indicator(ind)


def random_context(rng, dims, rank, n_slices, zero_cov=False, mask_frac=0.6, mu=0.8,
                   tau_mode="current_slice_only", priors=None):
    """Random posterior, window and current slice wired into an UpdateContext."""
    priors = priors or HyperPriors()
    window = WindowState(n_slices, mu)
    for _ in range(n_slices - 1):
        window.push(rng.standard_normal(dims), random_mask(rng, dims, mask_frac))
    y = rng.standard_normal(dims)
    mask = random_mask(rng, dims, mask_frac)
    factors = []
    for rows in list(dims) + [n_slices]:
        mean = rng.standard_normal((rows, rank))
        if zero_cov:
            cov = np.zeros((rows, rank, rank))
        else:
            g = rng.standard_normal((rows, rank, rank))
            cov = 0.1 * g @ np.swapaxes(g, 1, 2) + 0.05 * np.eye(rank)
        factors.append(FactorPosterior(mean, cov))
    n = len(mask)
    var = np.full(n, 1e-12) if zero_cov else rng.uniform(0.1, 1.0, n)
    sparse = SparsePosterior(mask, rng.standard_normal(n), var)
    state = ModelState(
        factors=factors,
        sparse=sparse,
        lam=GammaPosterior(rng.uniform(0.5, 2.0, rank), rng.uniform(0.5, 2.0, rank)),
        gamma=GammaPosterior(rng.uniform(0.5, 2.0, n), rng.uniform(0.5, 2.0, n)),
        tau=GammaPosterior(rng.uniform(1.0, 5.0), rng.uniform(0.5, 2.0)),
        priors=priors,
    )
    return UpdateContext(y, mask, window, state, tau_mode=tau_mode)


# -- dense oracles for the sampled window sums ------------------------------

def slice_mask(ctx, t):
    return ctx.mask if t == ctx.n_slices - 1 else ctx.window.slices[t][1]


def dense_gram(ctx, n, t):
    """Gram of the sampled excluded Khatri-Rao rows of the means, built densely."""
    means = [f.mean for f in ctx.state.factors]
    spatial, temporal = means[:-1], means[-1]
    ind = slice_mask(ctx, t).indicator()
    if n == len(spatial):
        out = np.zeros((ctx.n_slices,) + (temporal.shape[1],) * 2)
        kr = khatri_rao(spatial)
        out[t] = kr.T @ (ind.ravel()[:, None] * kr)
        return out
    if len(spatial) == 1:
        kr = np.ones((1, temporal.shape[1]))
    else:
        kr = khatri_rao_excluding(spatial, n)
    kr = kr * temporal[t]
    w = unfold(ind, n)
    return np.einsum("jr,ij,js->irs", kr, w, kr)


def dense_cp_sq_norm(ctx, t):
    means = [f.mean for f in ctx.state.factors]
    return frobenius_norm(cp_construct(means[:-1], means[-1][t])) ** 2


def dense_residual_sq(ctx):
    means = [f.mean for f in ctx.state.factors]
    model = cp_construct(means[:-1], means[-1][-1])
    s = ctx.state.sparse
    r = ctx.mask.gather(ctx.y - model) - s.mean
    return float(r @ r + np.sum(s.var))


def rel_diff(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.max(np.abs(b), initial=0.0), 1e-300)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def oracle_instance(seed):
    """One random criterion instance: 3 non-temporal modes, dims <= 4, R <= 3."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in rng.integers(1, 5, size=3))
    rank = int(rng.integers(1, 4))
    n_slices = int(rng.integers(1, 4))
    return random_context(rng, dims, rank, n_slices, zero_cov=True, mask_frac=rng.uniform(0.2, 1.0))


def oracle_errors(ctx):
    """Largest relative deviation of each kernel from its dense oracle."""
    gram = 0.0
    for n in range(ctx.n_modes):
        for t in range(ctx.n_slices):
            gram = max(gram, rel_diff(expected_gram_excluded(ctx, n, t), dense_gram(ctx, n, t)))
    norm = max(rel_diff(expected_cp_sq_norm(ctx.state.factors, t), dense_cp_sq_norm(ctx, t))
               for t in range(ctx.n_slices))
    resid = rel_diff(expected_residual_sq(ctx), dense_residual_sq(ctx))
    return {"gram": gram, "cp_sq_norm": norm, "residual_sq": resid}
