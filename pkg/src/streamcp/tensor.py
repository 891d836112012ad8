"""Dense tensor kernels shared by the inference code.

Tensors are plain ``numpy`` arrays in C order, so the linear index of an
entry runs with the last tensor index fastest.  Every routine here follows
that one convention; in particular :func:`khatri_rao` orders its rows so that

    vec(X_(n)) rows  <->  khatri_rao_excluding(factors, n) rows

for a CP tensor ``X``.  Under row-major linearization the columnwise
Kronecker product is taken in forward mode order (``A1 ⊙ A2 ⊙ ...``), which
is the same object that column-major code writes in reverse order.
"""

from functools import reduce

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes do not agree."""


def as_tensor(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        raise DimensionError("a tensor needs at least one mode")
    if min(a.shape) < 1:
        raise DimensionError(f"all dimensions must be >= 1, got {a.shape}")
    return a


def _same_shape(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


class ObservationMask:
    """Set of observed multi-indices of a tensor with shape ``dims``.

    Entries are kept as sorted, unique, C-order linear indices.  The dense
    0/1 indicator is only built when asked for.
    """

    __slots__ = ("dims", "flat", "_coords", "_indicator")

    def __init__(self, dims, flat):
        dims = tuple(int(d) for d in dims)
        if not dims or min(dims) < 1:
            raise DimensionError(f"invalid mask dimensions {dims}")
        flat = np.asarray(flat, dtype=np.int64).ravel()
        size = int(np.prod(dims))
        if flat.size:
            if flat.min() < 0 or flat.max() >= size:
                raise IndexError("mask index out of range")
            if np.any(np.diff(flat) <= 0):
                uniq = np.unique(flat)
                if uniq.size != flat.size:
                    raise ValueError("duplicate multi-index in mask")
                flat = uniq
        flat = flat.copy()
        flat.setflags(write=False)
        self.dims = dims
        self.flat = flat
        self._coords = None
        self._indicator = None

    @classmethod
    def from_indices(cls, dims, indices):
        """Build from an iterable of multi-indices (0-based)."""
        dims = tuple(int(d) for d in dims)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size == 0:
            return cls.empty(dims)
        idx = idx.reshape(-1, len(dims))
        if np.any(idx < 0) or np.any(idx >= np.asarray(dims)):
            raise IndexError("multi-index outside tensor bounds")
        return cls(dims, np.ravel_multi_index(tuple(idx.T), dims))

    @classmethod
    def from_indicator(cls, indicator):
        indicator = np.asarray(indicator)
        return cls(indicator.shape, np.flatnonzero(indicator.ravel()))

    @classmethod
    def full(cls, dims):
        return cls(dims, np.arange(int(np.prod(dims))))

    @classmethod
    def empty(cls, dims):
        return cls(dims, np.empty(0, dtype=np.int64))

    def __len__(self):
        return int(self.flat.size)

    def __eq__(self, other):
        if not isinstance(other, ObservationMask):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.flat, other.flat)

    def __repr__(self):
        return f"ObservationMask(dims={self.dims}, n_observed={len(self)})"

    @property
    def coords(self):
        """``(len(mask), N)`` array of multi-indices, in linear-index order."""
        if self._coords is None:
            c = np.stack(np.unravel_index(self.flat, self.dims), axis=1)
            c.setflags(write=False)
            self._coords = c
        return self._coords

    def indicator(self):
        """Dense 0/1 tensor with ones on observed entries."""
        if self._indicator is None:
            o = np.zeros(self.dims)
            o.ravel()[self.flat] = 1.0
            o.setflags(write=False)
            self._indicator = o
        return self._indicator

    def gather(self, a):
        """Observed values of ``a`` in mask order."""
        a = np.asarray(a)
        if a.shape != self.dims:
            raise DimensionError(f"tensor shape {a.shape} does not match mask {self.dims}")
        return a.ravel()[self.flat]

    def scatter(self, values):
        """Dense tensor holding ``values`` on the mask and zeros elsewhere."""
        out = np.zeros(self.dims)
        out.ravel()[self.flat] = values
        return out


def inner_product(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b)
    return float(np.dot(a.ravel(), b.ravel()))


def frobenius_norm(a):
    return float(np.sqrt(inner_product(a, a)))


def generalized_inner_product(vectors):
    """Sum over i of the product over k of ``vectors[k][i]``."""
    vectors = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if not vectors:
        raise ValueError("need at least one vector")
    n = vectors[0].size
    if any(v.size != n for v in vectors):
        raise DimensionError("vectors must share one length")
    return float(np.sum(reduce(np.multiply, vectors)))


def hadamard(mats):
    """Entrywise product of equally shaped matrices."""
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise ValueError("need at least one matrix")
    for m in mats[1:]:
        _same_shape(mats[0], m)
    return reduce(np.multiply, mats)


def khatri_rao(mats):
    """Columnwise Kronecker product of ``mats`` (given in mode order).

    Row ``(i_1, ..., i_K)`` of the result, linearized with the last index
    fastest, holds ``prod_k mats[k][i_k, :]``.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in mats]
    if not mats:
        raise ValueError("need at least one matrix")
    if any(m.ndim != 2 for m in mats):
        raise DimensionError("khatri_rao expects 2-d factor matrices")
    rank = mats[0].shape[1]
    if any(m.shape[1] != rank for m in mats):
        raise DimensionError("all matrices need the same number of columns")
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, rank)
    return out


def khatri_rao_excluding(mats, k):
    if not 0 <= k < len(mats):
        raise IndexError(f"mode {k} out of range for {len(mats)} matrices")
    rest = [m for j, m in enumerate(mats) if j != k]
    if not rest:
        raise ValueError("nothing left after excluding the only matrix")
    return khatri_rao(rest)


def cp_construct(factors, weights=None):
    """Full tensor ``sum_r w_r a_r^(1) o ... o a_r^(N)``."""
    factors = [np.asarray(f, dtype=np.float64) for f in factors]
    if any(f.ndim != 2 for f in factors):
        raise DimensionError("factor matrices must be 2-d")
    rank = factors[0].shape[1]
    if any(f.shape[1] != rank for f in factors):
        raise DimensionError("factor matrices disagree on the rank")
    if weights is None:
        weights = np.ones(rank)
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if weights.size != rank:
        raise DimensionError(f"expected {rank} weights, got {weights.size}")
    dims = tuple(f.shape[0] for f in factors)
    if len(factors) == 1:
        return factors[0] @ weights
    kr = khatri_rao(factors[1:])
    return ((factors[0] * weights) @ kr.T).reshape(dims)


def sampled_inner_product(b, a, mask):
    """``<b, a>`` restricted to the entries in ``mask``."""
    b, a = as_tensor(b), as_tensor(a)
    _same_shape(a, b)
    if mask.dims != a.shape:
        raise DimensionError(f"mask {mask.dims} does not match tensor {a.shape}")
    return float(np.dot(mask.gather(b), mask.gather(a)))


def unfold(a, n):
    """Mode-``n`` matricization, shape ``(I_n, prod_{j != n} I_j)``.

    Column order follows the remaining modes in increasing order with the
    last one fastest, matching ``khatri_rao_excluding(factors, n)``.
    """
    a = as_tensor(a)
    if not 0 <= n < a.ndim:
        raise IndexError(f"mode {n} out of range for order-{a.ndim} tensor")
    return np.moveaxis(a, n, 0).reshape(a.shape[n], -1)


def subtensor_fix_index(a, n, i):
    """Order ``N-1`` subtensor with index ``n`` fixed to ``i``."""
    a = as_tensor(a)
    if not 0 <= n < a.ndim:
        raise IndexError(f"mode {n} out of range for order-{a.ndim} tensor")
    if not 0 <= i < a.shape[n]:
        raise IndexError(f"index {i} out of range for mode {n} of size {a.shape[n]}")
    return np.take(a, i, axis=n)
