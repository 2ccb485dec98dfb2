"""Spatial-domain convolution operators and the code subsampling mask.

``D`` maps codes ``(K, H, W)`` to a signal ``(H, W)`` by zero-padded linear
convolution cropped to "same" size, summed over filters. ``Z`` is the same
bilinear map seen as a linear operator on the filters, built from a fixed
code map. Neither is ever materialized densely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

from .core import check_filters


def _tap_offsets(m):
    c = m // 2
    a, b = np.divmod(np.arange(m * m), m)
    return a - c, b - c


def dict_apply(filters, codes):
    """``D z``: sum over k of ``filters[k] * codes[k]`` ("same" output, zero boundary)."""
    filters = np.asarray(filters, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    K, m, _ = filters.shape
    if codes.ndim != 3 or codes.shape[0] != K:
        raise ValueError(f"codes must have shape ({K}, H, W), got {codes.shape}")
    _, H, W = codes.shape
    c = m // 2
    # per-pixel contributions to each filter tap, reduced over k in one matmul
    contrib = filters.reshape(K, m * m).T @ codes.reshape(K, H * W)
    contrib = contrib.reshape(m, m, H, W)
    full = np.zeros((H + m - 1, W + m - 1))
    for a in range(m):
        for b in range(m):
            full[a : a + H, b : b + W] += contrib[a, b]
    return full[c : c + H, c : c + W]


def dict_adjoint(filters, residual):
    """``D^T r``: per-filter correlation of ``residual`` with each filter."""
    filters = np.asarray(filters, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    if residual.ndim != 2:
        raise ValueError(f"residual must be 2-D, got shape {residual.shape}")
    K, m, _ = filters.shape
    H, W = residual.shape
    c = m // 2
    padded = np.pad(residual, c)
    patches = sliding_window_view(padded, (m, m)).reshape(H * W, m * m)
    return (patches @ filters.reshape(K, m * m).T).T.reshape(K, H, W)


def _code_matrix(codes, m):
    """Sparse ``Z`` of shape ``(H*W, K*m*m)`` built from the nonzero codes only."""
    K, H, W = codes.shape
    M = m * m
    k, p, q = np.nonzero(codes)
    vals = codes[k, p, q]
    da, db = _tap_offsets(m)
    rows_i = p[:, None] + da[None, :]
    rows_j = q[:, None] + db[None, :]
    valid = (rows_i >= 0) & (rows_i < H) & (rows_j >= 0) & (rows_j < W)
    rows = (rows_i * W + rows_j)[valid]
    cols = (k[:, None] * M + np.arange(M)[None, :])[valid]
    data = np.broadcast_to(vals[:, None], valid.shape)[valid]
    return sparse.csr_matrix((data, (rows, cols)), shape=(H * W, K * M))


class DictOperator:
    """The stacked convolution ``D = [D_1, ..., D_K]`` for a fixed geometry."""

    def __init__(self, filters, shape):
        self.filters = check_filters(filters)
        self.shape = tuple(shape)

    @property
    def n_filters(self):
        return self.filters.shape[0]

    def apply(self, codes):
        codes = np.asarray(codes)
        if codes.shape != (self.n_filters, *self.shape):
            raise ValueError(f"codes shape {codes.shape} != {(self.n_filters, *self.shape)}")
        return dict_apply(self.filters, codes)

    def adjoint(self, residual):
        residual = np.asarray(residual)
        if residual.shape != self.shape:
            raise ValueError(f"residual shape {residual.shape} != {self.shape}")
        return dict_adjoint(self.filters, residual)


class CodeOperator:
    """``Z = [Z_1, ..., Z_K]``, acting on flattened filters of side ``filter_size``.

    The sparse matrix holds at most ``nnz(codes) * m * m`` entries, so every
    product touches only nonzero code coefficients.
    """

    def __init__(self, codes, filter_size):
        codes = np.asarray(codes, dtype=np.float64)
        if codes.ndim != 3:
            raise ValueError(f"codes must have shape (K, H, W), got {codes.shape}")
        if filter_size % 2 == 0:
            raise ValueError("filter_size must be odd")
        self.n_filters, H, W = codes.shape
        self.shape = (H, W)
        self.filter_size = filter_size
        self.matrix = _code_matrix(codes, filter_size)

    def apply(self, filters):
        f = np.asarray(filters, dtype=np.float64).reshape(-1)
        if f.size != self.matrix.shape[1]:
            raise ValueError(f"expected {self.matrix.shape[1]} filter coefficients, got {f.size}")
        return (self.matrix @ f).reshape(self.shape)

    def adjoint(self, residual):
        residual = np.asarray(residual, dtype=np.float64)
        if residual.shape != self.shape:
            raise ValueError(f"residual shape {residual.shape} != {self.shape}")
        m = self.filter_size
        return (self.matrix.T @ residual.reshape(-1)).reshape(self.n_filters, m, m)

    def gram(self):
        """Dense ``Z^T Z`` of shape ``(K*M, K*M)``."""
        return (self.matrix.T @ self.matrix).toarray()


def code_apply(codes, filters):
    """``Z f``; equal to ``dict_apply(filters, codes)``."""
    filters = np.asarray(filters)
    return CodeOperator(codes, filters.shape[-1]).apply(filters)


def code_adjoint(codes, residual, filter_size):
    """``Z^T r`` as a ``(K, m, m)`` array."""
    return CodeOperator(codes, filter_size).adjoint(residual)


# -- subsampling ---------------------------------------------------------------------


@dataclass(frozen=True)
class SubsampleMask:
    """Sorted code positions kept in one iteration, out of ``size = D*K``."""

    indices: np.ndarray
    size: int
    rate: float
    seed: int | None = None
    iteration: int | None = None

    def __len__(self):
        return len(self.indices)

    @property
    def is_full(self):
        return len(self.indices) == self.size

    @classmethod
    def full(cls, size):
        return cls(np.arange(size), size, 1.0)


def mask_count(n_pixels, n_filters, rate):
    # round first so that e.g. 0.7 * 10 does not ceil to 8
    return math.ceil(round(rate * n_pixels * n_filters, 9))


def sample_mask(n_pixels, n_filters, rate, rng, seed=None, iteration=None):
    """Draw ``ceil(rate * D * K)`` distinct code positions uniformly without replacement."""
    if not 0 < rate <= 1:
        raise ValueError("subsample rate must be in (0, 1]")
    size = n_pixels * n_filters
    count = mask_count(n_pixels, n_filters, rate)
    if count >= size:
        return SubsampleMask(np.arange(size), size, rate, seed, iteration)
    indices = np.sort(rng.choice(size, size=count, replace=False))
    return SubsampleMask(indices, size, rate, seed, iteration)


def subsample(mask, codes):
    """Gather the masked coefficients; ``codes`` may carry leading batch axes."""
    codes = np.asarray(codes)
    flat = codes.reshape(*codes.shape[: codes.ndim - 3], -1) if codes.ndim >= 3 else codes
    if flat.shape[-1] != mask.size:
        raise ValueError(f"codes hold {flat.shape[-1]} coefficients, mask expects {mask.size}")
    return flat[..., mask.indices]


def upsample(mask, reduced, code_shape):
    """Scatter reduced coefficients back to ``code_shape``; zero off the mask."""
    reduced = np.asarray(reduced)
    if reduced.shape[-1] != len(mask):
        raise ValueError(f"reduced vector has length {reduced.shape[-1]}, mask has {len(mask)}")
    if int(np.prod(code_shape)) != mask.size:
        raise ValueError("code shape does not match mask size")
    lead = reduced.shape[:-1]
    out = np.zeros((*lead, mask.size))
    out[..., mask.indices] = reduced
    return out.reshape(*lead, *code_shape)


# -- the masked dictionary operator A = D M^T ------------------------------------------


class MaskedDictOperator:
    """``A = W D M^T`` for one mask, with optional 0/1 row weights ``W``.

    When the explicit sparse form fits under ``max_nnz`` (it has at most
    ``|mask| * m * m`` entries) products are sparse mat-vecs; otherwise the
    operator falls back to full convolutions with gather/scatter.
    Batched inputs are row-major: ``(N, |mask|)`` in, ``(N, H*W)`` out.
    """

    def __init__(self, filters, shape, mask=None, row_weights=None, max_nnz=40_000_000):
        self.filters = check_filters(filters)
        K, m, _ = self.filters.shape
        self.shape = tuple(shape)
        H, W = self.shape
        self.n_rows = H * W
        self.mask = SubsampleMask.full(H * W * K) if mask is None else mask
        if self.mask.size != H * W * K:
            raise ValueError("mask size does not match geometry")
        self.n_cols = len(self.mask)
        self.row_weights = None if row_weights is None else np.asarray(row_weights, dtype=np.float64).reshape(-1)
        self.matrix = None
        if self.n_cols * m * m <= max_nnz:
            self.matrix = self._assemble()

    def _assemble(self):
        K, m, _ = self.filters.shape
        H, W = self.shape
        idx = self.mask.indices
        k, pos = np.divmod(idx, H * W)
        p, q = np.divmod(pos, W)
        da, db = _tap_offsets(m)
        rows_i = p[:, None] + da[None, :]
        rows_j = q[:, None] + db[None, :]
        valid = (rows_i >= 0) & (rows_i < H) & (rows_j >= 0) & (rows_j < W)
        rows = (rows_i * W + rows_j)[valid]
        data = self.filters.reshape(K, m * m)[k][valid]
        indptr = np.concatenate(([0], np.cumsum(valid.sum(axis=1))))
        # column j holds filter k(j) shifted to position pos(j)
        A = sparse.csc_matrix((data, rows, indptr), shape=(self.n_rows, self.n_cols))
        if self.row_weights is not None:
            A = sparse.diags(self.row_weights) @ A
            A = A.tocsc()
        return A

    def apply(self, reduced):
        reduced = np.atleast_2d(reduced)
        if self.matrix is not None:
            return np.ascontiguousarray((self.matrix @ reduced.T).T)
        K, _, _ = self.filters.shape
        out = np.empty((len(reduced), self.n_rows))
        for i, u in enumerate(reduced):
            out[i] = dict_apply(self.filters, upsample(self.mask, u, (K, *self.shape))).reshape(-1)
        if self.row_weights is not None:
            out *= self.row_weights
        return out

    def adjoint(self, residual):
        residual = np.atleast_2d(residual)
        if self.matrix is not None:
            return np.ascontiguousarray((self.matrix.T @ residual.T).T)
        if self.row_weights is not None:
            residual = residual * self.row_weights
        out = np.empty((len(residual), self.n_cols))
        for i, r in enumerate(residual):
            out[i] = subsample(self.mask, dict_adjoint(self.filters, r.reshape(self.shape)))
        return out

    def normal_matrix(self, rho):
        """Dense ``A^T A + rho I`` (skinny) or ``A A^T + rho I`` (fat), whichever is smaller."""
        if self.matrix is None:
            raise MemoryError("operator has no explicit sparse form")
        A = self.matrix
        if self.n_cols <= self.n_rows:
            G = (A.T @ A).toarray()
        else:
            G = (A @ A.T).toarray()
        G[np.diag_indices_from(G)] += rho
        return G
