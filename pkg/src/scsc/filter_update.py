"""Dictionary update by projected block coordinate descent.

Both the batch problem (``min 0.5 sum_i ||x_i - Z_i f||^2``) and the online
surrogate problem (``min 0.5 f^T C f - f^T B``) reduce to the same quadratic
over the stacked filters ``f`` with one unit-ball constraint per filter. A
block is one filter; each block step minimizes the quadratic exactly over
the ball with the other filters held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .core import check_filters
from .operators import CodeOperator

log = logging.getLogger(__name__)


@dataclass
class SurrogateState:
    """Running averages ``C = mean_i Z_i^T Z_i`` and ``B = mean_i Z_i^T x_i``."""

    C: np.ndarray
    B: np.ndarray
    t: int = 0

    @classmethod
    def empty(cls, n_filters, filter_size):
        n = n_filters * filter_size * filter_size
        return cls(np.zeros((n, n)), np.zeros(n), 0)

    @property
    def dim(self):
        return self.B.shape[0]


@dataclass
class FilterUpdateResult:
    filters: np.ndarray
    degenerate: list
    objective: float


def _sufficient_stats(codes, signals, filter_size):
    """``sum_i Z_i^T Z_i`` and ``sum_i Z_i^T x_i`` plus per-member Gram list."""
    codes = np.asarray(codes, dtype=np.float64)
    signals = np.asarray(signals, dtype=np.float64)
    if codes.ndim == 3:
        codes, signals = codes[None], signals[None]
    if len(codes) != len(signals):
        raise ValueError("codes and signals must have the same length")
    K = codes.shape[1]
    n = K * filter_size * filter_size
    C = np.zeros((n, n))
    B = np.zeros(n)
    for z, x in zip(codes, signals):
        if z.shape[1:] != x.shape:
            raise ValueError(f"code geometry {z.shape[1:]} does not match signal {x.shape}")
        op = CodeOperator(z, filter_size)
        C += op.gram()
        B += op.matrix.T @ x.reshape(-1)
    return C, B


def update_surrogates(state, codes, signals):
    """Fold a batch of (codes, signal) pairs into the surrogate averages.

    Equivalent to applying ``C_t = (t-1)/t C_{t-1} + 1/t Z_t^T Z_t`` (and the
    same for ``B``) once per member, with ``t`` advancing per member.
    """
    codes = np.asarray(codes, dtype=np.float64)
    signals = np.asarray(signals, dtype=np.float64)
    if codes.ndim == 3:
        codes, signals = codes[None], signals[None]
    m = int(round(np.sqrt(state.dim / codes.shape[1])))
    if codes.shape[1] * m * m != state.dim:
        raise ValueError("codes do not match surrogate dimension")
    C_sum, B_sum = _sufficient_stats(codes, signals, m)
    t_new = state.t + len(codes)
    keep = state.t / t_new
    C = keep * state.C + C_sum / t_new
    C = 0.5 * (C + C.T)
    B = keep * state.B + B_sum / t_new
    return SurrogateState(C, B, t_new)


def quadratic_value(C, B, f):
    f = np.asarray(f).reshape(-1)
    return 0.5 * float(f @ C @ f) - float(f @ B)


def ball_constrained_minimizer(Q, b):
    """``argmin 0.5 y^T Q y - b^T y`` subject to ``||y|| <= 1``, for PSD ``Q``.

    Uses the eigendecomposition of ``Q``: the unconstrained (minimum-norm)
    minimizer if it is feasible, otherwise the boundary point
    ``(Q + mu I)^{-1} b`` with ``mu > 0`` found by root finding.
    """
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    w = np.maximum(w, 0.0)
    beta = V.T @ b
    zero = w <= w.max() * len(w) * np.finfo(float).eps
    flat_dir = zero & (np.abs(beta) > 1e-14 * max(1.0, np.abs(beta).max()))
    if not flat_dir.any():
        coef = np.where(zero, 0.0, beta / np.where(zero, 1.0, w))
        y = V @ coef
        if np.linalg.norm(y) <= 1.0:
            return y
    keep = ~zero | flat_dir
    ww = np.where(zero, 0.0, w)[keep]
    bb = beta[keep]
    Vk = V[:, keep]

    def excess(mu):
        return np.sum((bb / (ww + mu)) ** 2) - 1.0

    hi = 2.0 * max(np.linalg.norm(bb), 1e-300)
    lo = 0.0
    if flat_dir.any():
        lo = hi * 1e-16
        while excess(lo) <= 0:
            lo *= 1e-4
    mu = optimize.brentq(excess, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    y = Vk @ (bb / (ww + mu))
    return y / max(1.0, np.linalg.norm(y))


def block_coordinate_descent(C, B, init, sweeps=1):
    """Cyclic exact block minimization of ``0.5 f^T C f - f^T B`` over per-filter unit balls.

    Filters whose diagonal block of ``C`` is identically zero are left
    unchanged and reported in ``degenerate``.
    """
    init = check_filters(init)
    K, m, _ = init.shape
    M = m * m
    f = init.reshape(K, M).copy()
    degenerate = []
    for k in range(K):
        if not np.any(C[k * M : (k + 1) * M, k * M : (k + 1) * M]):
            degenerate.append(k)
    if degenerate:
        log.debug("filters with zero curvature left unchanged: %s", degenerate)
    skip = set(degenerate)
    for _ in range(sweeps):
        for k in range(K):
            if k in skip:
                continue
            sl = slice(k * M, (k + 1) * M)
            Ckk = C[sl, sl]
            # right-hand side with the other blocks fixed
            rhs = B[sl] - C[sl, :] @ f.reshape(-1) + Ckk @ f[k]
            f[k] = ball_constrained_minimizer(Ckk, rhs)
    return FilterUpdateResult(f.reshape(K, m, m), degenerate, quadratic_value(C, B, f))


def update_filters_batch(codes, signals, init, sweeps=1, return_result=False):
    """Filter update for the full batch: ``min 0.5 sum_i ||x_i - Z_i f||^2`` over unit balls."""
    init = check_filters(init)
    C, B = _sufficient_stats(codes, signals, init.shape[1])
    res = block_coordinate_descent(C, B, init, sweeps)
    return res if return_result else res.filters


def update_filters_online(state, init, sweeps=1, return_result=False):
    """Filter update on the surrogate quadratic ``0.5 f^T C f - f^T B``."""
    if state.t < 1:
        raise ValueError("surrogate state has no observations")
    res = block_coordinate_descent(state.C, state.B, init, sweeps)
    return res if return_result else res.filters
