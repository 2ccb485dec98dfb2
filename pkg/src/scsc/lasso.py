"""Masked code update: ADMM for ``min 0.5||x - A u||^2 + lmbda ||u||_1`` with ``A = D M^T``.

The split is on the L1 variable (scaled dual form). The quadratic substep
``(A^T A + rho I) u = q`` is solved either by warm-started conjugate
gradients or by a cached Cholesky factorization that is shared by every
signal in the batch (all signals in a call share the dictionary and mask).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .core import NumericalError
from .operators import MaskedDictOperator


@dataclass
class AdmmParams:
    iterations: int = 10
    rho: float | None = None
    alpha: float = 1.8
    quad_mode: str = "cg"
    cg_tol: float = 1e-4
    cg_maxiter: int = 100
    factor_cap: int = 8192

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.rho is not None and not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not 0 < self.alpha < 2:
            raise ValueError("alpha must be in (0, 2)")
        if self.quad_mode not in ("cg", "factor"):
            raise ValueError("quad_mode must be 'cg' or 'factor'")

    @classmethod
    def from_config(cls, cfg, **overrides):
        kw = dict(
            iterations=cfg.admm_iters,
            rho=cfg.resolved_rho,
            alpha=cfg.alpha,
            quad_mode=cfg.quad_mode,
            cg_tol=cfg.cg_tol,
            cg_maxiter=cfg.cg_maxiter,
            factor_cap=cfg.factor_cap,
        )
        kw.update(overrides)
        return cls(**kw)


@dataclass
class AdmmInfo:
    quad_mode: str
    cg_iterations: int = 0
    cg_unconverged: int = 0
    extra: dict = field(default_factory=dict)


def shrinkage(v, kappa):
    """Soft thresholding, the proximal map of ``kappa * ||.||_1``."""
    if kappa < 0:
        raise ValueError("shrinkage threshold must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


class FactorCache:
    """Cholesky factorization of the ADMM normal equations for one operator.

    For a fat ``A`` (more columns than rows) the ``A A^T + rho I`` system is
    factored and the solve goes through the matrix inversion lemma.
    """

    def __init__(self, op, rho):
        self.op = op
        self.rho = rho
        self.skinny = op.n_cols <= op.n_rows
        self.cho = linalg.cho_factor(op.normal_matrix(rho), lower=True, check_finite=False)

    def solve(self, q):
        """Solve ``(A^T A + rho I) u = q`` for each row of ``q``."""
        if self.skinny:
            return linalg.cho_solve(self.cho, q.T, check_finite=False).T
        Aq = self.op.apply(q)
        y = linalg.cho_solve(self.cho, Aq.T, check_finite=False).T
        return (q - self.op.adjoint(y)) / self.rho


def quad_substep_factor_cache(op, rho, cap=8192):
    """Factor the normal equations of ``op``; ``None`` when too large to assemble."""
    if op.matrix is None or min(op.n_rows, op.n_cols) > cap:
        return None
    return FactorCache(op, rho)


def conjugate_gradient(op, rho, b, x0, tol=1e-4, maxiter=100):
    """Row-wise CG on ``(A^T A + rho I) x = b``.

    Each row converges (and is frozen) independently, so a row's result does
    not depend on which other rows share the call.
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    r = b - (op.adjoint(op.apply(x)) + rho * x)
    p = r.copy()
    rs = np.einsum("ij,ij->i", r, r)
    bnorm = np.sqrt(np.einsum("ij,ij->i", b, b))
    target = (tol * bnorm) ** 2
    active = rs > target
    iters = 0
    for _ in range(maxiter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        iters += 1
        P = p[idx]
        AP = op.adjoint(op.apply(P)) + rho * P
        step = rs[idx] / np.einsum("ij,ij->i", P, AP)
        x[idx] += step[:, None] * P
        r[idx] -= step[:, None] * AP
        rs_new = np.einsum("ij,ij->i", r[idx], r[idx])
        p[idx] = r[idx] + (rs_new / rs[idx])[:, None] * P
        rs[idx] = rs_new
        active[idx] = rs_new > target[idx]
    return x, iters, int(active.sum())


def admm_lasso(op, X, lmbda, params, warm=None, factor=None):
    """Run ``params.iterations`` ADMM steps for every row of ``X`` (shape ``(N, H*W)``)."""
    rho = params.rho if params.rho is not None else 10.0 * lmbda
    alpha = params.alpha
    AtX = op.adjoint(X)
    n, L = AtX.shape
    if warm is None:
        x = np.zeros((n, L))
        z = np.zeros((n, L))
    else:
        x = np.array(warm, dtype=np.float64, copy=True).reshape(n, L)
        z = x.copy()
    u = np.zeros((n, L))
    info = AdmmInfo(quad_mode="factor" if factor is not None else "cg")
    kappa = lmbda / rho
    for _ in range(params.iterations):
        q = AtX + rho * (z - u)
        if factor is not None:
            x = factor.solve(q)
        else:
            x, its, bad = conjugate_gradient(op, rho, q, x, params.cg_tol, params.cg_maxiter)
            info.cg_iterations += its
            info.cg_unconverged += bad
        x_hat = alpha * x + (1.0 - alpha) * z
        z = shrinkage(x_hat + u, kappa)
        u += x_hat - z
    if not np.all(np.isfinite(z)):
        raise NumericalError("ADMM produced non-finite codes")
    return z, info


def solve_codes(
    signals,
    filters,
    mask=None,
    lmbda=1.0,
    params=None,
    warm=None,
    row_weights=None,
    n_jobs=1,
    return_info=False,
):
    """Masked sparse codes for one signal ``(H, W)`` or a batch ``(N, H, W)``.

    Returns the reduced codes (length ``|mask|`` per signal). ``mask=None``
    optimizes every coefficient. All signals share ``filters`` and ``mask``,
    so the operator (and, in factor mode, its factorization) is built once.
    """
    params = AdmmParams() if params is None else params
    signals = np.asarray(signals, dtype=np.float64)
    single = signals.ndim == 2
    if single:
        signals = signals[None]
    if signals.ndim != 3:
        raise ValueError(f"signals must be (H, W) or (N, H, W), got {signals.shape}")
    N, H, W = signals.shape
    op = MaskedDictOperator(filters, (H, W), mask=mask, row_weights=row_weights)
    X = signals.reshape(N, H * W)
    if op.row_weights is not None:
        X = X * op.row_weights
    if warm is not None:
        warm = np.asarray(warm, dtype=np.float64).reshape(N, op.n_cols)
    rho = params.rho if params.rho is not None else 10.0 * lmbda

    factor = None
    if params.quad_mode == "factor":
        factor = quad_substep_factor_cache(op, rho, params.factor_cap)

    chunks = np.array_split(np.arange(N), max(1, min(int(n_jobs), N)))
    if len(chunks) == 1:
        Z, info = admm_lasso(op, X, lmbda, params, warm, factor)
    else:
        def run(idx):
            return admm_lasso(op, X[idx], lmbda, params, None if warm is None else warm[idx], factor)

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(run, chunks))
        Z = np.concatenate([r[0] for r in results])
        info = results[0][1]
        info.cg_iterations = sum(r[1].cg_iterations for r in results)
        info.cg_unconverged = sum(r[1].cg_unconverged for r in results)
    if factor is None and params.quad_mode == "factor":
        info.extra["factor_fallback"] = True
    out = Z[0] if single else Z
    return (out, info) if return_info else out


def lasso_objective(op, X, Z, lmbda):
    """Per-row ``0.5||x - A z||^2 + lmbda ||z||_1``."""
    R = X - op.apply(Z)
    return 0.5 * np.sum(R**2, axis=1) + lmbda * np.sum(np.abs(Z), axis=1)
