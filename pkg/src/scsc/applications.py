"""Sparse inference with a fixed dictionary, reconstruction and inpainting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import check_filters, make_rng
from .lasso import AdmmParams, solve_codes
from .operators import dict_apply


@dataclass(frozen=True)
class ObservationMask:
    """Binary ``(H, W)`` grid of observed pixels."""

    observed: np.ndarray
    rate: float

    @classmethod
    def random(cls, shape, rate, seed):
        if not 0 < rate <= 1:
            raise ValueError("observation rate must be in (0, 1]")
        observed = make_rng(seed).random(shape) < rate if rate < 1 else np.ones(shape, dtype=bool)
        return cls(observed, rate)

    @property
    def shape(self):
        return self.observed.shape

    @property
    def fraction(self):
        return float(self.observed.mean())


def _params(lmbda, admm_iters, params):
    if params is not None:
        return params
    return AdmmParams(iterations=admm_iters, rho=10.0 * lmbda)


def infer_codes(signals, filters, lmbda=1.0, admm_iters=10, params=None, n_jobs=1):
    """Full (unsubsampled) codes for one signal or a batch, dictionary held fixed."""
    filters = check_filters(filters)
    signals = np.asarray(signals, dtype=np.float64)
    single = signals.ndim == 2
    batch = signals[None] if single else signals
    N, H, W = batch.shape
    reduced = solve_codes(batch, filters, None, lmbda, _params(lmbda, admm_iters, params), n_jobs=n_jobs)
    codes = reduced.reshape(N, filters.shape[0], H, W)
    return codes[0] if single else codes


def reconstruct(codes, filters):
    codes = np.asarray(codes)
    if codes.ndim == 3:
        return dict_apply(filters, codes)
    return np.stack([dict_apply(filters, z) for z in codes])


def inpaint(observed, omask, filters, lmbda=0.4, admm_iters=50, params=None, paste_observed=False, return_codes=False):
    """Fill in unobserved pixels with the dictionary model.

    Solves ``min 0.5 ||W (x - D z)||^2 + lmbda ||z||_1`` with ``W`` the
    observation selector, then returns ``D z``. Observed pixels are only
    copied back when ``paste_observed`` is set.
    """
    filters = check_filters(filters)
    observed = np.asarray(observed, dtype=np.float64)
    mask = omask.observed if isinstance(omask, ObservationMask) else np.asarray(omask, dtype=bool)
    if mask.shape != observed.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image {observed.shape}")
    if not mask.any():
        raise ValueError("observation mask is empty")
    weights = None if mask.all() else mask.astype(np.float64)
    x = np.where(mask, observed, 0.0)
    reduced = solve_codes(x, filters, None, lmbda, _params(lmbda, admm_iters, params), row_weights=weights)
    codes = reduced.reshape(filters.shape[0], *observed.shape)
    recon = dict_apply(filters, codes)
    if paste_observed:
        recon = np.where(mask, observed, recon)
    return (recon, codes) if return_codes else recon
