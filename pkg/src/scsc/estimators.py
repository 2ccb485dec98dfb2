"""scikit-learn style estimators wrapping the batch and online drivers.

``X`` is a stack of grayscale images ``(n_images, H, W)`` (or a list of
equally sized 2-D arrays). ``transform`` returns code maps
``(n_images, K, H, W)`` and ``inverse_transform`` maps codes back to images.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import drivers
from . import filter_update as fu
from .applications import infer_codes, reconstruct
from .core import TrainConfig, TraceRow, TrainTrace, init_dictionary, make_rng, nonzero_fraction
from .lasso import AdmmParams


class _CSCBase(TransformerMixin, BaseEstimator):
    def _config(self, **overrides):
        kw = dict(
            n_filters=self.n_filters,
            filter_size=self.filter_size,
            lmbda=self.lmbda,
            subsample=self.subsample,
            admm_iters=self.admm_iters,
            rho=self.rho,
            alpha=self.alpha,
            seed=self.random_state,
            filter_sweeps=self.filter_sweeps,
            cg_tol=self.cg_tol,
            cg_maxiter=self.cg_maxiter,
        )
        kw.update(overrides)
        return TrainConfig(**kw)

    def _inference_params(self):
        return AdmmParams(iterations=self.admm_iters, rho=10.0 * self.lmbda if self.rho is None else self.rho,
                          alpha=self.alpha, cg_tol=self.cg_tol, cg_maxiter=self.cg_maxiter)

    def transform(self, X):
        """Sparse codes of ``X`` under the learned dictionary (no subsampling)."""
        check_is_fitted(self, "dictionary_")
        X = drivers.check_signals(X, self.filter_size, "X")
        return infer_codes(X, self.dictionary_, self.lmbda, params=self._inference_params(), n_jobs=self.n_jobs)

    def inverse_transform(self, codes):
        check_is_fitted(self, "dictionary_")
        return reconstruct(codes, self.dictionary_)

    def score(self, X, y=None):
        """Negative mean objective per image (higher is better)."""
        check_is_fitted(self, "dictionary_")
        X = drivers.check_signals(X, self.filter_size, "X")
        total, _, _ = drivers.evaluate(X, self.dictionary_, self.lmbda, self._inference_params())
        return -total / len(X)

    @property
    def n_features_in_(self):
        check_is_fitted(self, "dictionary_")
        return int(np.prod(self._signal_shape))


class StochasticBatchCSC(_CSCBase):
    """Convolutional dictionary learning with per-iteration code subsampling (batch mode).

    Parameters
    ----------
    n_filters, filter_size : int
        Dictionary size ``K`` and odd filter side ``m``.
    lmbda : float
        L1 weight.
    subsample : float
        Fraction ``p`` of code coefficients optimized per outer iteration;
        ``1.0`` is ordinary CSC.
    admm_iters, rho, alpha : ADMM budget, penalty (default ``10 * lmbda``)
        and over-relaxation.
    max_outer, tol : outer iteration cap and relative-objective stopping tolerance.
    random_state : int
        Seed for dictionary initialization and masks.

    Attributes
    ----------
    dictionary_ : ndarray (K, m, m)
    codes_ : ndarray (n_images, K, H, W)
        Training codes from the last outer iteration.
    trace_ : TrainTrace
    n_iter_ : int
    """

    def __init__(
        self,
        n_filters=100,
        filter_size=11,
        lmbda=1.0,
        subsample=1.0,
        admm_iters=10,
        rho=None,
        alpha=1.8,
        max_outer=20,
        tol=1e-3,
        filter_sweeps=1,
        cg_tol=1e-4,
        cg_maxiter=100,
        random_state=0,
        n_jobs=1,
    ):
        self.n_filters = n_filters
        self.filter_size = filter_size
        self.lmbda = lmbda
        self.subsample = subsample
        self.admm_iters = admm_iters
        self.rho = rho
        self.alpha = alpha
        self.max_outer = max_outer
        self.tol = tol
        self.filter_sweeps = filter_sweeps
        self.cg_tol = cg_tol
        self.cg_maxiter = cg_maxiter
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None, init=None):
        X = drivers.check_signals(X, self.filter_size, "X")
        cfg = self._config(max_outer=self.max_outer, tol=self.tol)
        self.dictionary_, self.codes_, self.trace_ = drivers.train_sbcsc(X, cfg, init=init, n_jobs=self.n_jobs)
        self.n_iter_ = len(self.trace_)
        self._signal_shape = X.shape[1:]
        return self


class StochasticOnlineCSC(_CSCBase):
    """Online convolutional dictionary learning with surrogate statistics.

    Each step draws ``minibatch`` images, solves their subsampled codes under
    one shared mask and folds them into the running averages ``C``, ``B``
    before a single filter update. ``fit`` runs ``n_epochs`` passes over
    ``X`` (or ``max_steps`` steps when given); ``partial_fit`` performs one
    step on the images it is handed.
    """

    def __init__(
        self,
        n_filters=100,
        filter_size=11,
        lmbda=1.0,
        subsample=1.0,
        minibatch=1,
        n_epochs=1,
        max_steps=None,
        shuffle=True,
        admm_iters=10,
        rho=None,
        alpha=1.8,
        quad_mode="factor",
        factor_cap=8192,
        filter_sweeps=1,
        cg_tol=1e-4,
        cg_maxiter=100,
        eval_schedule="pow2",
        random_state=0,
        n_jobs=1,
    ):
        self.n_filters = n_filters
        self.filter_size = filter_size
        self.lmbda = lmbda
        self.subsample = subsample
        self.minibatch = minibatch
        self.n_epochs = n_epochs
        self.max_steps = max_steps
        self.shuffle = shuffle
        self.admm_iters = admm_iters
        self.rho = rho
        self.alpha = alpha
        self.quad_mode = quad_mode
        self.factor_cap = factor_cap
        self.filter_sweeps = filter_sweeps
        self.cg_tol = cg_tol
        self.cg_maxiter = cg_maxiter
        self.eval_schedule = eval_schedule
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _online_config(self, n_steps):
        return self._config(
            minibatch=self.minibatch, quad_mode=self.quad_mode, factor_cap=self.factor_cap, max_outer=n_steps
        )

    def _n_steps(self, n_images):
        if self.max_steps is not None:
            return int(self.max_steps)
        return max(1, -(-n_images * self.n_epochs // self.minibatch))

    def fit(self, X, y=None, X_test=None, init=None):
        X = drivers.check_signals(X, self.filter_size, "X")
        n_steps = self._n_steps(len(X))
        cfg = self._online_config(n_steps)
        stream = drivers.StreamSource(X, "random" if self.shuffle else "sequential", self.random_state)
        self.dictionary_, self.surrogate_, self.trace_ = drivers.train_socsc(
            stream, cfg, test_set=X_test, n_steps=n_steps, eval_schedule=self.eval_schedule,
            init=init, n_jobs=self.n_jobs,
        )
        self.n_steps_ = n_steps
        self._signal_shape = X.shape[1:]
        return self

    def partial_fit(self, X, y=None):
        """One online step with ``X`` as the mini-batch."""
        X = drivers.check_signals(X, self.filter_size, "X")
        cfg = self._online_config(1)
        if not hasattr(self, "dictionary_"):
            self.dictionary_ = init_dictionary(self.n_filters, self.filter_size, make_rng(self.random_state, drivers.INIT_STREAM))
            self.surrogate_ = fu.SurrogateState.empty(self.n_filters, self.filter_size)
            self.trace_ = TrainTrace()
            self.n_steps_ = 0
            self._signal_shape = X.shape[1:]
        step = self.n_steps_ + 1
        res = drivers.socsc_step(X, self.dictionary_, self.surrogate_, cfg, step, n_jobs=self.n_jobs)
        self.dictionary_, self.surrogate_ = res.filters, res.state
        wall = (self.trace_.rows[-1].wall_s if len(self.trace_) else 0.0) + res.code_update_s + res.filter_update_s
        self.trace_.append(TraceRow(step, wall, res.objective, nonzero_fraction(res.codes),
                                    code_update_s=res.code_update_s, filter_update_s=res.filter_update_s))
        self.n_steps_ = step
        return self
