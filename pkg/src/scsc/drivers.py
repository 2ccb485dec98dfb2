"""Outer loops: stochastic batch CSC and stochastic online CSC.

Random streams are keyed by ``(seed, purpose, counter)`` so that a run is
reproducible bit-for-bit whatever the worker count.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import filter_update as fu
from .applications import infer_codes
from .core import (
    NumericalError,
    TraceRow,
    TrainTrace,
    check_finite,
    init_dictionary,
    make_rng,
    nonzero_fraction,
    rescaled_psnr,
)
from .lasso import AdmmParams, solve_codes
from .operators import CodeOperator, dict_apply, sample_mask, subsample, upsample

log = logging.getLogger(__name__)

# stream identifiers for make_rng
INIT_STREAM = 0
MASK_STREAM = 1
DRAW_STREAM = 2


def check_signals(signals, filter_size=None, name="signals"):
    """Validate a batch of equally sized 2-D signals, returned as ``(N, H, W)`` float64."""
    if isinstance(signals, np.ndarray):
        arr = signals
    else:
        signals = list(signals)
        if not signals:
            raise ValueError(f"{name}: need at least one signal")
        shapes = {np.shape(s) for s in signals}
        if len(shapes) != 1:
            raise ValueError(f"{name}: all signals must share one geometry, got {sorted(shapes)}")
        arr = np.stack([np.asarray(s) for s in signals])
    arr = check_finite(arr, name)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or len(arr) == 0:
        raise ValueError(f"{name}: expected (N, H, W), got shape {arr.shape}")
    if filter_size is not None and min(arr.shape[1:]) < filter_size:
        raise ValueError(f"{name}: images {arr.shape[1:]} smaller than filter side {filter_size}")
    return arr


def _objective_from_codes(signals, filters, codes, lmbda):
    """Eq.-1 style objective summed over images, plus the reconstructions."""
    total = 0.0
    recon = np.empty_like(signals)
    for i, (x, z) in enumerate(zip(signals, codes)):
        recon[i] = CodeOperator(z, filters.shape[1]).apply(filters)
        total += 0.5 * float(np.sum((x - recon[i]) ** 2)) + lmbda * float(np.sum(np.abs(z)))
    if not math.isfinite(total):
        raise NumericalError("objective became non-finite")
    return total, recon


def evaluate(signals, filters, lmbda, params=None):
    """Objective and mean rescaled PSNR of a dictionary on held-out signals (no subsampling)."""
    codes = infer_codes(signals, filters, lmbda, params=params)
    total, recon = _objective_from_codes(signals, filters, codes, lmbda)
    score = float(np.mean([rescaled_psnr(x, r) for x, r in zip(signals, recon)]))
    return total, score, codes


def train_sbcsc(signals, cfg, init=None, n_jobs=1, callback=None):
    """Stochastic batch CSC.

    Each outer iteration draws one mask shared by all signals, solves the
    masked LASSO for every signal, scatters the codes back to full size
    (unsampled positions become zero) and updates the filters once.

    Returns ``(filters, codes, trace)``.
    """
    cfg.validate()
    X = check_signals(signals, cfg.filter_size)
    N, H, W = X.shape
    K, m = cfg.n_filters, cfg.filter_size
    filters = init_dictionary(K, m, make_rng(cfg.seed, INIT_STREAM)) if init is None else np.array(init, dtype=float)
    if filters.shape != (K, m, m):
        raise ValueError(f"init dictionary has shape {filters.shape}, expected {(K, m, m)}")
    params = AdmmParams.from_config(cfg)
    codes = np.zeros((N, K, H, W))
    trace = TrainTrace()
    wall = 0.0
    prev = None
    for it in range(1, cfg.max_outer + 1):
        t0 = time.perf_counter()
        mask = sample_mask(H * W, K, cfg.subsample, make_rng(cfg.seed, MASK_STREAM, it), cfg.seed, it)
        warm = subsample(mask, codes)
        reduced = solve_codes(X, filters, mask, cfg.lmbda, params, warm=warm, n_jobs=n_jobs)
        codes = upsample(mask, reduced, (K, H, W))
        t1 = time.perf_counter()
        filters = fu.update_filters_batch(codes, X, filters, sweeps=cfg.filter_sweeps)
        t2 = time.perf_counter()
        obj, _ = _objective_from_codes(X, filters, codes, cfg.lmbda)
        wall += t2 - t0
        trace.append(
            TraceRow(
                iter=it,
                wall_s=wall,
                objective=obj,
                nnz_frac=nonzero_fraction(codes),
                code_update_s=t1 - t0,
                filter_update_s=t2 - t1,
            )
        )
        log.info("sbcsc iter %d objective %.6g (%.2fs)", it, obj, t2 - t0)
        if callback is not None:
            callback(it, filters, codes, trace)
        if prev is not None and abs(prev - obj) <= cfg.tol * abs(prev):
            break
        prev = obj
    return filters, codes, trace


class StreamSource:
    """Ordered supplier of training signals.

    ``policy='sequential'`` cycles through the signals in order;
    ``policy='random'`` visits them in a fresh seeded permutation each pass.
    """

    def __init__(self, signals, policy="sequential", seed=0):
        if policy not in ("sequential", "random"):
            raise ValueError("policy must be 'sequential' or 'random'")
        self.signals = check_signals(signals)
        self.policy = policy
        self.seed = seed
        self._epoch = 0
        self._order = self._permutation()
        self._pos = 0

    def __len__(self):
        return len(self.signals)

    @property
    def shape(self):
        return self.signals.shape[1:]

    def _permutation(self):
        if self.policy == "sequential":
            return np.arange(len(self.signals))
        return make_rng(self.seed, DRAW_STREAM, self._epoch).permutation(len(self.signals))

    def draw(self, count):
        out = []
        for _ in range(count):
            if self._pos == len(self._order):
                self._epoch += 1
                self._order = self._permutation()
                self._pos = 0
            out.append(self._order[self._pos])
            self._pos += 1
        return self.signals[np.array(out)]


def pow2_schedule(step, last):
    """True on steps 1, 2, 4, 8, ... and on the final step."""
    return step == last or (step & (step - 1)) == 0


EVAL_SCHEDULES = {
    "pow2": pow2_schedule,
    "every": lambda step, last: True,
    "last": lambda step, last: step == last,
    "none": lambda step, last: False,
}


@dataclass
class OnlineStep:
    filters: np.ndarray
    state: fu.SurrogateState
    codes: np.ndarray
    objective: float
    code_update_s: float
    filter_update_s: float


def socsc_step(batch, filters, state, cfg, step, params=None, n_jobs=1):
    """One online step on a mini-batch sharing a single mask."""
    N, H, W = batch.shape
    K = filters.shape[0]
    params = AdmmParams.from_config(cfg) if params is None else params
    t0 = time.perf_counter()
    mask = sample_mask(H * W, K, cfg.subsample, make_rng(cfg.seed, MASK_STREAM, step), cfg.seed, step)
    reduced = solve_codes(batch, filters, mask, cfg.lmbda, params, n_jobs=n_jobs)
    codes = upsample(mask, reduced, (K, H, W))
    t1 = time.perf_counter()
    state = fu.update_surrogates(state, codes, batch)
    filters = fu.update_filters_online(state, filters, sweeps=cfg.filter_sweeps)
    t2 = time.perf_counter()
    obj, _ = _objective_from_codes(batch, filters, codes, cfg.lmbda)
    return OnlineStep(filters, state, codes, obj, t1 - t0, t2 - t1)


def train_socsc(stream, cfg, test_set=None, n_steps=None, eval_schedule="pow2", init=None, n_jobs=1, callback=None):
    """Stochastic online CSC over ``stream``.

    ``n_steps`` defaults to ``cfg.max_outer``. The trace records wall time
    spent training only; held-out evaluation is excluded from it.

    Returns ``(filters, state, trace)``.
    """
    cfg.validate()
    if not isinstance(stream, StreamSource):
        stream = StreamSource(stream)
    if len(stream) == 0:
        raise ValueError("empty stream")
    H, W = stream.shape
    K, m = cfg.n_filters, cfg.filter_size
    if min(H, W) < m:
        raise ValueError("stream signals smaller than the filter side")
    if test_set is not None:
        test_set = check_signals(test_set, m, "test_set")
    n_steps = cfg.max_outer if n_steps is None else int(n_steps)
    should_eval = EVAL_SCHEDULES[eval_schedule]
    filters = init_dictionary(K, m, make_rng(cfg.seed, INIT_STREAM)) if init is None else np.array(init, dtype=float)
    state = fu.SurrogateState.empty(K, m)
    params = AdmmParams.from_config(cfg)
    eval_params = AdmmParams.from_config(cfg, quad_mode="cg")
    trace = TrainTrace()
    wall = 0.0
    for step in range(1, n_steps + 1):
        batch = stream.draw(cfg.minibatch)
        res = socsc_step(batch, filters, state, cfg, step, params, n_jobs)
        filters, state = res.filters, res.state
        wall += res.code_update_s + res.filter_update_s
        row = TraceRow(
            iter=step,
            wall_s=wall,
            objective=res.objective,
            nnz_frac=nonzero_fraction(res.codes),
            code_update_s=res.code_update_s,
            filter_update_s=res.filter_update_s,
        )
        if test_set is not None and should_eval(step, n_steps):
            row.test_objective, row.test_psnr_db, _ = evaluate(test_set, filters, cfg.lmbda, eval_params)
        trace.append(row)
        if callback is not None:
            callback(step, filters, state, trace)
    return filters, state, trace
