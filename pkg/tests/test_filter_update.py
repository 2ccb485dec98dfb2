import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from scsc import filter_update as fu
from scsc.core import project_filters
from scsc.filter_update import (
    SurrogateState,
    ball_constrained_minimizer,
    block_coordinate_descent,
    quadratic_value,
    update_surrogates,
)
from scsc.operators import code_apply


def sparse_codes(rng, shape, density=0.15):
    return rng.standard_normal(shape) * (rng.random(shape) < density)


def tiny(seed, n=1, K=2, m=3, H=6, W=6):
    rng = np.random.default_rng(seed)
    codes = sparse_codes(rng, (n, K, H, W), 0.3)
    signals = rng.standard_normal((n, H, W))
    init = project_filters(rng.standard_normal((K, m, m)))
    return codes, signals, init


def batch_objective(codes, signals, filters):
    return sum(0.5 * np.sum((x - code_apply(z, filters)) ** 2) for z, x in zip(codes, signals))


class TestBatchUpdate:
    def test_zero_codes_unchanged_and_flagged(self):
        codes, signals, init = tiny(0)
        res = fu.update_filters_batch(np.zeros_like(codes), signals, init, return_result=True)
        np.testing.assert_array_equal(res.filters, init)
        assert res.degenerate == [0, 1]

    def test_impulse_gives_crop(self):
        rng = np.random.default_rng(1)
        s = 0.1 * rng.standard_normal((9, 9))
        z = np.zeros((1, 9, 9))
        z[0, 4, 4] = 1.0
        out = fu.update_filters_batch(z, s, np.zeros((1, 5, 5)) + 0.01)
        np.testing.assert_allclose(out[0], s[2:7, 2:7] / max(1, np.linalg.norm(s[2:7, 2:7])), atol=1e-12)

    def test_impulse_gives_projected_crop(self):
        rng = np.random.default_rng(1)
        s = 5 * rng.standard_normal((9, 9))
        z = np.zeros((1, 9, 9))
        z[0, 4, 4] = 1.0
        out = fu.update_filters_batch(z, s, np.zeros((1, 5, 5)) + 0.01)
        crop = s[2:7, 2:7]
        np.testing.assert_allclose(out[0], crop / np.linalg.norm(crop), atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_multisweep_matches_qcqp_oracle(self, seed):
        codes, signals, init = tiny(seed)
        C, B = oracle.direct_surrogates(list(codes), signals, 3)
        ref = oracle.qcqp_reference(C, B, 2)
        out = fu.update_filters_batch(codes, signals, init, sweeps=500)
        got = oracle.qcqp_objective(C, B, out.ravel())
        want = oracle.qcqp_objective(C, B, ref)
        assert abs(got - want) <= 1e-6 * max(1.0, abs(want))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), sweeps=st.integers(1, 4))
    def test_monotone_and_feasible(self, seed, sweeps):
        codes, signals, init = tiny(seed, n=2, K=3)
        before = batch_objective(codes, signals, init)
        prev = before
        f = init
        for _ in range(sweeps):
            f = fu.update_filters_batch(codes, signals, f)
            cur = batch_objective(codes, signals, f)
            assert cur <= prev + 1e-10 * max(1.0, abs(prev))
            prev = cur
        assert np.sqrt((f**2).sum(axis=(1, 2))).max() <= 1 + 1e-12

    def test_length_mismatch(self):
        codes, signals, init = tiny(0, n=2)
        with pytest.raises(ValueError):
            fu.update_filters_batch(codes, signals[:1], init)


class TestBallMinimizer:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), rank=st.integers(0, 5), scale=st.floats(0.01, 100))
    def test_kkt(self, seed, rank, scale):
        rng = np.random.default_rng(seed)
        G = rng.standard_normal((5, rank))
        Q = G @ G.T
        b = scale * rng.standard_normal(5)
        y = ball_constrained_minimizer(Q, b)
        assert np.linalg.norm(y) <= 1 + 1e-12
        # no feasible point in a random sample beats it
        cand = rng.standard_normal((200, 5))
        cand /= np.maximum(1, np.linalg.norm(cand, axis=1))[:, None]
        val = 0.5 * y @ Q @ y - b @ y
        vals = 0.5 * np.einsum("ij,jk,ik->i", cand, Q, cand) - cand @ b
        assert val <= vals.min() + 1e-9 * max(1, abs(val))
        # compare with the projected-gradient oracle on the single block
        ref = oracle.qcqp_reference(Q + 1e-300, b, 1, tol=1e-12) if rank else None
        if ref is not None:
            assert val <= oracle.qcqp_objective(Q, b, ref) + 1e-7 * max(1, abs(val))

    def test_interior_solution(self):
        Q = np.diag([4.0, 2.0])
        y = ball_constrained_minimizer(Q, np.array([1.0, 0.5]))
        np.testing.assert_allclose(y, [0.25, 0.25])

    def test_identity_curvature(self):
        C = np.eye(18)
        res = block_coordinate_descent(C, np.zeros(18), np.ones((2, 3, 3)) / 3)
        assert not res.filters.any()
        b = np.random.default_rng(0).standard_normal(18) * 0.2
        res = block_coordinate_descent(C, b, np.ones((2, 3, 3)) / 3)
        np.testing.assert_allclose(res.filters.ravel(), b, atol=1e-14)


class TestSurrogates:
    def test_first_update_is_exact(self):
        codes, signals, _ = tiny(3)
        st0 = SurrogateState.empty(2, 3)
        st1 = update_surrogates(st0, codes[0], signals[0])
        C, B = oracle.direct_surrogates([codes[0]], signals, 3)
        assert st1.t == 1
        np.testing.assert_allclose(st1.C, C, rtol=0, atol=1e-12 * np.abs(C).max())
        np.testing.assert_allclose(st1.B, B, rtol=0, atol=1e-12 * np.abs(B).max())

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), sizes=st.lists(st.integers(1, 3), min_size=1, max_size=4))
    def test_matches_direct_average(self, seed, sizes):
        codes, signals, _ = tiny(seed, n=sum(sizes))
        state = SurrogateState.empty(2, 3)
        start = 0
        for s in sizes:
            state = update_surrogates(state, codes[start : start + s], signals[start : start + s])
            start += s
        C, B = oracle.direct_surrogates(list(codes), signals, 3)
        assert state.t == len(codes)
        assert np.abs(state.C - C).max() <= 1e-12 * max(1.0, np.abs(C).max())
        assert np.abs(state.B - B).max() <= 1e-12 * max(1.0, np.abs(B).max())
        np.testing.assert_array_equal(state.C, state.C.T)
        assert np.linalg.eigvalsh(state.C).min() >= -1e-10 * np.trace(state.C)

    def test_zero_codes_decay(self):
        codes, signals, _ = tiny(4)
        s1 = update_surrogates(SurrogateState.empty(2, 3), codes[0], signals[0])
        s2 = update_surrogates(s1, np.zeros_like(codes[0]), signals[0])
        np.testing.assert_allclose(s2.C, 0.5 * s1.C, atol=1e-15)
        np.testing.assert_allclose(s2.B, 0.5 * s1.B, atol=1e-15)

    def test_shape_mismatch(self):
        codes, signals, _ = tiny(0)
        with pytest.raises(ValueError):
            update_surrogates(SurrogateState.empty(3, 3), codes, signals)

    def test_online_requires_observations(self):
        with pytest.raises(ValueError):
            fu.update_filters_online(SurrogateState.empty(2, 3), np.zeros((2, 3, 3)))

    def test_online_objective_equivalence(self):
        codes, signals, init = tiny(9, n=3)
        state = SurrogateState.empty(2, 3)
        for z, x in zip(codes, signals):
            state = update_surrogates(state, z, x)
        f = fu.update_filters_online(state, init)
        direct = np.mean([0.5 * np.sum((x - code_apply(z, f)) ** 2) - 0.5 * np.sum(x**2)
                          for z, x in zip(codes, signals)])
        assert abs(quadratic_value(state.C, state.B, f) - direct) <= 1e-10 * max(1, abs(direct))
