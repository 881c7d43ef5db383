import numpy as np
import pytest

from splatmap.adam import BETA2, EPS, AdamState, ScalarAdam, adam_step

LRS = {"position": 1e-2, "sh0": 1e-2, "sh_rest": 1e-2,
       "opacity_logit": 1e-2, "log_scale": 1e-2, "rotation": 1e-2}


def make_params(rng, n, dtype=np.float64):
    return {"position": rng.normal(size=(n, 3)).astype(dtype),
            "log_scale": rng.normal(size=(n, 3)).astype(dtype),
            "rotation": rng.normal(size=(n, 4)).astype(dtype),
            "opacity_logit": rng.normal(size=(n,)).astype(dtype),
            "sh": rng.normal(size=(n, 16, 3)).astype(dtype)}


def clone(params):
    return {k: v.copy() for k, v in params.items()}


class TestAdamStep:
    def test_single_step_closed_form(self):
        # first step: update = -lr * g / (|g| + eps) up to the eps convention
        rng = np.random.default_rng(0)
        n = 8
        params = make_params(rng, n)
        before = clone(params)
        grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
        state = AdamState(n, LRS, dtype=np.float64)
        adam_step(params, grads, state)
        for k in params:
            g = grads[k]
            want = before[k] - 1e-2 * g / (np.abs(g) + EPS * np.sqrt(1 - BETA2))
            np.testing.assert_allclose(params[k], want, rtol=1e-9)

    def test_empty_active_is_noop(self):
        rng = np.random.default_rng(1)
        params = make_params(rng, 5)
        before = clone(params)
        grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
        state = AdamState(5, LRS, dtype=np.float64)
        adam_step(params, grads, state, active=np.array([], dtype=np.int64))
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])
        assert not state.steps.any()

    def test_inactive_rows_untouched(self):
        rng = np.random.default_rng(2)
        params = make_params(rng, 6)
        before = clone(params)
        grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
        state = AdamState(6, LRS, dtype=np.float64)
        adam_step(params, grads, state, active=np.array([1, 4]))
        for k in params:
            np.testing.assert_array_equal(params[k][0], before[k][0])
            assert not np.array_equal(params[k][1], before[k][1])
        assert state.steps.tolist() == [0, 1, 0, 0, 1, 0]

    def test_sparse_all_equals_dense_bitwise(self):
        rng = np.random.default_rng(3)
        n = 17
        p1 = make_params(rng, n, dtype=np.float32)
        p2 = clone(p1)
        s1 = AdamState(n, LRS, dtype=np.float32)
        s2 = AdamState(n, LRS, dtype=np.float32)
        for step in range(4):
            grads = {k: rng.normal(size=v.shape).astype(np.float32)
                     for k, v in p1.items()}
            adam_step(p1, grads, s1, active=None)
            adam_step(p2, grads, s2, active=np.arange(n))
        for k in p1:
            np.testing.assert_array_equal(p1[k], p2[k])
            np.testing.assert_array_equal(s1.m[k], s2.m[k])
            np.testing.assert_array_equal(s1.v[k], s2.v[k])

    def test_replay_oracle_for_intermittent_gaussian(self):
        # a Gaussian active only on some rounds must evolve exactly like a
        # fresh optimizer fed only its own active-round gradients
        rng = np.random.default_rng(4)
        n = 3
        params = make_params(rng, n)
        fresh = {k: v[[1]].copy() for k, v in params.items()}
        state = AdamState(n, LRS, dtype=np.float64)
        fresh_state = AdamState(1, LRS, dtype=np.float64)
        active_rounds = [True, False, False, True, True, False, True]
        for active in active_rounds:
            grads = {k: rng.normal(size=v.shape) for k, v in params.items()}
            idx = np.array([0, 1, 2]) if active else np.array([0, 2])
            adam_step(params, grads, state, active=idx)
            if active:
                g1 = {k: v[[1]] for k, v in grads.items()}
                adam_step(fresh, g1, fresh_state)
        for k in params:
            np.testing.assert_allclose(params[k][1], fresh[k][0], rtol=1e-14)

    def test_resize_preserves_and_extends(self):
        state = AdamState(2, LRS, dtype=np.float32)
        state.m["position"][:] = 1.0
        state.steps[:] = 5
        state.resize(4)
        assert state.count == 4
        np.testing.assert_array_equal(state.m["position"][:2], 1.0)
        np.testing.assert_array_equal(state.m["position"][2:], 0.0)
        assert state.steps.tolist() == [5, 5, 0, 0]
        with pytest.raises(ValueError):
            state.resize(3)

    def test_sh_group_uses_two_rates(self):
        rng = np.random.default_rng(5)
        lrs = dict(LRS, sh0=1e-2, sh_rest=1e-3)
        params = make_params(rng, 1)
        grads = {k: np.ones_like(v) for k, v in params.items()}
        state = AdamState(1, lrs, dtype=np.float64)
        before = clone(params)
        adam_step(params, grads, state)
        d = before["sh"] - params["sh"]
        assert d[0, 0, 0] == pytest.approx(10 * d[0, 1, 0], rel=1e-6)


class TestScalarAdam:
    def test_moves_toward_minimum(self):
        opt = ScalarAdam((3, 4), lr=0.05)
        x = np.zeros((3, 4))
        target = np.ones((3, 4))
        for _ in range(300):
            opt.step(x, 2 * (x - target))
        np.testing.assert_allclose(x, target, atol=1e-2)
