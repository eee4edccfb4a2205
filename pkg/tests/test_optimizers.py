import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from muloco.inner_optim import (AdamwState, MuonState, OptimConfig, adamw_step, apply_step, init_state, muon_lr,
                                muon_step, step_lr, step_record)
from muloco.linalg import newton_schulz
from muloco.outer_optim import OuterConfig, OuterState, mean_in_order, outer_step, pseudogradient

RNG = np.random.default_rng(0)


class TestAdamw:
    def test_first_step_by_hand(self):
        cfg = OptimConfig("adamw", lr=0.1, beta1=0.9, beta2=0.99, epsilon=1e-8)
        theta, state = adamw_step(np.zeros(1), np.ones(1), AdamwState.zeros_like(np.zeros(1)), cfg)
        # m_hat = 0.1 / 0.1 = 1 and v_hat = 0.01 / 0.01 = 1, so the step is 0.1 / (1 + 1e-8).
        assert theta[0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-15)
        assert state.step_count == 1
        assert state.m[0] == pytest.approx(0.1) and state.v[0] == pytest.approx(0.01)

    def test_constant_gradient_unit_step(self):
        cfg = OptimConfig("adamw", lr=0.01)
        g = np.array([3.0, -0.2, 7.0])
        theta, state = np.zeros(3), AdamwState.zeros_like(np.zeros(3))
        for _ in range(500):
            before = theta
            theta, state = adamw_step(theta, g, state, cfg)
        assert np.allclose(before - theta, 0.01 * np.sign(g), rtol=1e-6)

    def test_zero_lr_updates_moments_only(self):
        cfg = OptimConfig("adamw", lr=0.0, weight_decay=0.5)
        theta = RNG.standard_normal((2, 3))
        out, state = adamw_step(theta, np.ones((2, 3)), AdamwState.zeros_like(theta), cfg)
        assert np.array_equal(out, theta)
        assert np.all(state.m != 0) and state.step_count == 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adamw_step(np.zeros(2), np.zeros(3), AdamwState.zeros_like(np.zeros(2)), OptimConfig())


class TestMuon:
    def test_step_is_orthogonalized_momentum(self):
        cfg = OptimConfig("muon", lr=0.02, beta1=0.95)
        theta, g = RNG.standard_normal((4, 6)), RNG.standard_normal((4, 6))
        m0 = RNG.standard_normal((4, 6))
        out, state = muon_step(theta, g, MuonState(m0), cfg)
        m = 0.95 * m0 + g
        assert np.array_equal(state.m, m)
        eta = 0.02 * math.sqrt(6 / 4)
        assert np.allclose(step_record(theta, out), eta * newton_schulz(m), rtol=0, atol=1e-15)

    def test_shape_rescale(self):
        cfg = OptimConfig("muon", lr=0.1)
        assert muon_lr((2, 8), cfg) == pytest.approx(0.2, rel=1e-15)
        assert muon_lr((2, 8), OptimConfig("muon", lr=0.1, lr_shape_rescale=False)) == 0.1

    def test_zero_gradient_is_pure_decay(self):
        cfg = OptimConfig("muon", lr=0.05, weight_decay=0.1)
        theta = RNG.standard_normal((3, 3))
        out, _ = muon_step(theta, np.zeros((3, 3)), MuonState.zeros_like(theta), cfg)
        assert np.array_equal(out, theta * (1 - 0.05 * 0.1))

    def test_step_norm_near_sqrt_rank(self):
        cfg = OptimConfig("muon", lr=1.0)
        theta = np.zeros((8, 8))
        out, _ = muon_step(theta, RNG.standard_normal((8, 8)) + 3 * np.eye(8), MuonState.zeros_like(theta), cfg)
        ratio = np.linalg.norm(out) / math.sqrt(8)
        assert 0.68 <= ratio <= 1.16

    def test_rejects_vectors(self):
        with pytest.raises(ValueError):
            muon_step(np.zeros(3), np.zeros(3), MuonState(np.zeros(3)), OptimConfig("muon"))

    @given(st.integers(0, 1000), st.floats(0.0, 0.5), st.sampled_from(["muon", "adamw"]))
    def test_decoupled_weight_decay(self, seed, wd, algorithm):
        """lambda > 0 equals the lambda = 0 step applied to the decayed parameter."""
        rng = np.random.default_rng(seed)
        theta, g = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
        decayed_cfg = OptimConfig(algorithm, lr=0.03, weight_decay=wd)
        plain_cfg = OptimConfig(algorithm, lr=0.03)
        state = init_state(theta, plain_cfg, hidden=True)
        a, _ = apply_step(theta, g, state, decayed_cfg)
        eta = step_lr(theta, state, plain_cfg)
        b, _ = apply_step(theta * (1 - eta * wd), g, state, plain_cfg)
        assert np.array_equal(a, b)


def test_step_record():
    theta = RNG.standard_normal((2, 2))
    assert np.array_equal(step_record(theta, theta), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        step_record(np.zeros(2), np.zeros(3))


def test_init_state_dispatch():
    cfg = OptimConfig("muon")
    assert isinstance(init_state(np.zeros((2, 2)), cfg, hidden=True), MuonState)
    assert isinstance(init_state(np.zeros((2, 2)), cfg, hidden=False), AdamwState)
    assert isinstance(init_state(np.zeros(2), cfg, hidden=True), AdamwState)


def test_aux_lr_for_fallback():
    cfg = OptimConfig("muon", lr=0.02, aux_lr=0.001)
    assert step_lr(np.zeros(3), AdamwState.zeros_like(np.zeros(3)), cfg) == 0.001


@pytest.mark.parametrize("kwargs", [dict(algorithm="sgd"), dict(lr=-1.0), dict(beta1=1.0), dict(epsilon=0.0),
                                    dict(weight_decay=-0.1), dict(ns_iterations=0), dict(lr=math.nan)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimConfig(**kwargs)


class TestOuter:
    def test_identical_workers(self):
        before = {"w": RNG.standard_normal((2, 3))}
        after = {"w": RNG.standard_normal((2, 3))}
        psi = pseudogradient(before, [after, after, after])
        assert np.allclose(psi["w"], before["w"] - after["w"], rtol=1e-15)

    def test_cancellation_and_linearity(self):
        d = RNG.standard_normal((3, 3))
        before = {"w": np.zeros((3, 3))}
        assert np.array_equal(pseudogradient(before, [{"w": -d}, {"w": d}])["w"], np.zeros((3, 3)))
        a, b = pseudogradient(before, [{"w": d}])["w"], pseudogradient(before, [{"w": 2.5 * d}])["w"]
        assert np.allclose(b, 2.5 * a, rtol=1e-15)

    def test_reduction_order(self):
        xs = [np.array([1e16]), np.array([1.0]), np.array([-1e16])]
        assert mean_in_order(xs)[0] == ((1e16 + 1.0) - 1e16) / 3
        with pytest.raises(ValueError):
            mean_in_order([])

    def test_momentum_free_step_is_averaging(self):
        theta = {"w": RNG.standard_normal((2, 2))}
        psi = {"w": RNG.standard_normal((2, 2))}
        new, _ = outer_step(theta, psi, OuterState(), OuterConfig(1.0, 0.0))
        assert np.allclose(new["w"], theta["w"] - psi["w"], rtol=0, atol=1e-15)

    def test_fixed_point(self):
        theta = {"w": RNG.standard_normal((2, 2))}
        new, state = outer_step(theta, {"w": np.zeros((2, 2))}, OuterState(), OuterConfig())
        assert np.array_equal(new["w"], theta["w"]) and np.array_equal(state.u["w"], np.zeros((2, 2)))

    def test_nesterov_by_hand(self):
        theta, g = {"w": np.ones((1, 2))}, {"w": np.array([[2.0, -4.0]])}
        new, state = outer_step(theta, g, OuterState(), OuterConfig(1.0, 0.9))
        assert np.allclose(new["w"], 1.0 - 1.9 * g["w"], rtol=1e-15)
        assert np.array_equal(state.u["w"], g["w"])

    def test_anchor_is_exact_average(self):
        workers = [{"w": RNG.standard_normal((3, 3)) * 1e-3 + 5.0} for _ in range(4)]
        theta = {"w": np.full((3, 3), 5.0)}
        psi = pseudogradient(theta, workers)
        anchor = {"w": mean_in_order([w["w"] for w in workers])}
        new, _ = outer_step(theta, psi, OuterState(), OuterConfig(1.0, 0.0), anchor=anchor)
        assert np.array_equal(new["w"], anchor["w"])

    @given(st.floats(0.1, 2.0), st.floats(0.0, 0.95), st.integers(0, 100))
    def test_anchor_matches_literal_update(self, lr, mu, seed):
        rng = np.random.default_rng(seed)
        theta = {"w": rng.standard_normal((2, 3))}
        workers = [{"w": theta["w"] - 0.1 * rng.standard_normal((2, 3))} for _ in range(3)]
        psi = pseudogradient(theta, workers)
        state = OuterState({"w": rng.standard_normal((2, 3))})
        literal, s1 = outer_step(theta, psi, state, OuterConfig(lr, mu))
        anchored, s2 = outer_step(theta, psi, state, OuterConfig(lr, mu),
                                  anchor={"w": mean_in_order([w["w"] for w in workers])})
        assert np.allclose(literal["w"], anchored["w"], rtol=0, atol=1e-13)
        assert np.array_equal(s1.u["w"], s2.u["w"])

    @pytest.mark.parametrize("lr,mu", [(0.0, 0.5), (1.0, 1.0), (1.0, -0.1), (math.inf, 0.0)])
    def test_config_validation(self, lr, mu):
        with pytest.raises(ValueError):
            OuterConfig(lr, mu)
