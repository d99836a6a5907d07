import numpy as np
import pytest
from scipy.linalg import cho_factor

from src.errors import FilterInvariantError
from src.estimation import grad_reverse
from src.estimation.grad_forward import forward_gradient
from src.estimation.grad_reverse import (
    AdjointState,
    CovarianceAdjointForm,
    backward_pass,
    backward_step,
    chain_to_theta,
    init_adjoints,
    retained_elements,
    reverse_gradient,
)
from src.estimation.kalman import SupervisorySpec, SystemModel, run_filter
from src.estimation.oracle import fd_gradient, relative_error
from src.estimation.params import build_param
from src.simulation.random_systems import random_problem


def quiet_system(N: int = 1):
    """d = m = 2, F = H = I, P0 = I, Q = 0.01 I, R = I at theta = 0, all-zero data"""
    model = SystemModel.time_invariant(
        F=np.eye(2), B=np.zeros((2, 1)), H=np.eye(2), u=np.zeros((N, 1)), x0=np.zeros(2), P0=np.eye(2)
    )
    param = build_param("isotropic", 2, 0.01 * np.eye(2))
    return model, param, np.zeros((N, 2))


class TestInitAdjoints:
    def test_zero_residual(self):
        C = np.array([[1.5, 0.2], [0.2, 1.0]])
        Hs = np.array([[1.0, 0.0, -1.0], [0.0, 2.0, 0.5]])
        adj = init_adjoints(np.zeros(2), cho_factor(C, lower=True), Hs, D=5, d=2)
        assert adj.D == 5
        assert not adj.dL_dX.any()
        expected = np.zeros((5, 5))
        expected[2:, 2:] = 0.5 * Hs.T @ np.linalg.solve(C, Hs)
        np.testing.assert_allclose(adj.dL_dP, expected, rtol=1e-12, atol=1e-14)

    def test_empty_supervision(self):
        adj = init_adjoints(np.zeros(0), None, np.zeros((0, 0)), D=4, d=4)
        assert not adj.dL_dX.any() and not adj.dL_dP.any()

    def test_zero_weight(self):
        C = np.eye(1)
        adj = init_adjoints(np.ones(1), cho_factor(C, lower=True), np.ones((1, 2)), D=4, d=2, weight=0.0)
        assert not adj.dL_dX.any() and not adj.dL_dP.any()


class TestBackwardStep:
    def test_zero_residual_step(self):
        model, param, y_o = quiet_system()
        _, trace, _ = run_filter(model, SupervisorySpec.empty(2), y_o, param, [0.0], keep_trace=True)
        adj = AdjointState(dL_dX=np.zeros(2), dL_dP=np.zeros((2, 2)))
        prev, dL_dR, dL_dQ = backward_step(adj, trace.steps[0], cho_factor(np.eye(2), lower=True))
        np.testing.assert_allclose(dL_dR, np.eye(2) / (2 * 2.01), rtol=1e-12)
        np.testing.assert_allclose(dL_dQ, np.eye(2) / (2 * 2.01), rtol=1e-12)
        assert not prev.dL_dX.any()

    def test_missing_step(self):
        adj = AdjointState(dL_dX=np.zeros(2), dL_dP=np.zeros((2, 2)))
        with pytest.raises(FilterInvariantError, match="missing"):
            backward_step(adj, None, None)

    def test_dimension_mismatch(self):
        model, param, y_o = quiet_system()
        _, trace, _ = run_filter(model, SupervisorySpec.empty(2), y_o, param, [0.0], keep_trace=True)
        adj = AdjointState(dL_dX=np.zeros(3), dL_dP=np.zeros((3, 3)))
        with pytest.raises(FilterInvariantError, match="k=1"):
            backward_step(adj, trace.steps[0], cho_factor(np.eye(2), lower=True))

    def test_process_adjoints_are_symmetric(self, rng):
        for _ in range(10):
            prob = random_problem(rng, n_supervised=2, N=6)
            loss, trace, belief = run_filter(prob.model, prob.spec, prob.y_o, prob.param, prob.theta, keep_trace=True)
            adj = init_adjoints(loss.v, loss.C_factor, prob.spec.Hs, belief.D, prob.model.d)
            _, dL_dQ = backward_pass(trace, adj, prob.param, prob.theta)
            for G in dL_dQ:
                np.testing.assert_allclose(G, G.T, atol=1e-9 * max(1.0, np.abs(G).max()))

    def test_time_invariant_r_is_factored_once(self, monkeypatch):
        model, param, y_o = quiet_system(N=5)
        _, trace, _ = run_filter(model, SupervisorySpec.empty(2), y_o, param, [0.0], keep_trace=True)
        calls = []

        def counting(A, *args, **kwargs):
            calls.append(A.shape)
            return cho_factor(A, *args, **kwargs)

        monkeypatch.setattr(grad_reverse, "cho_factor", counting)
        adj = AdjointState(dL_dX=np.zeros(2), dL_dP=np.zeros((2, 2)))
        backward_pass(trace, adj, param, [0.0])
        assert calls == [(2, 2)]

        calls.clear()
        backward_pass(trace, adj, param, [0.0], form=CovarianceAdjointForm.INNOVATION)
        assert calls == []


class TestChainToTheta:
    def test_isotropic_is_a_scaled_trace(self, rng):
        param = build_param("isotropic", 2, 0.01 * np.eye(2))
        theta = 0.4
        dL_dR = []
        for _ in range(3):
            A = rng.normal(size=(2, 2))
            dL_dR.append(A + A.T)
        grad = chain_to_theta(dL_dR, [np.zeros((2, 2))] * 3, param, [theta])
        expected = np.exp(theta) * sum(np.trace(G) for G in dL_dR)
        assert grad[0] == pytest.approx(expected, rel=1e-12)


class TestReverseGradient:
    def test_supervisory_term_matches_finite_differences(self, rng):
        for _ in range(10):
            prob = random_problem(rng, n_supervised=2, N=5)

            def ell_s(t):
                return run_filter(prob.model, prob.spec, prob.y_o, prob.param, t)[0].ell_s

            _, grad = reverse_gradient(prob.model, prob.spec, prob.y_o, prob.param, prob.theta, weights=(0.0, 1.0))
            np.testing.assert_allclose(grad, fd_gradient(ell_s, prob.theta), rtol=1e-4, atol=1e-5)

    def test_innovation_form_is_wrong(self, lab, lab_data):
        param = lab.build_param(kind="cholesky")
        model = lab_data.calib.model.truncated(20)
        spec = lab_data.spec.restrict(20)
        y_o = lab_data.calib.measurements[:20]
        _, g_fwd = forward_gradient(model, spec, y_o, param, param.theta)
        _, g_meas = reverse_gradient(model, spec, y_o, param, param.theta)
        _, g_innov = reverse_gradient(model, spec, y_o, param, param.theta, form=CovarianceAdjointForm.INNOVATION)
        assert np.max(relative_error(g_fwd, g_meas)) < 1e-7
        assert np.max(relative_error(g_fwd, g_innov)) > 1e-3


class TestRetainedElements:
    def test_linear_in_horizon_without_supervision(self, lab, lab_data):
        param = lab.build_param()
        empty = SupervisorySpec.empty(lab_data.calib.model.d)
        y_o = lab_data.calib.measurements

        def retained(n):
            return retained_elements(lab_data.calib.model.truncated(n), empty, y_o[:n], param, param.theta)

        assert retained(40) == 2 * retained(20)

    def test_appended_states_grow_the_trace(self, lab, lab_data):
        param = lab.build_param()
        model = lab_data.calib.model.truncated(40)
        y_o = lab_data.calib.measurements[:40]
        spec = lab_data.spec.restrict(40)
        plain = retained_elements(model, SupervisorySpec.empty(model.d), y_o, param, param.theta)
        if spec.is_empty:
            pytest.skip("no supervised states in the first 40 steps")
        assert retained_elements(model, spec, y_o, param, param.theta) > plain
