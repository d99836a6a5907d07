import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.config import THETA_CLAMP
from src.errors import ParameterError
from src.estimation.oracle import fd_derivative
from src.estimation.params import (
    CholeskyMap,
    CovParam,
    ParamKind,
    build_param,
    dQ_dtheta,
    dR_dtheta,
    eval_Q,
    eval_R,
)

Q6 = 0.01 * np.eye(6)

bounded = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False, allow_infinity=False)


def shared_param():
    """R_k = (1 + 0.1 k) exp(t0) I + exp(t1) E and Q_k = exp(t1) Q0, sharing t1"""
    E = 0.2 * np.ones((2, 2))
    Q0 = 0.1 * np.eye(2)

    def R_fn(theta, k):
        return (1.0 + 0.1 * (k or 0)) * np.exp(theta[0]) * np.eye(2) + np.exp(theta[1]) * E

    def dR_fn(theta, j, k):
        if j == 0:
            return (1.0 + 0.1 * (k or 0)) * np.exp(theta[0]) * np.eye(2)
        return np.exp(theta[1]) * E

    def Q_fn(theta, k):
        return np.exp(theta[1]) * Q0

    def dQ_fn(theta, j, k):
        return np.exp(theta[1]) * Q0 if j == 1 else np.zeros((2, 2))

    return CovParam.custom(p=2, meas_dim=2, proc_dim=2, R_fn=R_fn, dR_fn=dR_fn, Q_fn=Q_fn, dQ_fn=dQ_fn)


class TestEvalR:
    def test_isotropic_zero_is_identity(self):
        param = build_param("isotropic", 3, Q6)
        np.testing.assert_array_equal(eval_R(param, [0.0]), np.eye(3))

    def test_diagonal_hits_the_per_axis_variances(self):
        param = build_param("diagonal", 3, Q6)
        R = eval_R(param, np.log([0.81, 1.69, 4.84]))
        np.testing.assert_allclose(R, np.diag([0.81, 1.69, 4.84]), rtol=1e-12)

    def test_cholesky_zero_is_identity(self):
        param = build_param("cholesky", 3, Q6)
        assert param.p == 6
        np.testing.assert_array_equal(eval_R(param, np.zeros(6)), np.eye(3))

    def test_wrong_dimension(self):
        param = build_param("diagonal", 3, Q6)
        with pytest.raises(ParameterError, match="expects theta of dimension 3"):
            eval_R(param, np.zeros(2))

    def test_clamp(self):
        param = build_param("isotropic", 2, Q6[:2, :2])
        np.testing.assert_allclose(eval_R(param, [25.0]), np.exp(THETA_CLAMP) * np.eye(2))
        np.testing.assert_array_equal(dR_dtheta(param, [25.0], 0), np.zeros((2, 2)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(bounded, min_size=6, max_size=6))
    def test_cholesky_is_spd(self, theta):
        R = CholeskyMap(3).value(np.asarray(theta))
        np.testing.assert_allclose(R, R.T)
        assert np.linalg.eigvalsh(R).min() > 0

    @settings(max_examples=50, deadline=None)
    @given(bounded, st.floats(min_value=-2.0, max_value=2.0))
    def test_isotropic_exponent_shift(self, theta, c):
        param = build_param("isotropic", 3, Q6)
        np.testing.assert_allclose(eval_R(param, [theta + c]), np.exp(c) * eval_R(param, [theta]), rtol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(bounded, min_size=3, max_size=3), st.lists(st.floats(-2.0, 2.0), min_size=3, max_size=3))
    def test_diagonal_exponent_shift(self, theta, shift):
        param = build_param("diagonal", 3, Q6)
        shifted = eval_R(param, np.add(theta, shift))
        expected = np.diag(np.exp(shift)) @ eval_R(param, theta)
        np.testing.assert_allclose(shifted, expected, rtol=1e-10)


class TestEvalQ:
    def test_fixed_q_ignores_theta(self):
        param = build_param("cholesky", 3, Q6)
        assert param.is_fixed_q_vary_r
        np.testing.assert_array_equal(eval_Q(param, np.full(6, 0.7), k=4), Q6)
        for j in range(param.p):
            np.testing.assert_array_equal(dQ_dtheta(param, np.full(6, 0.7), j, k=4), np.zeros((6, 6)))

    def test_custom_q(self):
        param = CovParam.custom(
            p=1, meas_dim=1, proc_dim=2,
            R_fn=lambda t, k: np.eye(1), dR_fn=lambda t, j, k: np.zeros((1, 1)),
            Q_fn=lambda t, k: np.exp(t[0]) * np.eye(2), dQ_fn=lambda t, j, k: np.exp(t[0]) * np.eye(2),
        )
        np.testing.assert_allclose(eval_Q(param, [np.log(2.0)], k=1), 2.0 * np.eye(2))
        np.testing.assert_allclose(dQ_dtheta(param, [0.0], 0, k=1), np.eye(2))

    def test_process_maps_start_at_configured_q(self):
        Q = np.diag([0.01, 0.01, 0.01, 0.02, 0.02, 0.02])
        diag = build_param("cholesky", 3, Q, process="diagonal")
        assert diag.p == 12
        np.testing.assert_allclose(diag.Q(diag.theta), Q)
        iso = build_param("diagonal", 3, Q6, process="isotropic")
        assert iso.p == 4
        assert list(iso.q_coordinates()) == [3]
        np.testing.assert_allclose(iso.Q(iso.theta), Q6)


class TestDerivatives:
    def test_isotropic_at_zero(self):
        param = build_param("isotropic", 3, Q6)
        np.testing.assert_array_equal(dR_dtheta(param, [0.0], 0), np.eye(3))

    def test_diagonal_at_zero(self):
        param = build_param("diagonal", 3, Q6)
        expected = np.zeros((3, 3))
        expected[1, 1] = 1.0
        np.testing.assert_array_equal(dR_dtheta(param, np.zeros(3), 1), expected)

    @pytest.mark.parametrize("kind", ["isotropic", "diagonal", "cholesky"])
    @pytest.mark.parametrize("process", ["fixed", "isotropic", "diagonal"])
    def test_match_finite_differences(self, rng, kind, process):
        param = build_param(kind, 3, Q6, process=process)
        theta = rng.uniform(-2.0, 2.0, size=param.p)
        for j in range(param.p):
            fd_R = fd_derivative(lambda t: param.R(t), theta, j)
            fd_Q = fd_derivative(lambda t: param.Q(t), theta, j)
            np.testing.assert_allclose(dR_dtheta(param, theta, j), fd_R, rtol=1e-6, atol=1e-7)
            np.testing.assert_allclose(dQ_dtheta(param, theta, j), fd_Q, rtol=1e-6, atol=1e-7)

    def test_custom_time_varying_shared_coordinates(self, rng):
        param = shared_param()
        assert not param.time_invariant
        theta = rng.uniform(-1.0, 1.0, size=2)
        for k in (1, 5):
            for j in range(2):
                np.testing.assert_allclose(
                    param.dR(theta, j, k), fd_derivative(lambda t: param.R(t, k), theta, j), rtol=1e-6
                )
                np.testing.assert_allclose(
                    param.dQ(theta, j, k), fd_derivative(lambda t: param.Q(t, k), theta, j),
                    rtol=1e-6, atol=1e-12,
                )

    def test_coordinate_out_of_range(self):
        param = build_param("cholesky", 3, Q6)
        with pytest.raises(ParameterError, match="j=6"):
            dR_dtheta(param, np.zeros(6), 6)


class TestBuildParam:
    def test_unknown_kind(self):
        with pytest.raises(ParameterError, match="Unknown parameterization"):
            build_param("spherical", 3, Q6)

    def test_unknown_process(self):
        with pytest.raises(ParameterError, match="process-noise"):
            build_param("isotropic", 3, Q6, process="cholesky")

    def test_theta0_is_validated(self):
        param = build_param("diagonal", 3, Q6, theta0=[0.1, 0.2, 0.3])
        np.testing.assert_array_equal(param.theta, [0.1, 0.2, 0.3])
        with pytest.raises(ParameterError):
            build_param("diagonal", 3, Q6, theta0=[0.1])

    def test_cholesky_inverse_map(self, rng):
        A = rng.normal(size=(3, 3))
        R = A @ A.T + 0.5 * np.eye(3)
        cmap = CholeskyMap(3)
        np.testing.assert_allclose(cmap.value(cmap.theta_from_matrix(R)), R, rtol=1e-12, atol=1e-12)

    def test_kinds(self):
        assert build_param("cholesky", 3, Q6).kind is ParamKind.CHOLESKY
        assert shared_param().kind is ParamKind.CUSTOM
