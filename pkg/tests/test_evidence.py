import math

import numpy as np
import pytest
import scipy.stats

from evidence_da.dynamics import IntegratorSpec, Lorenz63, L63Params, interval_flow, matrix_flow
from evidence_da.errors import NumericalOverflowError
from evidence_da.etkf import EtkfConfig
from evidence_da.evidence import (
    EvidencingWindow,
    cme_en4dvar,
    cme_enkf,
    cme_ienks,
    cme_is,
    discriminating_power,
    gauss_newton_ensemble,
    kf_evidence,
    window_logliks,
)
from evidence_da.gaussian import ObsErrorSpec, ObsOperator, mean_and_anomalies

IDENTITY_FLOW = matrix_flow(np.eye(1))
IDENTITY_OP = ObsOperator.identity()
UNIT_ERR = ObsErrorSpec(1.0, 1)


def window1(y):
    return EvidencingWindow(np.array([[float(y)]]))


def test_window_requires_observations():
    with pytest.raises(ValueError):
        EvidencingWindow(np.empty((0, 1)))


def test_is_identical_members_equal_member_loglik():
    E = np.full((1, 6), 0.7)
    win = window1(0.2)
    r = cme_is(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win)
    member = window_logliks(E[:, 0], IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win)
    assert r.log_cme == pytest.approx(float(member[0]), abs=1e-12)


def test_is_two_member_closed_form():
    E = np.array([[-1.0, 1.0]])
    r = cme_is(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, window1(0.0))
    assert r.log_cme == pytest.approx(-0.5 - 0.5 * math.log(2.0 * math.pi), abs=1e-12)


def test_is_gaussian_convolution_monte_carlo():
    # Prior N(0,1), likelihood N(y; x, 1), y=0: evidence is N(0; 0, 2).
    rng = np.random.default_rng(0)
    E = rng.standard_normal((1, 1_000_000))
    r = cme_is(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, window1(0.0))
    assert r.log_cme == pytest.approx(-0.5 * math.log(4.0 * math.pi), abs=0.01)


def test_is_rejects_nonfinite_members():
    with pytest.raises(ValueError):
        cme_is(np.array([[1.0, math.nan]]), IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR,
               window1(0.0))


def test_is_member_permutation_invariance():
    rng = np.random.default_rng(1)
    E = rng.standard_normal((1, 9))
    a = cme_is(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, window1(0.3))
    b = cme_is(E[:, rng.permutation(9)], IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR,
               window1(0.3))
    assert a.log_cme == pytest.approx(b.log_cme, abs=1e-12)


def test_kf_zero_innovation_closed_form():
    r = kf_evidence(np.eye(1), np.array([0.4]), np.array([[1.0]]), IDENTITY_OP,
                    UNIT_ERR, window1(0.4))
    assert r.log_cme == pytest.approx(-0.5 * math.log(4.0 * math.pi), abs=1e-12)
    assert r.log_cme == pytest.approx(-1.265512, abs=1e-6)


def test_kf_two_step_matches_joint_gaussian():
    # Identity dynamics: (y1, y2) is jointly Gaussian with covariance
    # [[P+R, P], [P, P+R]] around the prior mean.
    p, var, m0 = 1.7, 0.6, 0.3
    ys = np.array([[1.1], [-0.4]])
    r = kf_evidence(np.eye(1), np.array([m0]), np.array([[p]]), IDENTITY_OP,
                    ObsErrorSpec(var, 1), EvidencingWindow(ys))
    joint = scipy.stats.multivariate_normal(
        [m0, m0], [[p + var, p], [p, p + var]]
    ).logpdf(ys.ravel())
    assert r.log_cme == pytest.approx(float(joint), abs=1e-10)
    assert r.per_step_terms.sum() == pytest.approx(r.log_cme, abs=1e-10)


def test_kf_point_prior_reduces_to_observation_likelihood():
    A = np.array([[0.9]])
    y = 0.25
    r = kf_evidence(A, np.array([2.0]), np.array([[0.0]]), IDENTITY_OP, UNIT_ERR,
                    window1(y))
    expected = scipy.stats.norm(loc=0.9 * 2.0, scale=1.0).logpdf(y)
    assert r.log_cme == pytest.approx(float(expected), abs=1e-12)


def test_enkf_scalar_single_step():
    E = np.array([[-1.0, 1.0]])
    r = cme_enkf(E, IDENTITY_FLOW, IDENTITY_OP, ObsErrorSpec(2.0, 1), window1(2.0),
                 EtkfConfig(n_members=2, inflation=1.0))
    assert r.log_cme == pytest.approx(-2.1120857137646176, abs=1e-10)


def test_enkf_matches_kf_on_rotation_model():
    rng = np.random.default_rng(2)
    th = 0.4
    A = np.array([[math.cos(th), -math.sin(th), 0.0],
                  [math.sin(th), math.cos(th), 0.0],
                  [0.0, 0.0, 0.95]])
    E = rng.standard_normal((3, 4)) + 1.0
    err = ObsErrorSpec(0.8, 3)
    win = EvidencingWindow(rng.standard_normal((4, 3)))
    b = mean_and_anomalies(E)
    kf = kf_evidence(A, b.mean, b.cov(), IDENTITY_OP, err, win)
    enkf = cme_enkf(E, matrix_flow(A), IDENTITY_OP, err, win,
                    EtkfConfig(n_members=4, inflation=1.0))
    assert enkf.log_cme == pytest.approx(kf.log_cme, abs=1e-8)
    assert enkf.per_step_terms.sum() == pytest.approx(enkf.log_cme, abs=1e-10)


def test_gauss_newton_linear_single_obs_closed_form():
    # One linear observation: w* = Y^T (R + Y Y^T)^-1 (y - H mean).
    rng = np.random.default_rng(3)
    E = rng.standard_normal((2, 4)) * 1.5
    b = mean_and_anomalies(E)
    var = 0.9
    y = rng.standard_normal(2)
    res = gauss_newton_ensemble(b.mean, b.anomalies, matrix_flow(np.eye(2)),
                                IDENTITY_OP, ObsErrorSpec(var, 2), [(1, y)])
    Y = b.anomalies
    expected = Y.T @ np.linalg.solve(var * np.eye(2) + Y @ Y.T, y - b.mean)
    assert np.abs(res.weights - expected).max() < 1e-8
    assert res.converged


def test_gauss_newton_zero_residual_converges_immediately():
    model = Lorenz63(L63Params(forcing=1.0))
    flow = interval_flow(model, IntegratorSpec(0.01), 5)
    rng = np.random.default_rng(4)
    E = np.array([1.0, 1.0, 25.0])[:, None] + 0.1 * rng.standard_normal((3, 4))
    b = mean_and_anomalies(E)
    ys = [(k, ObsOperator.identity()(_propagate_intervals(flow, b.mean, k)))
          for k in (1, 2, 3)]
    res = gauss_newton_ensemble(b.mean, b.anomalies, flow, IDENTITY_OP,
                                ObsErrorSpec(1.0, 3), ys)
    assert res.iterations == 1
    assert res.converged
    assert np.abs(res.weights).max() < 1e-12


def _propagate_intervals(flow, state, k):
    x = state
    for _ in range(k):
        x = flow(x)
    return x


def test_gauss_newton_hessian_matches_finite_differences():
    # Near-zero residuals make the Gauss-Newton curvature the true Hessian.
    model = Lorenz63(L63Params(forcing=1.0))
    flow = interval_flow(model, IntegratorSpec(0.01), 5)
    rng = np.random.default_rng(5)
    E = np.array([1.0, 1.0, 25.0])[:, None] + 0.1 * rng.standard_normal((3, 4))
    b = mean_and_anomalies(E)
    err = ObsErrorSpec(1.0, 3)
    obs_seq = [(k, _propagate_intervals(flow, b.mean, k) + 1e-4 * rng.standard_normal(3))
               for k in (1, 2)]
    res = gauss_newton_ensemble(b.mean, b.anomalies, flow, IDENTITY_OP, err, obs_seq)

    def cost(w):
        x = b.mean + b.anomalies @ w
        total = 0.5 * float(w @ w)
        prev, xk = 0, x
        for k, y in obs_seq:
            for _ in range(k - prev):
                xk = flow(xk)
            r = y - xk
            total += 0.5 * float(r @ r) / err.variance
            prev = k
        return total

    n = 4
    h = 1e-3
    fd = np.empty((n, n))
    w0 = res.weights
    for i in range(n):
        for j in range(n):
            ei = np.eye(n)[i] * h
            ej = np.eye(n)[j] * h
            fd[i, j] = (cost(w0 + ei + ej) - cost(w0 + ei - ej)
                        - cost(w0 - ei + ej) + cost(w0 - ei - ej)) / (4.0 * h * h)
    rel = np.abs(fd - res.hessian).max() / np.abs(res.hessian).max()
    assert rel < 1e-3


def test_gauss_newton_requires_observations():
    with pytest.raises(ValueError):
        gauss_newton_ensemble(np.zeros(1), np.ones((1, 2)), IDENTITY_FLOW,
                              IDENTITY_OP, UNIT_ERR, [])


def test_en4dvar_single_obs_equals_kf():
    rng = np.random.default_rng(6)
    E = rng.standard_normal((1, 3)) * 2.0 - 0.5
    b = mean_and_anomalies(E)
    win = window1(0.8)
    kf = kf_evidence(np.eye(1), b.mean, b.cov(), IDENTITY_OP, UNIT_ERR, win)
    r = cme_en4dvar(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win)
    assert r.log_cme == pytest.approx(kf.log_cme, abs=1e-10)


def test_en4dvar_two_obs_identity_dynamics_equals_kf():
    rng = np.random.default_rng(7)
    E = rng.standard_normal((1, 4))
    b = mean_and_anomalies(E)
    win = EvidencingWindow(rng.standard_normal((2, 1)))
    kf = kf_evidence(np.eye(1), b.mean, b.cov(), IDENTITY_OP, UNIT_ERR, win)
    r = cme_en4dvar(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win)
    assert r.log_cme == pytest.approx(kf.log_cme, abs=1e-8)
    assert r.per_step_terms.size == 0


def test_en4dvar_zero_residual_leaves_normalization():
    # Observations on the prior-mean trajectory: misfit and weights vanish,
    # leaving only the Gaussian normalization and curvature terms.
    rng = np.random.default_rng(8)
    E = rng.standard_normal((2, 5))
    b = mean_and_anomalies(E)
    A = 0.8 * np.eye(2)
    flow = matrix_flow(A)
    err = ObsErrorSpec(0.5, 2)
    ys = np.stack([A @ b.mean, A @ A @ b.mean])
    r = cme_en4dvar(E, flow, IDENTITY_OP, err, EvidencingWindow(ys))
    Y1 = A @ b.anomalies
    Y2 = A @ A @ b.anomalies
    hess = np.eye(5) + (Y1.T @ Y1 + Y2.T @ Y2) / err.variance
    expected = (-2.0 * math.log(2.0 * math.pi) - err.log_det()
                - 0.5 * float(np.linalg.slogdet(hess)[1]))
    assert r.log_cme == pytest.approx(expected, abs=1e-8)


def test_ienks_single_obs_equals_enkf():
    rng = np.random.default_rng(9)
    E = rng.standard_normal((1, 3)) + 0.2
    win = window1(-0.7)
    enkf = cme_enkf(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win,
                    EtkfConfig(n_members=3, inflation=1.0))
    ienks = cme_ienks(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win)
    assert ienks.log_cme == pytest.approx(enkf.log_cme, abs=1e-8)


def test_ienks_two_step_scalar_equals_kf():
    rng = np.random.default_rng(10)
    E = rng.standard_normal((1, 4)) * 1.3
    b = mean_and_anomalies(E)
    win = EvidencingWindow(rng.standard_normal((2, 1)))
    kf = kf_evidence(np.eye(1), b.mean, b.cov(), IDENTITY_OP, UNIT_ERR, win)
    r = cme_ienks(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win)
    assert r.log_cme == pytest.approx(kf.log_cme, abs=1e-8)
    assert r.per_step_terms.sum() == pytest.approx(r.log_cme, abs=1e-10)


def test_ienks_zero_innovation_contracts_anomalies():
    rng = np.random.default_rng(11)
    E = rng.standard_normal((2, 5))
    b = mean_and_anomalies(E)
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    flow = matrix_flow(A)
    ys = np.stack([_propagate_intervals(flow, b.mean, k) for k in (1, 2, 3)])
    r = cme_ienks(E, flow, IDENTITY_OP, ObsErrorSpec(1.0, 2), EvidencingWindow(ys))
    # zero innovations: every per-step misfit reduces to pure normalization,
    # which is bounded above by the zero-curvature value
    assert r.diagnostics["converged"]
    assert all(t <= -math.log(2.0 * math.pi) + 1e-9 for t in r.per_step_terms)


def test_linear_gaussian_collapse_all_methods():
    rng = np.random.default_rng(12)
    th = 0.3
    A = np.array([[math.cos(th), -math.sin(th), 0.0],
                  [math.sin(th), math.cos(th), 0.0],
                  [0.0, 0.0, 0.9]])
    E = rng.standard_normal((3, 5)) - 0.2
    b = mean_and_anomalies(E)
    err = ObsErrorSpec(1.2, 3)
    flow = matrix_flow(A)
    for k in (1, 2, 5):
        win = EvidencingWindow(rng.standard_normal((k, 3)) * 1.5)
        kf = kf_evidence(A, b.mean, b.cov(), IDENTITY_OP, err, win).log_cme
        got = {
            "enkf": cme_enkf(E, flow, IDENTITY_OP, err, win,
                             EtkfConfig(n_members=5, inflation=1.0)).log_cme,
            "en4dvar": cme_en4dvar(E, flow, IDENTITY_OP, err, win).log_cme,
            "ienks": cme_ienks(E, flow, IDENTITY_OP, err, win).log_cme,
        }
        for name, value in got.items():
            assert value == pytest.approx(kf, abs=1e-6), (name, k)


def test_log_cme_decreases_with_window_length():
    # Each additional factor is a log-density bounded above by a negative
    # normalization at these noise levels, so K -> K+1 strictly decreases
    # the total for every estimator.
    model = Lorenz63()
    flow = interval_flow(model, IntegratorSpec(0.01), 10)
    rng = np.random.default_rng(13)
    x0 = np.array([1.0, 1.0, 25.0])
    for _ in range(50):
        x0 = flow(x0)
    E = x0[:, None] + 0.5 * rng.standard_normal((3, 4))
    err = ObsErrorSpec(4.0, 3)
    truth = x0
    ys = []
    for _ in range(6):
        truth = flow(truth)
        ys.append(truth + 2.0 * rng.standard_normal(3))
    ys = np.stack(ys)
    cfg = EtkfConfig(n_members=4, inflation=1.03)
    for fn in (
        lambda win: cme_is(E, flow, IDENTITY_OP, err, win).log_cme,
        lambda win: cme_enkf(E, flow, IDENTITY_OP, err, win, cfg).log_cme,
        lambda win: cme_en4dvar(E, flow, IDENTITY_OP, err, win).log_cme,
        lambda win: cme_ienks(E, flow, IDENTITY_OP, err, win).log_cme,
    ):
        values = [fn(EvidencingWindow(ys[:k])) for k in (1, 2, 4, 6)]
        assert all(b < a for a, b in zip(values, values[1:])), values


def test_window_overflow_aborts_with_step():
    E = np.array([[0.0, 1.0], [1.0, 2.0], [2.0, 3.0], [3.0, 4.0]])
    from evidence_da.dynamics import Lorenz95, L95Params

    model = Lorenz95(L95Params(forcing=1e8, dim=4))
    flow = interval_flow(model, IntegratorSpec(0.05), 10)
    err = ObsErrorSpec(1.0, 4)
    win = EvidencingWindow(np.zeros((3, 4)))
    with pytest.raises(NumericalOverflowError):
        cme_is(E, flow, IDENTITY_OP, err, win)


def test_sign_flipped_anomalies_leave_evidence_unchanged():
    # Reflecting every member about the mean flips the anomaly signs but
    # keeps X X^T, the innovation and the symmetric transform, so both
    # factorized estimators return the same value.
    rng = np.random.default_rng(14)
    E = rng.standard_normal((3, 5)) + 0.5
    mean = E.mean(axis=1, keepdims=True)
    flipped = 2.0 * mean - E
    th = 0.3
    A = np.array([[math.cos(th), -math.sin(th), 0.0],
                  [math.sin(th), math.cos(th), 0.0],
                  [0.0, 0.0, 0.92]])
    flow = matrix_flow(A)
    err = ObsErrorSpec(1.0, 3)
    win = EvidencingWindow(rng.standard_normal((3, 3)))
    cfg = EtkfConfig(n_members=5, inflation=1.02)
    a = cme_enkf(E, flow, IDENTITY_OP, err, win, cfg).log_cme
    b = cme_enkf(flipped, flow, IDENTITY_OP, err, win, cfg).log_cme
    assert a == pytest.approx(b, abs=1e-9)
    a = cme_ienks(E, flow, IDENTITY_OP, err, win).log_cme
    b = cme_ienks(flipped, flow, IDENTITY_OP, err, win).log_cme
    assert a == pytest.approx(b, abs=1e-9)


def test_smoother_diagnostics_fields():
    rng = np.random.default_rng(15)
    E = rng.standard_normal((1, 3))
    win = EvidencingWindow(rng.standard_normal((2, 1)))
    r = cme_en4dvar(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win)
    assert r.diagnostics["converged"]
    assert r.diagnostics["hessian_cond"] >= 1.0
    r = cme_ienks(E, IDENTITY_FLOW, IDENTITY_OP, UNIT_ERR, win)
    assert len(r.diagnostics["iterations"]) == 2


def test_discriminating_power():
    assert discriminating_power(-5.0, -5.0) == 0.0
    assert discriminating_power(-65.44, -78.19) == pytest.approx(12.75, abs=1e-10)
    assert discriminating_power(-1.0, -3.0) == -discriminating_power(-3.0, -1.0)
    with pytest.raises(ValueError):
        discriminating_power(math.nan, 0.0)
