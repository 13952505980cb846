"""High-accuracy evidence references: Gauss-Hermite quadrature and massive
Monte Carlo with power-law asymptote extrapolation.

The quadrature uses the physicists' convention (weight exp(-x^2)), with an
m-node rule exact for polynomials up to degree 2m - 1.  Quadrature and Monte
Carlo accumulation both run in the log domain with a fixed reduction order,
so results are deterministic and immune to likelihood underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .evidence import CmeResult, EvidencingWindow, window_logliks
from .gaussian import GaussianBelief, ObsErrorSpec, ObsOperator, log_sum_exp, svd_anomalies

MAX_RULE_DEGREE = 64
MAX_TENSOR_POINTS = 10**7
_CHUNK = 1 << 18  # quadrature-point / sample block size, fixed for determinism


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a Gauss-Hermite rule (weight function exp(-x^2))."""

    degree: int
    nodes: np.ndarray
    weights: np.ndarray


def hermite_rule(degree: int) -> QuadratureRule:
    """Gauss-Hermite nodes and weights by Newton's method on the recurrence.

    Nodes are the roots of the degree-m physicists' Hermite polynomial,
    found from analytic initial guesses for the positive half and mirrored;
    weights follow from the value of the degree-(m-1) polynomial at each
    root.  The orthonormal recurrence is used for evaluation so nothing
    overflows up to the supported degree.
    """
    m = degree
    if not 1 <= m <= MAX_RULE_DEGREE:
        raise ValueError(f"rule degree must be in [1, {MAX_RULE_DEGREE}]")
    nodes = np.empty(m)
    weights = np.empty(m)

    def ortho_pair(x):
        # Returns (p_m(x), p_{m-1}(x)) for the orthonormal Hermite family.
        p_prev = 0.0
        p = math.pi**-0.25
        for j in range(1, m + 1):
            p, p_prev = x * math.sqrt(2.0 / j) * p - math.sqrt((j - 1) / j) * p_prev, p
        return p, p_prev

    half = (m + 1) // 2
    z = 0.0
    z_guesses = []
    for i in range(half):
        if i == 0:
            z = math.sqrt(2 * m + 1) - 1.85575 * (2 * m + 1) ** (-1.0 / 6.0)
        elif i == 1:
            z -= 1.14 * m**0.426 / z
        elif i == 2:
            z = 1.86 * z - 0.86 * z_guesses[0]
        elif i == 3:
            z = 1.91 * z - 0.91 * z_guesses[1]
        else:
            z = 2.0 * z - z_guesses[i - 2]
        for _ in range(100):
            p, p_lower = ortho_pair(z)
            dp = math.sqrt(2.0 * m) * p_lower  # derivative of p_m
            dz = p / dp
            z -= dz
            if abs(dz) < 1e-15:
                break
        z_guesses.append(z)
        _, p_lower = ortho_pair(z)
        w = 1.0 / (m * p_lower * p_lower)
        nodes[i] = z
        nodes[m - 1 - i] = -z
        weights[i] = w
        weights[m - 1 - i] = w
    if m % 2 == 1:
        nodes[half - 1] = 0.0
        _, p_lower = ortho_pair(0.0)
        weights[half - 1] = 1.0 / (m * p_lower * p_lower)
    return QuadratureRule(degree=m, nodes=nodes[::-1].copy(), weights=weights[::-1].copy())


def gh_integrate_1d(f, mean: float, sigma: float, degree: int) -> float:
    """Integral of f against N(mean, sigma^2) by Gauss-Hermite quadrature."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    rule = hermite_rule(degree)
    points = math.sqrt(2.0) * sigma * rule.nodes + mean
    values = f(points)
    if np.ndim(values) == 0:  # f is not vectorized
        values = np.array([f(p) for p in points])
    return float(rule.weights @ values) / math.sqrt(math.pi)


def gh_log_integral(prior: GaussianBelief, log_f, degree: int) -> float:
    """log of the integral of exp(log_f) against N(mean, X X^T).

    Evaluation points lie along the principal axes of the anomaly
    covariance: with X = U S V^T, points are mean + sqrt(2) U S chi over the
    tensor grid of 1-D nodes chi.  ``log_f`` maps an (M, P) block of points
    to P log-values; accumulation is a fixed-order log-sum-exp.
    """
    m_dim = prior.dim
    if m_dim > 6:
        raise ValueError("tensor-product quadrature is limited to 6 state variables")
    if prior.n_members < m_dim + 1:
        raise ValueError("prior needs at least M+1 members for a full-rank covariance")
    n_points = degree**m_dim
    if n_points > MAX_TENSOR_POINTS:
        raise ValueError(f"{n_points} quadrature points exceed the {MAX_TENSOR_POINTS} budget")
    U, s, _ = svd_anomalies(prior.anomalies)
    if s[-1] <= 1e-13 * s[0]:
        raise ValueError("prior covariance is numerically singular")
    rule = hermite_rule(degree)
    scale = math.sqrt(2.0) * (U * s)  # sqrt(2) U diag(s)
    log_w = np.log(rule.weights)

    shape = (degree,) * m_dim
    partial = []
    for start in range(0, n_points, _CHUNK):
        idx = np.unravel_index(np.arange(start, min(start + _CHUNK, n_points)), shape)
        chi = rule.nodes[np.stack(idx)]          # (M, chunk)
        log_weight = log_w[np.stack(idx)].sum(axis=0)
        points = prior.mean[:, None] + scale @ chi
        partial.append(log_sum_exp(log_weight + log_f(points)))
    return log_sum_exp(partial) - 0.5 * m_dim * math.log(math.pi)


def gh_cme(prior: GaussianBelief, flow, obs_op: ObsOperator, err: ObsErrorSpec,
           window: EvidencingWindow, degree: int) -> CmeResult:
    """Tensor-product quadrature reference for the window evidence."""
    value = gh_log_integral(
        prior,
        lambda points: window_logliks(points, flow, obs_op, err, window),
        degree,
    )
    return CmeResult(method="ghq", log_cme=value,
                     diagnostics={"degree": degree, "n_points": degree**prior.dim})


def _sample_logliks(prior: GaussianBelief, flow, obs_op, err, window, n_samples, rng):
    lls = np.empty(n_samples)
    for start in range(0, n_samples, _CHUNK):
        stop = min(start + _CHUNK, n_samples)
        z = rng.standard_normal((prior.n_members, stop - start))
        x0 = prior.mean[:, None] + prior.anomalies @ z
        lls[start:stop] = window_logliks(x0, flow, obs_op, err, window)
    return lls


def mc_cme(prior: GaussianBelief, flow, obs_op: ObsOperator, err: ObsErrorSpec,
           window: EvidencingWindow, n_samples: int, rng) -> CmeResult:
    """Monte Carlo reference: average window likelihood over Gaussian draws."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    lls = _sample_logliks(prior, flow, obs_op, err, window, n_samples, rng)
    return CmeResult(method="mc", log_cme=log_sum_exp(lls) - math.log(n_samples),
                     diagnostics={"n_samples": n_samples})


def mc_cme_ladder(prior: GaussianBelief, flow, obs_op: ObsOperator, err: ObsErrorSpec,
                  window: EvidencingWindow, sizes, rng) -> dict:
    """Monte Carlo evidence at several nested sample sizes from one draw.

    The size-n estimate uses the first n of max(sizes) samples, so the
    ladder costs one pass and the rungs are consistent prefixes of the same
    sample stream.
    """
    sizes = sorted(int(n) for n in sizes)
    if sizes[0] < 1:
        raise ValueError("sample sizes must be >= 1")
    lls = _sample_logliks(prior, flow, obs_op, err, window, sizes[-1], rng)
    return {n: log_sum_exp(lls[:n]) - math.log(n) for n in sizes}


@dataclass(frozen=True)
class PowerLawFit:
    """Least-squares fit of y = a + b * x^c; ``a`` is the x -> inf asymptote."""

    a: float
    b: float
    c: float
    rmse: float
    converged: bool

    @property
    def asymptote(self) -> float:
        return self.a


def powerlaw_extrapolate(points) -> PowerLawFit:
    """Fit (n, value) pairs to a + b n^c by Levenberg-Marquardt.

    Needs at least 4 points with distinct n.  The initial guess anchors the
    asymptote at the last value (a = y_last, c = -0.5, b from the first
    point); non-convergence returns the best iterate flagged rather than
    raising.
    """
    pts = sorted((float(n), float(v)) for n, v in points)
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if len(pts) < 4 or len(set(x.tolist())) != len(pts):
        raise ValueError("power-law fit needs >= 4 points with distinct sample sizes")

    a0 = y[-1]
    c0 = -0.5
    b0 = (y[0] - a0) / x[0] ** c0

    def residuals(theta):
        a, b, c = theta
        return a + b * np.power(x, c) - y

    result = scipy.optimize.least_squares(residuals, x0=[a0, b0, c0], method="lm",
                                          xtol=1e-14, ftol=1e-14, max_nfev=20000)
    a, b, c = result.x
    rmse = float(np.sqrt(np.mean(result.fun**2)))
    return PowerLawFit(a=float(a), b=float(b), c=float(c), rmse=rmse,
                       converged=bool(result.success))
