"""Ensemble statistics and numerically stable low-rank Gaussian evaluations.

Conventions used throughout the package:

* an ensemble is an ``(M, N)`` matrix ``E`` with members in columns;
* anomalies ``X`` are normalized deviations ``(E - mean) / sqrt(N - 1)``, so
  ``X @ X.T`` is the unbiased sample covariance;
* observation errors are scalar-diagonal, ``R = variance * I_d``, isolated in
  :class:`ObsErrorSpec` so a general covariance can be added later.

All evidence arithmetic stays in the log domain end to end; window
likelihoods reach exp(-700) and would underflow as raw probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import IllConditionedError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ObsErrorSpec:
    """Scalar-diagonal observation error covariance ``variance * I_dim``."""

    variance: float
    dim: int

    def __post_init__(self):
        if not self.variance > 0.0:
            raise ValueError("observation error variance must be positive")
        if self.dim < 1:
            raise ValueError("observation dimension must be >= 1")

    def log_det(self) -> float:
        return self.dim * math.log(self.variance)


@dataclass(frozen=True)
class ObservationRecord:
    """One observation vector with its time index (in assimilation cycles)."""

    time_index: int
    value: np.ndarray
    err: ObsErrorSpec


class ObsOperator:
    """Observation operator mapping model space to observation space.

    Supports the identity, a fixed linear matrix, and an index subset.
    Applies columnwise to ``(M,)`` states and ``(M, N)`` ensembles.
    """

    def __init__(self, kind: str, matrix: np.ndarray | None = None,
                 indices: np.ndarray | None = None):
        if kind not in ("identity", "matrix", "subset"):
            raise ValueError(f"unknown observation operator kind {kind!r}")
        self.kind = kind
        self.matrix_data = None if matrix is None else np.asarray(matrix, dtype=float)
        self.indices = None if indices is None else np.asarray(indices, dtype=int)
        if kind == "matrix" and self.matrix_data is None:
            raise ValueError("matrix operator needs a matrix")
        if kind == "subset" and self.indices is None:
            raise ValueError("subset operator needs indices")

    @classmethod
    def identity(cls) -> "ObsOperator":
        return cls("identity")

    @classmethod
    def from_matrix(cls, matrix) -> "ObsOperator":
        return cls("matrix", matrix=matrix)

    @classmethod
    def subset(cls, indices) -> "ObsOperator":
        return cls("subset", indices=indices)

    def __call__(self, state: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return state
        if self.kind == "matrix":
            return self.matrix_data @ state
        return state[self.indices]

    def out_dim(self, state_dim: int) -> int:
        if self.kind == "identity":
            return state_dim
        if self.kind == "matrix":
            d = self.matrix_data.shape[0]
        else:
            d = len(self.indices)
        if d > state_dim:
            raise ValueError("observation dimension exceeds state dimension")
        return d

    def as_matrix(self, state_dim: int) -> np.ndarray:
        """Dense representation, used by the exact Kalman-filter oracle."""
        if self.kind == "identity":
            return np.eye(state_dim)
        if self.kind == "matrix":
            return self.matrix_data
        H = np.zeros((len(self.indices), state_dim))
        H[np.arange(len(self.indices)), self.indices] = 1.0
        return H


@dataclass(frozen=True)
class GaussianBelief:
    """Gaussian N(mean, X X^T) stored as mean plus normalized anomalies X."""

    mean: np.ndarray
    anomalies: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_members(self) -> int:
        return self.anomalies.shape[1]

    def cov(self) -> np.ndarray:
        return self.anomalies @ self.anomalies.T


def mean_and_anomalies(ensemble: np.ndarray) -> GaussianBelief:
    """Row-wise mean and normalized anomalies of an ``(M, N)`` ensemble."""
    ensemble = np.asarray(ensemble, dtype=float)
    if ensemble.ndim != 2 or ensemble.shape[1] < 2:
        raise ValueError("ensemble must be (M, N) with at least 2 members")
    mean = ensemble.mean(axis=1)
    anomalies = (ensemble - mean[:, None]) / math.sqrt(ensemble.shape[1] - 1)
    return GaussianBelief(mean=mean, anomalies=anomalies)


def log_sum_exp(values) -> float:
    """log(sum(exp(values))) by max shift; exact for singletons."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty sequence")
    if v.size == 1:
        return float(v.reshape(-1)[0])
    m = float(v.max())
    if not math.isfinite(m):
        # All -inf collapses to -inf; a +inf or NaN propagates.
        return m
    return m + math.log(float(np.exp(v - m).sum()))


def innovation_loglik(innov: np.ndarray, err: ObsErrorSpec, obs_anomalies: np.ndarray) -> float:
    """log N(innov; 0, R + Y Y^T) for R = variance * I and Y = obs_anomalies.

    Evaluated through the matrix determinant lemma and the Woodbury
    identity on C = I_N + Y^T R^-1 Y, so the cost is O(d N^2 + N^3)
    rather than O(d^3):

        log|R + Y Y^T|   = log|R| + log|C|
        (R + Y Y^T)^-1   = R^-1 - R^-1 Y C^-1 Y^T R^-1
    """
    innov = np.asarray(innov, dtype=float)
    Y = np.asarray(obs_anomalies, dtype=float)
    d, n = Y.shape
    if innov.shape != (d,) or d != err.dim:
        raise ValueError("inconsistent innovation/anomaly/error dimensions")
    var = err.variance
    with np.errstate(over="ignore", invalid="ignore"):  # finiteness checked below
        C = np.eye(n) + (Y.T @ Y) / var
    if not np.isfinite(C).all():
        raise IllConditionedError("observation-anomaly Gram matrix is not finite")
    try:
        cho = scipy.linalg.cho_factor(C, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise IllConditionedError("I + Y^T R^-1 Y is numerically singular") from exc
    logdet_c = 2.0 * float(np.log(np.diag(cho[0])).sum())
    u = Y.T @ innov
    quad = float(innov @ innov) / var - float(u @ scipy.linalg.cho_solve(cho, u)) / var**2
    return -0.5 * quad - 0.5 * d * LOG_2PI - 0.5 * (err.log_det() + logdet_c)


def svd_anomalies(anomalies: np.ndarray):
    """Full SVD of an anomaly matrix with singular values padded to length M.

    Returns ``(U, s, Vt)`` with ``U`` of shape ``(M, M)``, ``s`` descending
    and non-negative of length ``M`` (zero-padded when N < M), and the
    reconstruction ``U @ diag_rect(s) @ Vt`` equal to the input.
    """
    X = np.asarray(anomalies, dtype=float)
    U, s, Vt = np.linalg.svd(X, full_matrices=True)
    m = X.shape[0]
    if s.shape[0] < m:
        s = np.concatenate([s, np.zeros(m - s.shape[0])])
    return U, s, Vt


def spd_inverse_sqrt(matrix: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Symmetric inverse square root of an SPD matrix via eigendecomposition.

    This is the deterministic ensemble transform: no random rotation, and
    the symmetric choice preserves the anomaly zero-sum.
    """
    if not np.isfinite(matrix).all():
        raise IllConditionedError("transform matrix is not finite")
    w, V = np.linalg.eigh(matrix)
    if w.min() <= tol * max(w.max(), 1.0):
        raise IllConditionedError("transform matrix is not SPD within tolerance")
    return (V * w**-0.5) @ V.T
