"""Deterministic square-root ensemble filter (ensemble transform variant).

The analysis is computed in ensemble space.  With normalized forecast
anomalies X and observation anomalies Y, and C = I_N + Y^T R^-1 Y:

    posterior mean      = mean + X @ wbar,   wbar = C^-1 Y^T R^-1 (y - H(mean))
    posterior anomalies = X @ T,             T = C^(-1/2)  (symmetric SPD root)

The symmetric root makes the update deterministic and mean-preserving.
Multiplicative inflation is applied to the forecast anomalies before every
analysis, inside and outside evidencing windows alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalOverflowError
from .gaussian import ObsErrorSpec, ObsOperator, mean_and_anomalies, spd_inverse_sqrt


@dataclass(frozen=True)
class EtkfConfig:
    """Ensemble size, inflation factor and cycle length (in internal steps)."""

    n_members: int
    inflation: float = 1.03
    obs_interval_steps: int = 1

    def __post_init__(self):
        if self.n_members < 2:
            raise ValueError("need at least 2 ensemble members")
        if self.inflation < 1.0:
            raise ValueError("inflation must be >= 1")
        if self.obs_interval_steps < 1:
            raise ValueError("obs_interval_steps must be >= 1")


@dataclass
class AssimilationCycleState:
    """Post-analysis ensemble at one cycle, with RMSE when truth is known."""

    ensemble: np.ndarray
    time_index: int
    rmse: float | None = None


def inflate(ensemble: np.ndarray, alpha: float) -> np.ndarray:
    """Scale anomalies by alpha about the mean; sample covariance scales by alpha^2."""
    if alpha < 1.0:
        raise ValueError("inflation must be >= 1")
    mean = ensemble.mean(axis=1, keepdims=True)
    return mean + alpha * (ensemble - mean)


def etkf_analysis(ensemble: np.ndarray, y: np.ndarray, obs_op: ObsOperator,
                  err: ObsErrorSpec) -> np.ndarray:
    """Deterministic square-root analysis update of a forecast ensemble.

    The innovation is centered on the operator applied to the ensemble
    mean; observation anomalies come from the operator applied to the
    members.
    """
    belief = mean_and_anomalies(ensemble)
    obs_belief = mean_and_anomalies(obs_op(ensemble))
    Y = obs_belief.anomalies
    n = belief.n_members
    var = err.variance

    C = np.eye(n) + (Y.T @ Y) / var
    T = spd_inverse_sqrt(C)  # raises IllConditionedError if not SPD
    innov = y - obs_op(belief.mean)
    wbar = (T @ T) @ (Y.T @ innov) / var  # C^-1 = T T since T is symmetric

    mean_a = belief.mean + belief.anomalies @ wbar
    anoms_a = belief.anomalies @ T
    return mean_a[:, None] + math.sqrt(n - 1) * anoms_a


def run_cycles(flow, ensemble: np.ndarray, observations, obs_op: ObsOperator,
               cfg: EtkfConfig, truth: np.ndarray | None = None,
               n_cycles: int | None = None) -> list[AssimilationCycleState]:
    """Alternate forecast / inflate / analysis over a sequence of cycles.

    ``flow`` advances a state or ensemble by one observation interval.
    ``observations`` is a sequence of :class:`ObservationRecord` with
    strictly increasing time indices (>= 1); cycles without an observation
    are pure forecasts.  ``truth``, when given, holds the true state at
    every cycle boundary (shape ``(n_cycles + 1, M)``) and enables RMSE
    bookkeeping.
    """
    times = [rec.time_index for rec in observations]
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])) or any(t < 1 for t in times):
        raise ValueError("observation times must be strictly increasing and >= 1")
    by_time = {rec.time_index: rec for rec in observations}
    if n_cycles is None:
        n_cycles = max(times, default=0)

    out = []
    E = ensemble
    for t in range(1, n_cycles + 1):
        E = flow(E)
        if not np.isfinite(E).all():
            raise NumericalOverflowError("ensemble forecast produced non-finite state", step=t)
        rec = by_time.get(t)
        if rec is not None:
            E = inflate(E, cfg.inflation)
            E = etkf_analysis(E, rec.value, obs_op, rec.err)
        rmse = None
        if truth is not None:
            diff = E.mean(axis=1) - truth[t]
            rmse = float(np.sqrt(np.mean(diff * diff)))
        out.append(AssimilationCycleState(ensemble=E, time_index=t, rmse=rmse))
    return out


def initial_ensemble(truth0: np.ndarray, n_members: int, sigma: float, rng) -> np.ndarray:
    """Truth at t=0 plus independent Gaussian perturbations, std sigma per component."""
    return truth0[:, None] + sigma * rng.standard_normal((truth0.shape[0], n_members))
