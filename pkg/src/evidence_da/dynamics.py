"""Forward models (forced Lorenz-63, Lorenz-95) and fixed-step RK4 integration.

States are arrays of shape ``(M,)`` or, for ensembles, ``(M, N)`` with members
in columns.  Every tendency broadcasts over columns, so propagating an
ensemble is element-for-element identical to propagating its members one at
a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalOverflowError

try:  # compiled interval kernels; the numpy fallback is exercised in tests
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

# Forcing angle of the perturbed convection model, in radians (140 degrees).
DEFAULT_FORCING_ANGLE = 7.0 * math.pi / 9.0


@dataclass(frozen=True)
class L63Params:
    """Coefficients of the three-variable convection model.

    ``forcing`` and ``angle`` parameterize an additional time-constant
    forcing vector of length ``forcing`` at ``angle`` in the (x, y) plane;
    ``forcing = 0`` recovers the classical system.
    """

    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    forcing: float = 0.0
    angle: float = DEFAULT_FORCING_ANGLE

    def __post_init__(self):
        if not (self.sigma > 0.0 and self.beta > 0.0):
            raise ValueError("sigma and beta must be positive")
        if not math.isfinite(self.angle):
            raise ValueError("forcing angle must be finite")


@dataclass(frozen=True)
class L95Params:
    """Forcing and state dimension of the cyclic mid-latitude toy model."""

    forcing: float = 8.0
    dim: int = 40

    def __post_init__(self):
        if self.dim < 4:
            raise ValueError("cyclic advection stencil needs dim >= 4")


def l63_tendency(state: np.ndarray, p: L63Params) -> np.ndarray:
    """Time derivative of the forced convection model.

    ``state`` has shape ``(3,)`` or ``(3, N)``.
    """
    if state.shape[0] != 3:
        raise ValueError(f"state must have 3 variables, got {state.shape[0]}")
    x, y, z = state[0], state[1], state[2]
    return np.stack(
        [
            p.sigma * (y - x) + p.forcing * math.cos(p.angle),
            p.rho * x - y - x * z + p.forcing * math.sin(p.angle),
            x * y - p.beta * z,
        ]
    )


def l95_tendency(state: np.ndarray, p: L95Params) -> np.ndarray:
    """Time derivative of the cyclic model: x'_j = x_{j-1}(x_{j+1} - x_{j-2}) - x_j + F.

    Indices wrap around, so the stencil is well defined for dim >= 4.
    ``state`` has shape ``(dim,)`` or ``(dim, N)``.
    """
    if state.shape[0] != p.dim:
        raise ValueError(f"state has {state.shape[0]} variables, expected {p.dim}")
    xm1 = np.roll(state, 1, axis=0)
    xp1 = np.roll(state, -1, axis=0)
    xm2 = np.roll(state, 2, axis=0)
    return xm1 * (xp1 - xm2) - state + p.forcing


class Lorenz63:
    """Forced convection model bound to a parameter set."""

    name = "l63"
    dim = 3

    def __init__(self, params: L63Params | None = None):
        self.params = params if params is not None else L63Params()

    def tendency(self, state: np.ndarray) -> np.ndarray:
        return l63_tendency(state, self.params)


class Lorenz95:
    """Cyclic mid-latitude model bound to a parameter set."""

    name = "l95"

    def __init__(self, params: L95Params | None = None):
        self.params = params if params is not None else L95Params()
        self.dim = self.params.dim

    def tendency(self, state: np.ndarray) -> np.ndarray:
        return l95_tendency(state, self.params)


def make_model(name: str, forcing: float, **kwargs):
    """Instantiate a registered model ("l63" or "l95") by name.

    L63 accepts ``angle``; L95 accepts ``dim``.  Keeping the registry keyed
    by name lets the experiment harness build factual/counterfactual pairs
    from configuration alone.
    """
    if name == "l63":
        return Lorenz63(L63Params(forcing=forcing, **kwargs))
    if name == "l95":
        return Lorenz95(L95Params(forcing=forcing, **kwargs))
    raise ValueError(f"unknown model name {name!r}")


@dataclass(frozen=True)
class IntegratorSpec:
    """Internal time step of the fixed-step integrator."""

    dt: float
    scheme: str = "rk4"

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.scheme != "rk4":
            raise ValueError(f"unsupported scheme {self.scheme!r}")

    def steps_for(self, interval: float) -> int:
        """Number of internal steps per observation interval.

        The interval must be an integer multiple of ``dt`` (within 1e-12
        relative), otherwise observation times would drift off the grid.
        """
        steps = round(interval / self.dt)
        if steps < 1 or abs(steps * self.dt - interval) > 1e-12 * max(interval, self.dt):
            raise ValueError(
                f"observation interval {interval} is not an integer multiple of dt={self.dt}"
            )
        return steps


def _rk4(tendency, state, dt):
    k1 = tendency(state)
    k2 = tendency(state + (0.5 * dt) * k1)
    k3 = tendency(state + (0.5 * dt) * k2)
    k4 = tendency(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def rk4_step(tendency, state: np.ndarray, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step.  Deterministic."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    out = _rk4(tendency, state, dt)
    if not np.isfinite(out).all():
        raise NumericalOverflowError("RK4 step produced non-finite values")
    return out


def propagate(model, state: np.ndarray, n_steps: int, spec: IntegratorSpec) -> np.ndarray:
    """Integrate ``n_steps`` internal steps, returning all n_steps+1 states.

    Output has shape ``(n_steps + 1,) + state.shape``.  Raises
    :class:`NumericalOverflowError` naming the first step that left the
    finite range.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    out = np.empty((n_steps + 1,) + state.shape)
    out[0] = state
    x = state
    for i in range(n_steps):
        x = _rk4(model.tendency, x, spec.dt)
        if not np.isfinite(x).all():
            raise NumericalOverflowError("propagation produced non-finite state", step=i + 1)
        out[i + 1] = x
    return out


if _HAVE_NUMBA:

    @njit(cache=True)
    def _l63_interval_kernel(state, n_steps, dt, sigma, rho, beta, fx, fy):
        out = state.copy()
        for j in range(out.shape[1]):
            x, y, z = out[0, j], out[1, j], out[2, j]
            for _ in range(n_steps):
                k1x = sigma * (y - x) + fx
                k1y = rho * x - y - x * z + fy
                k1z = x * y - beta * z
                ax = x + 0.5 * dt * k1x
                ay = y + 0.5 * dt * k1y
                az = z + 0.5 * dt * k1z
                k2x = sigma * (ay - ax) + fx
                k2y = rho * ax - ay - ax * az + fy
                k2z = ax * ay - beta * az
                bx = x + 0.5 * dt * k2x
                by = y + 0.5 * dt * k2y
                bz = z + 0.5 * dt * k2z
                k3x = sigma * (by - bx) + fx
                k3y = rho * bx - by - bx * bz + fy
                k3z = bx * by - beta * bz
                cx = x + dt * k3x
                cy = y + dt * k3y
                cz = z + dt * k3z
                k4x = sigma * (cy - cx) + fx
                k4y = rho * cx - cy - cx * cz + fy
                k4z = cx * cy - beta * cz
                x += (dt / 6.0) * (k1x + 2.0 * (k2x + k3x) + k4x)
                y += (dt / 6.0) * (k1y + 2.0 * (k2y + k3y) + k4y)
                z += (dt / 6.0) * (k1z + 2.0 * (k2z + k3z) + k4z)
            out[0, j], out[1, j], out[2, j] = x, y, z
        return out

    @njit(cache=True)
    def _l95_interval_kernel(state, n_steps, dt, forcing):
        m = state.shape[0]
        out = state.copy()
        col = np.empty(m)
        k1 = np.empty(m)
        k2 = np.empty(m)
        k3 = np.empty(m)
        k4 = np.empty(m)
        stage = np.empty(m)
        for j in range(out.shape[1]):
            for i in range(m):
                col[i] = out[i, j]
            for _ in range(n_steps):
                for i in range(m):
                    k1[i] = col[(i - 1) % m] * (col[(i + 1) % m] - col[(i - 2) % m]) - col[i] + forcing
                for i in range(m):
                    stage[i] = col[i] + 0.5 * dt * k1[i]
                for i in range(m):
                    k2[i] = stage[(i - 1) % m] * (stage[(i + 1) % m] - stage[(i - 2) % m]) - stage[i] + forcing
                for i in range(m):
                    stage[i] = col[i] + 0.5 * dt * k2[i]
                for i in range(m):
                    k3[i] = stage[(i - 1) % m] * (stage[(i + 1) % m] - stage[(i - 2) % m]) - stage[i] + forcing
                for i in range(m):
                    stage[i] = col[i] + dt * k3[i]
                for i in range(m):
                    k4[i] = stage[(i - 1) % m] * (stage[(i + 1) % m] - stage[(i - 2) % m]) - stage[i] + forcing
                for i in range(m):
                    col[i] += (dt / 6.0) * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i])
            for i in range(m):
                out[i, j] = col[i]
        return out


def _kernel_flow(kernel, args, n_steps, dt):
    def flow(state):
        x = np.ascontiguousarray(state, dtype=float)
        if x.ndim == 1:
            return kernel(x[:, None], n_steps, dt, *args)[:, 0]
        return kernel(x, n_steps, dt, *args)

    return flow


def interval_flow(model, spec: IntegratorSpec, n_steps: int):
    """Callable advancing a state (or ensemble) by one observation interval.

    The two builtin models get a compiled per-column kernel when numba is
    available; anything else falls back to repeated RK4 steps.  Columns are
    integrated independently either way, so ensemble propagation matches
    member-by-member propagation.  No finiteness checks here: the
    assimilation and evidencing loops check once per interval so they can
    report which cycle blew up.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    dt = spec.dt
    if _HAVE_NUMBA and isinstance(model, Lorenz63):
        p = model.params
        args = (p.sigma, p.rho, p.beta,
                p.forcing * math.cos(p.angle), p.forcing * math.sin(p.angle))
        return _kernel_flow(_l63_interval_kernel, args, n_steps, dt)
    if _HAVE_NUMBA and isinstance(model, Lorenz95):
        return _kernel_flow(_l95_interval_kernel, (model.params.forcing,), n_steps, dt)
    tendency = model.tendency

    def flow(state):
        x = state
        for _ in range(n_steps):
            x = _rk4(tendency, x, dt)
        return x

    return flow


def matrix_flow(transition: np.ndarray):
    """Interval flow of a linear map, mainly for oracle tests."""
    A = np.asarray(transition, dtype=float)

    def flow(state):
        return A @ state

    return flow
