"""Discrete-time unicycle kinematics with global-frame velocity states.

The state is ``(px, py, psi, vx, vy)`` and the input is ``(v, omega)``.  One
forward-Euler step moves the position along the *pre-step* heading and stores
the resulting planar velocity, so ``hypot(vx, vy) == |v|`` after every step.

Two layers live here: small dataclasses for readable call sites, and array
kernels (:func:`rollout_arrays`, :func:`rollout_vjp`) used by the optimizers,
which need a whole horizon and its reverse-mode derivative at once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_DT = 0.1


@dataclass(frozen=True)
class AgentState:
    px: float
    py: float
    psi: float
    vx: float = 0.0
    vy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.psi, self.vx, self.vy], dtype=float)

    @classmethod
    def from_array(cls, x) -> "AgentState":
        x = np.asarray(x, dtype=float)
        return cls(float(x[0]), float(x[1]), float(x[2]), float(x[3]), float(x[4]))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.px, self.py])

    @property
    def velocity(self) -> np.ndarray:
        return np.array([self.vx, self.vy])


@dataclass(frozen=True)
class ControlInput:
    v: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.omega], dtype=float)


@dataclass(frozen=True)
class InputSet:
    v_min: float = -0.1
    v_max: float = 1.0
    omega_min: float = -8.0
    omega_max: float = 8.0

    def __post_init__(self):
        if not (self.v_min <= self.v_max and self.omega_min <= self.omega_max):
            raise ValueError(f"empty input box: {self}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.v_min, self.omega_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.v_max, self.omega_max])

    def contains(self, u: ControlInput, tol: float = 0.0) -> bool:
        return (self.v_min - tol <= u.v <= self.v_max + tol
                and self.omega_min - tol <= u.omega <= self.omega_max + tol)


@dataclass(frozen=True)
class StateSet:
    """Axis-aligned workspace box on position only."""

    x_min: float = -10.0
    x_max: float = 10.0
    y_min: float = -10.0
    y_max: float = 10.0

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"empty workspace box: {self}")

    def contains(self, state: AgentState) -> bool:
        return self.x_min <= state.px <= self.x_max and self.y_min <= state.py <= self.y_max


def step(state: AgentState, u: ControlInput, dt: float = DEFAULT_DT) -> AgentState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    # evaluation order mirrors rollout_arrays so both paths agree bitwise
    vx = math.cos(state.psi) * u.v
    vy = math.sin(state.psi) * u.v
    return AgentState(
        px=state.px + vx * dt,
        py=state.py + vy * dt,
        psi=state.psi + u.omega * dt,
        vx=vx,
        vy=vy,
    )


def rollout(state0: AgentState, inputs: Sequence[ControlInput], dt: float = DEFAULT_DT) -> list[AgentState]:
    """Return the states reached after each input, i.e. ``x[t+1] ... x[t+T]``."""
    if len(inputs) < 1:
        raise ValueError("rollout needs at least one input")
    states = []
    x = state0
    for u in inputs:
        x = step(x, u, dt)
        states.append(x)
    return states


def project_input(u: ControlInput, box: InputSet) -> ControlInput:
    return ControlInput(
        v=min(max(u.v, box.v_min), box.v_max),
        omega=min(max(u.omega, box.omega_min), box.omega_max),
    )


# ---------------------------------------------------------------------------
# array kernels


def step_array(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    vx = math.cos(x[2]) * u[0]
    vy = math.sin(x[2]) * u[0]
    return np.array([x[0] + vx * dt, x[1] + vy * dt, x[2] + u[1] * dt, vx, vy])


def rollout_arrays(x0: np.ndarray, U: np.ndarray, dt: float):
    """Vectorized horizon rollout.

    Parameters
    ----------
    x0 : (5,) array
    U : (T, 2) array of ``(v, omega)``
    dt : float

    Returns
    -------
    P : (T, 2) positions after each step
    V : (T, 2) global-frame velocities after each step
    psi : (T + 1,) headings; ``psi[k]`` is the heading *before* step ``k``
    cs : (T, 2) ``(cos psi[k], sin psi[k])`` for the pre-step headings
    """
    T = U.shape[0]
    psi = np.empty(T + 1)
    psi[0] = x0[2]
    psi[1:] = U[:, 1] * dt
    np.cumsum(psi, out=psi)
    cs = np.empty((T, 2))
    np.cos(psi[:-1], out=cs[:, 0])
    np.sin(psi[:-1], out=cs[:, 1])
    V = cs * U[:, :1]
    P = np.empty((T + 1, 2))
    P[0] = x0[:2]
    np.multiply(V, dt, out=P[1:])
    np.cumsum(P, axis=0, out=P)
    return P[1:], V, psi, cs


def rollout_vjp(U: np.ndarray, cs: np.ndarray, dt: float, gP: np.ndarray, gV: np.ndarray | None = None) -> np.ndarray:
    """Pull position/velocity cotangents back to the inputs.

    ``gP[k]`` and ``gV[k]`` are derivatives of a scalar with respect to the
    position and velocity *after* step ``k``.  Returns the ``(T, 2)`` gradient
    with respect to ``U``.
    """
    # G[l] = sum_{k >= l} gP[k]
    G = np.cumsum(gP[::-1], axis=0)[::-1] * dt
    if gV is not None:
        G = G + gV
    g = np.empty_like(U)
    g[:, 0] = G[:, 0] * cs[:, 0] + G[:, 1] * cs[:, 1]
    # derivative w.r.t. the pre-step heading of step l
    h = U[:, 0] * (G[:, 1] * cs[:, 0] - G[:, 0] * cs[:, 1])
    # psi[l] depends on omega[m] for m < l
    tail = np.cumsum(h[::-1])[::-1]
    g[:-1, 1] = dt * tail[1:]
    g[-1, 1] = 0.0
    return g


def states_from_rollout(x0: np.ndarray, U: np.ndarray, dt: float) -> np.ndarray:
    """Full ``(T, 5)`` state trajectory, matching repeated :func:`step_array`."""
    X = np.empty((U.shape[0], 5))
    x = np.asarray(x0, dtype=float)
    for k in range(U.shape[0]):
        x = step_array(x, U[k], dt)
        X[k] = x
    return X
