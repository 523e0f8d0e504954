"""Transition models ``v_{i+1} = f(v_i, u_i)`` consumed by the optimizer.

Every model maps stacked body velocities ``(..., 3)`` and controls ``(..., 2)``
to next body velocities, and supplies the input Jacobian ``(..., 3, 5)`` with
columns ordered ``(vx, vy, omega, throttle, steer)``.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

import numpy as np

from learndrift.car_sim import SimParams, advance_velocity


@runtime_checkable
class TransitionModel(Protocol):
    def predict(self, v, u) -> np.ndarray: ...

    def jacobian(self, v, u) -> np.ndarray: ...


def _broadcast(v, u):
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    if v.shape[-1:] != (3,) or u.shape[-1:] != (2,):
        raise ValueError(f"expected (...,3) velocities and (...,2) controls, got {v.shape} and {u.shape}")
    batch = np.broadcast_shapes(v.shape[:-1], u.shape[:-1])
    return np.broadcast_to(v, batch + (3,)), np.broadcast_to(u, batch + (2,))


def fd_jacobian(predict, v, u, step: float = 1e-6) -> np.ndarray:
    """Central-difference input Jacobian of ``predict`` evaluated in one batch."""
    v, u = _broadcast(v, u)
    x = np.concatenate([v, u], axis=-1)
    eye = np.eye(5) * step
    probes = np.concatenate([x[..., None, :] + eye, x[..., None, :] - eye], axis=-2)  # (..., 10, 5)
    out = predict(probes[..., :3], probes[..., 3:])
    jac = (out[..., :5, :] - out[..., 5:, :]) / (2 * step)  # (..., 5, 3)
    return np.swapaxes(jac, -1, -2)


class SimModel:
    """The simulator itself wrapped as a transition model (perfect-model oracle).

    The Jacobian is a central finite difference; the friction cap makes the
    plant only piecewise smooth, so it is exact away from traction switches.
    """

    def __init__(self, params: SimParams | None = None, h: float = 0.05, fd_step: float = 1e-6):
        self.params = params or SimParams()
        self.h = h
        self.params.inner_steps(h)
        self.fd_step = fd_step

    def predict(self, v, u) -> np.ndarray:
        v, u = _broadcast(v, u)
        return advance_velocity(v, u, self.params, self.h)[0]

    def jacobian(self, v, u) -> np.ndarray:
        return fd_jacobian(self.predict, v, u, self.fd_step)


class LinearModel:
    """``f(v, u) = M v + N u + c``; mostly a closed-form test fixture."""

    def __init__(self, M, N, c=None):
        self.M = np.asarray(M, dtype=float).reshape(3, 3)
        self.N = np.asarray(N, dtype=float).reshape(3, 2)
        self.c = np.zeros(3) if c is None else np.asarray(c, dtype=float).reshape(3)

    def predict(self, v, u) -> np.ndarray:
        v, u = _broadcast(v, u)
        return v @ self.M.T + u @ self.N.T + self.c

    def jacobian(self, v, u) -> np.ndarray:
        v, _ = _broadcast(v, u)
        return np.broadcast_to(np.hstack([self.M, self.N]), v.shape[:-1] + (3, 5)).copy()


class ConstantVelocityModel(LinearModel):
    """Baseline that predicts the input velocity unchanged."""

    def __init__(self):
        super().__init__(np.eye(3), np.zeros((3, 2)))


class ZeroVelocityModel(LinearModel):
    """Degenerate model that always predicts a standing car."""

    def __init__(self):
        super().__init__(np.zeros((3, 3)), np.zeros((3, 2)))
