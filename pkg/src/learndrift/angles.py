"""Planar angle and frame helpers shared by the simulator, preprocessing and optimizer."""

from __future__ import annotations

import numpy as np

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Map an angle (scalar or array) into the half-open interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, TWO_PI)


def wrap_angle_diff(a, b):
    """Signed minimal difference ``a - b`` modulo 2*pi, in (-pi, pi]."""
    return wrap_angle(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def to_local_frame(heading, global_vel):
    """Rotate a world-frame velocity ``(xdot, ydot, heading_rate)`` into the body frame.

    Works on a single 3-vector or on stacked ``(..., 3)`` arrays with matching
    ``heading`` shape.
    """
    g = np.asarray(global_vel, dtype=float)
    c, s = np.cos(heading), np.sin(heading)
    vx = c * g[..., 0] + s * g[..., 1]
    vy = -s * g[..., 0] + c * g[..., 1]
    return np.stack([vx, vy, g[..., 2]], axis=-1)


def to_global_frame(heading, local_vel):
    """Inverse of :func:`to_local_frame`."""
    v = np.asarray(local_vel, dtype=float)
    c, s = np.cos(heading), np.sin(heading)
    xd = c * v[..., 0] - s * v[..., 1]
    yd = s * v[..., 0] + c * v[..., 1]
    return np.stack([xd, yd, v[..., 2]], axis=-1)


def rigid_transform_poses(poses, dx: float, dy: float, dtheta: float):
    """Apply a planar rigid motion (rotate by ``dtheta`` about the origin, then translate)."""
    p = np.asarray(poses, dtype=float)
    c, s = np.cos(dtheta), np.sin(dtheta)
    x = c * p[..., 0] - s * p[..., 1] + dx
    y = s * p[..., 0] + c * p[..., 1] + dy
    return np.stack([x, y, wrap_angle(p[..., 2] + dtheta)], axis=-1)
