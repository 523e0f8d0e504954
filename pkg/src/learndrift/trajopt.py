"""Direct-shooting trajectory optimization through a learned transition model.

The rollout carries the augmented state ``z_i = (pose_i, v_i)``:

    v_{i+1} = f(v_i, u_i)
    pose_{i+1} = pose_i + h * R(heading_i) @ v_{i+1}

Gradients of the total cost with respect to the controls come from an adjoint
(backward) recursion over the per-step Jacobian blocks, which is the
block-bidiagonal solve of the implicit-function construction done without
forming the dense sensitivity matrix. Each iteration then tries a batch of
log-spaced step sizes along the negative gradient and keeps the cheapest.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular

from learndrift.angles import wrap_angle, wrap_angle_diff
from learndrift.car_sim import integrate_pose

StateCost = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


class OptimizationError(RuntimeError):
    """Raised when the cost or gradient stops being finite."""


@dataclass(frozen=True)
class TargetSpec:
    step: int
    pose: tuple[float, float, float]
    weight: float = 1.0

    def __post_init__(self):
        if len(self.pose) != 3 or not np.all(np.isfinite(self.pose)):
            raise ValueError(f"target pose must be 3 finite numbers, got {self.pose}")
        if not self.weight >= 0:
            raise ValueError(f"target weight must be nonnegative, got {self.weight}")


@dataclass(frozen=True)
class CostSpec:
    targets: tuple[TargetSpec, ...] = ()
    w_reg_mag: float = 1e-3
    w_reg_smooth: float = 1e-2
    w_limits: float = 10.0
    u_lower: tuple[float, float] = (-1.0, -1.0)
    u_upper: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        for name in ("w_reg_mag", "w_reg_smooth", "w_limits"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if not np.all(np.asarray(self.u_lower) < np.asarray(self.u_upper)):
            raise ValueError(f"u_lower {self.u_lower} must be below u_upper {self.u_upper} componentwise")


@dataclass(frozen=True)
class LineSearchSchedule:
    count: int = 512
    min_scale: float = 1e-6
    max_scale: float = 1.0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("line-search count must be >= 1")
        if not 0 < self.min_scale <= self.max_scale:
            raise ValueError("need 0 < min_scale <= max_scale")

    def scales(self) -> np.ndarray:
        """Ascending log-spaced step scales, both ends included."""
        return np.logspace(np.log10(self.min_scale), np.log10(self.max_scale), self.count)


@dataclass
class TrajOptProblem:
    """One finite-horizon problem.

    ``state_cost`` optionally adds a pose-dependent term: it receives stacked
    poses ``(B, n+1, 3)`` and returns per-candidate values ``(B,)`` and their
    pose gradients.
    """

    n: int
    h: float
    x0: np.ndarray
    v0: np.ndarray
    model: object
    cost: CostSpec = field(default_factory=CostSpec)
    schedule: LineSearchSchedule = field(default_factory=LineSearchSchedule)
    max_iterations: int = 100
    tolerance: float = 1e-6
    state_cost: StateCost | None = None
    jobs: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        self.x0 = np.asarray(self.x0, dtype=float).reshape(3)
        self.v0 = np.asarray(self.v0, dtype=float).reshape(3)
        for t in self.cost.targets:
            if not 1 <= t.step <= self.n:
                raise ValueError(f"target step {t.step} outside 1..{self.n}")


@dataclass
class TrajOptResult:
    """Optimizer output. ``states`` and ``velocities`` include the initial row (n+1 rows)."""

    u: np.ndarray
    states: np.ndarray
    velocities: np.ndarray
    cost_history: list[float]
    alpha_history: list[float]
    termination: str
    first_gradient: np.ndarray | None = None

    @property
    def iterations(self) -> int:
        return len(self.alpha_history)

    @property
    def cost(self) -> float:
        return self.cost_history[-1]


# --- rollout -----------------------------------------------------------------


def rollout_model(model, h: float, x0, v0, u) -> tuple[np.ndarray, np.ndarray]:
    """Open-loop rollout, batched over leading axes of ``x0 (..., 3)``, ``v0`` and ``u (..., n, 2)``.

    Returns:
        Poses and body velocities, each ``(..., n+1, 3)``.
    """
    u = np.asarray(u, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    n = u.shape[-2]
    batch = np.broadcast_shapes(u.shape[:-2], x0.shape[:-1], v0.shape[:-1])
    poses = np.empty(batch + (n + 1, 3))
    vels = np.empty(batch + (n + 1, 3))
    poses[..., 0, :] = x0
    poses[..., 0, 2] = wrap_angle(poses[..., 0, 2])
    vels[..., 0, :] = v0
    u = np.broadcast_to(u, batch + (n, 2))
    for i in range(n):
        nxt = np.asarray(model.predict(vels[..., i, :], u[..., i, :]))
        if nxt.shape != batch + (3,):
            raise ValueError(f"model returned shape {nxt.shape}, expected {batch + (3,)}")
        vels[..., i + 1, :] = nxt
        poses[..., i + 1, :] = integrate_pose(poses[..., i, :], nxt, h)
    return poses, vels


def rollout_learned(problem: TrajOptProblem, u) -> tuple[np.ndarray, np.ndarray]:
    """Roll controls ``(..., n, 2)`` through the problem's model from its initial state."""
    u = np.asarray(u, dtype=float)
    if u.shape[-2:] != (problem.n, 2):
        raise ValueError(f"controls must have shape (..., {problem.n}, 2), got {u.shape}")
    return rollout_model(problem.model, problem.h, problem.x0, problem.v0, u)


# --- costs -------------------------------------------------------------------


def barrier(s):
    """One-sided quadratic barrier and its derivative: ``(s**2, 2s)`` for s > 0, else zeros."""
    s = np.asarray(s, dtype=float)
    pos = np.maximum(s, 0.0)
    return pos * pos, 2.0 * pos


def control_cost(cost: CostSpec, u) -> tuple[np.ndarray, np.ndarray]:
    """Regularizer plus limit barrier, batched over leading axes of ``u (..., n, 2)``."""
    u = np.asarray(u, dtype=float)
    value = cost.w_reg_mag * np.sum(u * u, axis=(-2, -1))
    grad = 2.0 * cost.w_reg_mag * u
    du = np.diff(u, axis=-2)
    value = value + cost.w_reg_smooth * np.sum(du * du, axis=(-2, -1))
    g_s = 2.0 * cost.w_reg_smooth * du
    grad[..., 1:, :] += g_s
    grad[..., :-1, :] -= g_s
    b_lo, db_lo = barrier(np.asarray(cost.u_lower) - u)
    b_hi, db_hi = barrier(u - np.asarray(cost.u_upper))
    value = value + cost.w_limits * np.sum(b_lo + b_hi, axis=(-2, -1))
    grad += cost.w_limits * (db_hi - db_lo)
    return value, grad


def target_cost(cost: CostSpec, poses) -> tuple[np.ndarray, np.ndarray]:
    """Weighted squared pose error at the target steps (wrap-aware heading)."""
    poses = np.asarray(poses, dtype=float)
    value = np.zeros(poses.shape[:-2])
    grad = np.zeros_like(poses)
    for t in cost.targets:
        err = poses[..., t.step, :] - np.asarray(t.pose)
        err[..., 2] = wrap_angle_diff(poses[..., t.step, 2], t.pose[2])
        value = value + t.weight * np.sum(err * err, axis=-1)
        grad[..., t.step, :] += 2.0 * t.weight * err
    return value, grad


def total_cost(problem: TrajOptProblem, poses, u):
    """Total cost and its partials with respect to poses and controls.

    Batched over leading axes. Returns ``(l, dl/dposes, dl/du)``.
    """
    l_u, g_u = control_cost(problem.cost, u)
    l_x, g_x = target_cost(problem.cost, poses)
    if problem.state_cost is not None:
        l_s, g_s = problem.state_cost(poses)
        l_x, g_x = l_x + l_s, g_x + g_s
    return l_x + l_u, g_x, g_u


def evaluate_costs(problem: TrajOptProblem, u) -> np.ndarray:
    """Costs of a batch of control sequences ``(B, n, 2)``; non-finite costs become +inf."""
    poses, _ = rollout_learned(problem, u)
    l, _, _ = total_cost(problem, poses, u)
    return np.where(np.isfinite(l), l, np.inf)


# --- sensitivities -----------------------------------------------------------


def residual_jacobians(problem: TrajOptProblem, poses, vels, u) -> tuple[np.ndarray, np.ndarray]:
    """Per-step blocks ``A_i = dz_{i+1}/dz_i (n,6,6)`` and ``B_i = dz_{i+1}/du_i (n,6,2)``."""
    n, h = problem.n, problem.h
    J = np.asarray(problem.model.jacobian(vels[:-1], u))  # (n, 3, 5)
    Jv, Ju = J[..., :3], J[..., 3:]
    th = poses[:-1, 2]
    c, s = np.cos(th), np.sin(th)
    R = np.zeros((n, 3, 3))
    R[:, 0, 0], R[:, 0, 1], R[:, 1, 0], R[:, 1, 1], R[:, 2, 2] = c, -s, s, c, 1.0
    v1 = vels[1:]
    A = np.zeros((n, 6, 6))
    A[:, :3, :3] = np.eye(3)
    # heading column: d(R v)/d(heading)
    A[:, 0, 2] += h * (-s * v1[:, 0] - c * v1[:, 1])
    A[:, 1, 2] += h * (c * v1[:, 0] - s * v1[:, 1])
    A[:, :3, 3:] = h * R @ Jv
    A[:, 3:, 3:] = Jv
    B = np.zeros((n, 6, 2))
    B[:, :3] = h * R @ Ju
    B[:, 3:] = Ju
    return A, B


def cost_gradient(problem: TrajOptProblem, u) -> tuple[np.ndarray, float]:
    """Adjoint gradient ``dl/du (n, 2)`` and the cost ``l`` at ``u``."""
    u = np.asarray(u, dtype=float)
    poses, vels = rollout_learned(problem, u)
    l, g_x, g_u = total_cost(problem, poses, u)
    A, B = residual_jacobians(problem, poses, vels, u)
    grad = g_u.copy()
    lam = np.concatenate([g_x[-1], np.zeros(3)])  # dl/dz_n; velocities carry no direct cost
    for i in range(problem.n - 1, -1, -1):
        grad[i] += B[i].T @ lam
        lam = A[i].T @ lam + np.concatenate([g_x[i], np.zeros(3)])
    return grad, float(l)


def dense_sensitivity(problem: TrajOptProblem, u) -> np.ndarray:
    """Dense ``dZ/du (6n, 2n)`` from ``-(dg/dZ)^{-1} dg/du`` with ``g_i = z_{i+1} - F(z_i, u_i)``.

    Test oracle for :func:`cost_gradient`; cubic in ``n``.
    """
    u = np.asarray(u, dtype=float)
    poses, vels = rollout_learned(problem, u)
    A, B = residual_jacobians(problem, poses, vels, u)
    n = problem.n
    dg_dz = np.eye(6 * n)
    dg_du = np.zeros((6 * n, 2 * n))
    for i in range(n):
        if i > 0:
            dg_dz[6 * i : 6 * i + 6, 6 * (i - 1) : 6 * i] = -A[i]
        dg_du[6 * i : 6 * i + 6, 2 * i : 2 * i + 2] = -B[i]
    # unit lower block-bidiagonal: forward substitution keeps the causal zeros exact
    return -solve_triangular(dg_dz, dg_du, lower=True, unit_diagonal=True)


def dense_cost_gradient(problem: TrajOptProblem, u) -> np.ndarray:
    """``dl/du`` through the dense sensitivity matrix (oracle for the adjoint)."""
    u = np.asarray(u, dtype=float)
    poses, _ = rollout_learned(problem, u)
    _, g_x, g_u = total_cost(problem, poses, u)
    dl_dz = np.concatenate([g_x[1:], np.zeros_like(g_x[1:])], axis=-1).reshape(-1)
    return (dl_dz @ dense_sensitivity(problem, u)).reshape(problem.n, 2) + g_u


def fd_cost_gradient(problem: TrajOptProblem, u, step: float = 1e-5) -> tuple[np.ndarray, float]:
    """Central finite-difference gradient, all ``2 * n * 2`` probes in one batch."""
    u = np.asarray(u, dtype=float)
    k = u.size
    eye = np.eye(k).reshape(k, *u.shape) * step
    probes = np.concatenate([u + eye, u - eye])
    costs = _batch_costs(problem, probes)
    l = float(evaluate_costs(problem, u[None])[0])
    return ((costs[:k] - costs[k:]) / (2 * step)).reshape(u.shape), l


# --- line search and optimizer -----------------------------------------------


def _batch_costs(problem: TrajOptProblem, candidates: np.ndarray) -> np.ndarray:
    if problem.jobs <= 1 or len(candidates) < 2 * problem.jobs:
        return evaluate_costs(problem, candidates)
    chunks = np.array_split(candidates, problem.jobs)
    with ThreadPoolExecutor(problem.jobs) as pool:
        return np.concatenate(list(pool.map(lambda c: evaluate_costs(problem, c), chunks)))


def line_search(problem: TrajOptProblem, u, gradient, l_current: float):
    """Try ``u - alpha * gradient`` for every scheduled alpha at once.

    Returns:
        ``(u_new, l_new, alpha)``, or ``(u, l_current, None)`` when no candidate
        strictly improves. Ties go to the smallest alpha.
    """
    u = np.asarray(u, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != u.shape:
        raise ValueError(f"gradient shape {gradient.shape} does not match controls {u.shape}")
    alphas = problem.schedule.scales()
    candidates = u[None] - alphas[:, None, None] * gradient[None]
    costs = _batch_costs(problem, candidates)
    best = int(np.argmin(costs))
    if not costs[best] < l_current:
        return u, l_current, None
    return candidates[best], float(costs[best]), float(alphas[best])


def _first_bad_step(problem: TrajOptProblem, u) -> int:
    poses, vels = rollout_learned(problem, u)
    bad = ~np.all(np.isfinite(np.concatenate([poses, vels], axis=-1)), axis=-1)
    bad[1:] |= ~np.all(np.isfinite(u), axis=-1)
    return int(np.argmax(bad)) if bad.any() else -1


def optimize(problem: TrajOptProblem, u_init, grad_mode: str = "analytic") -> TrajOptResult:
    """Gradient descent with the batched line search.

    Stops on the first of: no improving step (``"no_improvement"``), relative
    decrease below ``problem.tolerance`` three iterations running
    (``"converged"``), or ``problem.max_iterations`` (``"max_iterations"``).

    Raises:
        OptimizationError: if cost or gradient is not finite.
    """
    if grad_mode not in ("analytic", "fd"):
        raise ValueError(f"unknown gradient mode {grad_mode!r}")
    grad_fn = cost_gradient if grad_mode == "analytic" else fd_cost_gradient
    u = np.array(u_init, dtype=float).reshape(problem.n, 2)
    costs: list[float] = []
    alphas: list[float] = []
    first_grad = None
    reason = "max_iterations"
    small = 0
    for it in range(problem.max_iterations):
        grad, l = grad_fn(problem, u)
        if not np.isfinite(l):
            raise OptimizationError(f"non-finite cost at iteration {it}; rollout breaks at step {_first_bad_step(problem, u)}")
        if not np.all(np.isfinite(grad)):
            step = int(np.argmax(~np.all(np.isfinite(grad), axis=-1)))
            raise OptimizationError(f"non-finite gradient at iteration {it}, control step {step}")
        if first_grad is None:
            first_grad = grad
            costs.append(l)
        u_new, l_new, alpha = line_search(problem, u, grad, l)
        if alpha is None:
            reason = "no_improvement"
            break
        assert l_new < costs[-1], "accepted step must strictly decrease the cost"
        rel = (costs[-1] - l_new) / max(abs(costs[-1]), 1e-300)
        u = u_new
        costs.append(l_new)
        alphas.append(alpha)
        small = small + 1 if rel < problem.tolerance else 0
        if small >= 3:
            reason = "converged"
            break
    if not costs:
        costs.append(float(evaluate_costs(problem, u[None])[0]))
    poses, vels = rollout_learned(problem, u)
    return TrajOptResult(u, poses, vels, costs, alphas, reason, first_grad)


# --- scenario files and outputs ----------------------------------------------


@dataclass(frozen=True)
class Scenario:
    """Offline optimization scenario as stored in JSON."""

    name: str
    n: int
    h: float
    x0: tuple[float, float, float]
    v0: tuple[float, float, float]
    cost: CostSpec
    schedule: LineSearchSchedule = LineSearchSchedule()
    max_iterations: int = 100
    tolerance: float = 1e-6
    model: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            c = d.get("cost", {})
            targets = tuple(TargetSpec(int(t["step"]), tuple(t["pose"]), float(t.get("weight", 1.0))) for t in d["targets"])
            cost = CostSpec(
                targets,
                float(c.get("w_reg_mag", 1e-3)),
                float(c.get("w_reg_smooth", 1e-2)),
                float(c.get("w_limits", 10.0)),
                tuple(c.get("u_lower", (-1.0, -1.0))),
                tuple(c.get("u_upper", (1.0, 1.0))),
            )
            ls = d.get("line_search", {})
            return cls(
                name=str(d.get("name", "scenario")),
                n=int(d["n"]),
                h=float(d["h"]),
                x0=tuple(d["x0"]),
                v0=tuple(d.get("v0", (0.0, 0.0, 0.0))),
                cost=cost,
                schedule=LineSearchSchedule(int(ls.get("count", 512)), float(ls.get("min_scale", 1e-6)), float(ls.get("max_scale", 1.0))),
                max_iterations=int(d.get("max_iterations", 100)),
                tolerance=float(d.get("tolerance", 1e-6)),
                model=d.get("model"),
            )
        except KeyError as e:
            raise ValueError(f"scenario is missing field {e.args[0]!r}") from None

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def problem(self, model, jobs: int = 1) -> TrajOptProblem:
        return TrajOptProblem(
            self.n, self.h, np.array(self.x0), np.array(self.v0), model, self.cost,
            self.schedule, self.max_iterations, self.tolerance, jobs=jobs,
        )


TELEMETRY_HEADER = ["step", "x", "y", "heading", "vx", "vy", "omega", "throttle", "steer"]


def write_telemetry_csv(path, poses, vels, u) -> None:
    """One row per step; the last row has no control, written as empty fields."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TELEMETRY_HEADER)
        for i in range(len(poses)):
            ctrl = [repr(float(c)) for c in u[i]] if i < len(u) else ["", ""]
            w.writerow([i, *(repr(float(a)) for a in poses[i]), *(repr(float(a)) for a in vels[i]), *ctrl])


def result_report(result: TrajOptResult) -> dict:
    return {
        "termination": result.termination,
        "iterations": result.iterations,
        "cost_history": result.cost_history,
        "alpha_history": result.alpha_history,
        "final_cost": result.cost,
    }
