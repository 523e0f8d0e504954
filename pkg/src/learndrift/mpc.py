"""Receding-horizon racing controller on a closed centerline track.

Each cycle re-optimizes an ``n``-step control sequence through the learned
model and applies its first entry. The plant reacts one cycle late (the
command computed during cycle ``k`` acts over ``[t_{k+1}, t_{k+2})``), so by
default the controller plans from the state predicted one step ahead under the
command already in flight.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from learndrift.car_sim import SimParams, advance_velocity, integrate_pose
from learndrift.trajopt import (
    CostSpec,
    LineSearchSchedule,
    OptimizationError,
    TrajOptProblem,
    barrier,
    control_cost,
    optimize,
)


@dataclass
class Track:
    """Closed polyline centerline (the last vertex connects back to the first)."""

    centerline: np.ndarray
    half_width: float

    def __post_init__(self):
        c = np.asarray(self.centerline, dtype=float)
        if c.ndim != 2 or c.shape[1] != 2 or len(c) < 3:
            raise ValueError("a track needs at least 3 two-dimensional vertices")
        if not np.all(np.isfinite(c)):
            raise ValueError("track vertices must be finite")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        seg = np.roll(c, -1, axis=0) - c
        length = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(length == 0):
            raise ValueError(f"consecutive track vertices coincide at index {int(np.argmin(length))}")
        self.centerline = c
        self.half_width = float(self.half_width)
        self._length = length
        self._tangent = seg / length[:, None]
        self._normal = np.column_stack([-self._tangent[:, 1], self._tangent[:, 0]])
        self._cum = np.concatenate([[0.0], np.cumsum(length)[:-1]])

    @property
    def total_length(self) -> float:
        return float(self._cum[-1] + self._length[-1])

    @property
    def start_pose(self) -> np.ndarray:
        t = self._tangent[0]
        return np.array([*self.centerline[0], math.atan2(t[1], t[0])])

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Nearest-segment projection of ``(..., 2)`` points.

        Returns:
            ``(s, d, segment)`` with ``s`` in ``[0, total_length)``, ``d`` signed
            (left of travel positive), and the segment index. Ties go to the
            lower segment index, i.e. the lower ``s``.
        """
        p = np.asarray(points, dtype=float)
        rel = p[..., None, :] - self.centerline  # (..., m, 2)
        along = np.einsum("...mk,mk->...m", rel, self._tangent)
        t = np.clip(along, 0.0, self._length)
        foot = rel - t[..., None] * self._tangent
        dist2 = np.einsum("...mk,...mk->...m", foot, foot)
        k = np.argmin(dist2, axis=-1)
        tk = np.take_along_axis(t, k[..., None], -1)[..., 0]
        s = self._cum[k] + tk
        side = np.einsum("...k,...k->...", np.take_along_axis(rel, k[..., None, None], -2)[..., 0, :], self._normal[k])
        d = np.copysign(np.sqrt(np.take_along_axis(dist2, k[..., None], -1)[..., 0]), side)
        return s, d, k

    def to_dict(self) -> dict:
        return {"centerline": self.centerline.tolist(), "half_width": self.half_width}

    @classmethod
    def from_dict(cls, d: dict) -> "Track":
        for key in ("centerline", "half_width"):
            if key not in d:
                raise ValueError(f"track file is missing '{key}'")
        return cls(np.asarray(d["centerline"], dtype=float), float(d["half_width"]))

    @classmethod
    def load(cls, path) -> "Track":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def oval(cls, straight: float = 4.0, radius: float = 1.5, half_width: float = 0.4, arc_segments: int = 32) -> "Track":
        """Counter-clockwise stadium starting at the beginning of the lower straight."""
        pts = [(0.0, -radius), (straight, -radius)]
        for j in range(1, arc_segments):
            a = -math.pi / 2 + math.pi * j / arc_segments
            pts.append((straight + radius * math.cos(a), radius * math.sin(a)))
        pts += [(straight, radius), (0.0, radius)]
        for j in range(1, arc_segments):
            a = math.pi / 2 + math.pi * j / arc_segments
            pts.append((radius * math.cos(a), radius * math.sin(a)))
        return cls(np.array(pts), half_width)


def unwrap_s(track: Track, s, s_ref):
    """Shift ``s`` by whole laps to land within half a lap of ``s_ref``."""
    L = track.total_length
    return s + L * np.round((np.asarray(s_ref) - s) / L)


def progress(track: Track, point, s_prev: float | None = None) -> tuple[float, float]:
    """Arc length and signed lateral offset of one point, lap-unwrapped against ``s_prev``."""
    s, d, _ = track.project(np.asarray(point, dtype=float)[:2])
    s = float(s)
    if s_prev is not None:
        s = float(unwrap_s(track, s, s_prev))
    return s, float(d)


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    rate: float = 20.0
    iterations: int = 8
    target_speed: float = 2.5
    excursion_weight: float = 50.0
    progress_weight: float = 1.0
    latency_compensation: bool = True
    grad_mode: str = "analytic"
    cost: CostSpec = CostSpec()
    schedule: LineSearchSchedule = LineSearchSchedule()
    max_cycles: int = 2000
    jobs: int = 1

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.rate > 0:
            raise ValueError("control rate must be positive")
        if self.iterations < 0:
            raise ValueError("iteration budget must be >= 0")
        if self.grad_mode not in ("analytic", "fd"):
            raise ValueError(f"unknown gradient mode {self.grad_mode!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.rate

    @classmethod
    def from_dict(cls, d: dict) -> "MpcConfig":
        d = dict(d)
        c = d.pop("cost", None)
        ls = d.pop("line_search", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown MPC config keys: {sorted(unknown)}")
        if c is not None:
            d["cost"] = CostSpec(
                (), c.get("w_reg_mag", 1e-3), c.get("w_reg_smooth", 1e-2), c.get("w_limits", 10.0),
                tuple(c.get("u_lower", (-1.0, -1.0))), tuple(c.get("u_upper", (1.0, 1.0))),
            )
        if ls is not None:
            d["schedule"] = LineSearchSchedule(**ls)
        return cls(**d)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("cost", "schedule")}
        c = self.cost
        out["cost"] = {"w_reg_mag": c.w_reg_mag, "w_reg_smooth": c.w_reg_smooth, "w_limits": c.w_limits,
                       "u_lower": list(c.u_lower), "u_upper": list(c.u_upper)}
        s = self.schedule
        out["line_search"] = {"count": s.count, "min_scale": s.min_scale, "max_scale": s.max_scale}
        return out


class TrackCost:
    """Progress deficit against a constant-speed reference plus an excursion barrier.

    ``l = w_p * sum_i max(0, s_ref_i - s_i) + w_e * sum_i B(|d_i| - half_width)``
    over steps ``i = 1..n`` with ``s_ref_i = s_0 + v * h * i``. Partials use the
    frame of the segment each state projects onto.
    """

    def __init__(self, track: Track, config: MpcConfig, s0: float):
        self.track = track
        self.config = config
        self.s0 = s0

    def __call__(self, poses) -> tuple[np.ndarray, np.ndarray]:
        tr, cfg = self.track, self.config
        poses = np.asarray(poses, dtype=float)
        n = poses.shape[-2] - 1
        s_raw, d, k = tr.project(poses[..., :2])
        s = np.empty_like(s_raw)
        s[..., 0] = unwrap_s(tr, s_raw[..., 0], self.s0)
        for i in range(1, n + 1):
            s[..., i] = unwrap_s(tr, s_raw[..., i], s[..., i - 1])
        s_ref = self.s0 + cfg.target_speed * cfg.h * np.arange(n + 1)
        deficit = (s_ref - s)[..., 1:]
        value = cfg.progress_weight * np.sum(np.maximum(deficit, 0.0), axis=-1)
        b, db = barrier(np.abs(d[..., 1:]) - tr.half_width)
        value = value + cfg.excursion_weight * np.sum(b, axis=-1)
        grad = np.zeros_like(poses)
        ds = -cfg.progress_weight * (deficit > 0)
        dd = cfg.excursion_weight * db * np.sign(d[..., 1:])
        grad[..., 1:, :2] = ds[..., None] * tr._tangent[k[..., 1:]] + dd[..., None] * tr._normal[k[..., 1:]]
        return value, grad


def track_cost(track: Track, config: MpcConfig, poses, u, s0: float | None = None):
    """Track terms plus control regularizer and limits; returns ``(l, dl/dposes, dl/du)``."""
    poses = np.asarray(poses, dtype=float)
    if s0 is None:
        s0 = float(track.project(poses[..., 0, :2])[0].reshape(-1)[0])
    l_x, g_x = TrackCost(track, config, s0)(poses)
    l_u, g_u = control_cost(config.cost, u)
    return l_x + l_u, g_x, g_u


@dataclass
class Controller:
    track: Track
    config: MpcConfig
    model: object
    u_seq: np.ndarray | None = None
    pending: np.ndarray = field(default_factory=lambda: np.zeros(2))
    s_prev: float | None = None
    degraded: bool = False
    last_warm_start: np.ndarray | None = None


@dataclass
class CycleInfo:
    iterations: int
    cost: float
    s: float
    cost_history: list[float]
    first_gradient: np.ndarray | None
    degraded: bool


def warm_start(prev: np.ndarray | None, n: int) -> np.ndarray:
    if prev is None:
        return np.zeros((n, 2))
    return np.vstack([prev[1:], np.zeros((1, 2))])


def mpc_step(ctrl: Controller, pose, vel) -> tuple[np.ndarray, CycleInfo]:
    """One control cycle from a measured plant state; returns the command to apply next."""
    cfg = ctrl.config
    pose = np.asarray(pose, dtype=float)
    vel = np.asarray(vel, dtype=float)
    if cfg.latency_compensation:
        vel = np.asarray(ctrl.model.predict(vel, ctrl.pending))
        pose = integrate_pose(pose, vel, cfg.h)
    s0, _ = progress(ctrl.track, pose, ctrl.s_prev)
    warm = warm_start(ctrl.u_seq, cfg.horizon)
    if ctrl.u_seq is not None:
        assert np.array_equal(warm[:-1], ctrl.u_seq[1:]) and not warm[-1].any(), "warm start must be the shifted sequence"
    ctrl.last_warm_start = warm.copy()
    problem = TrajOptProblem(
        cfg.horizon, cfg.h, pose, vel, ctrl.model, cfg.cost, cfg.schedule,
        max_iterations=cfg.iterations, tolerance=0.0, state_cost=TrackCost(ctrl.track, cfg, s0), jobs=cfg.jobs,
    )
    try:
        result = optimize(problem, warm, grad_mode=cfg.grad_mode)
    except OptimizationError:
        ctrl.degraded = True
        ctrl.u_seq = warm
        return warm[0].copy(), CycleInfo(0, float("nan"), s0, [], None, True)
    assert np.all(np.diff(result.cost_history) < 0), "optimizer accepted a non-improving step"
    ctrl.degraded = False
    ctrl.u_seq = result.u
    return result.u[0].copy(), CycleInfo(result.iterations, result.cost, s0, result.cost_history, result.first_gradient, False)


TELEMETRY_HEADER = ["cycle", "t", "x", "y", "heading", "vx", "vy", "omega", "throttle", "steer", "s", "d", "opt_iters", "opt_cost", "cycle_ms"]


@dataclass
class LapTelemetry:
    rows: list[list[float]]
    lap_times: list[float]
    completed: bool
    first_gradient: np.ndarray | None
    laps: int
    track_length: float
    target_speed: float

    def column(self, name: str) -> np.ndarray:
        j = TELEMETRY_HEADER.index(name)
        return np.array([r[j] for r in self.rows], dtype=float)

    @property
    def max_abs_d(self) -> float:
        return float(np.max(np.abs(self.column("d"))))

    @property
    def mean_speed(self) -> float:
        return float(np.mean(self.column("vx")))

    def summary(self) -> dict:
        ms = self.column("cycle_ms")
        return {
            "completed": self.completed,
            "laps_requested": self.laps,
            "lap_times": self.lap_times,
            "cycles": len(self.rows),
            "track_length": self.track_length,
            "distance": float(self.column("s")[-1] - self.column("s")[0]) if self.rows else 0.0,
            "max_abs_d": self.max_abs_d,
            "mean_forward_speed": self.mean_speed,
            "max_forward_speed": float(np.max(self.column("vx"))),
            "target_speed": self.target_speed,
            "over_budget_fraction": float(np.mean(ms > 50.0)),
        }

    def write_csv(self, path, timing: bool = True) -> None:
        """Telemetry CSV; ``timing=False`` blanks the wall-clock column for reproducible hashes."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TELEMETRY_HEADER)
            for r in self.rows:
                out = [int(r[0]), *(repr(float(v)) for v in r[1:12]), int(r[12]), repr(float(r[13]))]
                out.append(repr(float(r[14])) if timing else "")
                w.writerow(out)


def run_closed_loop(
    track: Track,
    config: MpcConfig,
    model,
    plant: SimParams,
    laps: int = 1,
    x0=None,
    v0=(0.0, 0.0, 0.0),
) -> LapTelemetry:
    """Lockstep simulation of plant and controller until ``laps`` laps or ``config.max_cycles``."""
    if laps < 1:
        raise ValueError("laps must be >= 1")
    h = config.h
    plant.inner_steps(h)
    pose = track.start_pose if x0 is None else np.asarray(x0, dtype=float)
    vel = np.asarray(v0, dtype=float)
    ctrl = Controller(track, config, model)
    s_start, _ = progress(track, pose)
    s_meas = s_start
    goal = s_start + laps * track.total_length
    rows: list[list[float]] = []
    lap_times: list[float] = []
    first_grad = None
    completed = False
    for cycle in range(config.max_cycles):
        t = cycle * h
        s_meas, d_meas = progress(track, pose, s_meas)
        while len(lap_times) < laps and s_meas >= s_start + (len(lap_times) + 1) * track.total_length:
            lap_times.append(t)
        if s_meas >= goal:
            completed = True
            break
        ctrl.s_prev = s_meas
        t0 = time.perf_counter()
        u_next, info = mpc_step(ctrl, pose, vel)
        elapsed_ms = 1e3 * (time.perf_counter() - t0)
        if first_grad is None:
            first_grad = info.first_gradient
        applied = ctrl.pending
        rows.append([cycle, t, *pose, *vel, *applied, s_meas, d_meas, info.iterations, info.cost, elapsed_ms])
        vel, _ = advance_velocity(vel, applied, plant, h)
        pose = integrate_pose(pose, vel, h)
        ctrl.pending = u_next
    return LapTelemetry(rows, lap_times, completed, first_grad, laps, track.total_length, config.target_speed)
