"""Drift-capable planar RC car simulator.

The car is a bicycle: one steered front wheel and one driven rear wheel on
the centerline, each carrying half of a unit mass at +/- wheelbase/2 from the
body reference point (which gives the yaw inertia (wheelbase/2)**2). Every
inner step each wheel requests the acceleration that would cancel its
sideways slip within one step; requests above the static friction limit are
rescaled to the lower dynamic limit, which is what lets the car drift.

Velocity is integrated with ``dt_sim`` sub-steps. The pose is advanced once
per outer step ``h`` from the updated body velocity rotated by the current
heading, the same update the learned-model rollout uses.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple, Sequence

import numpy as np

from learndrift.angles import wrap_angle

ARENA_SIZE = (5.0, 10.0)


@dataclass(frozen=True)
class SimParams:
    wheelbase: float = 0.25
    drive_gain: float = 8.0
    steer_gain: float = 0.35
    static_accel_limit: float = 6.0
    dynamic_accel_limit: float = 3.5
    drag_coeff: float = 0.2
    dt_sim: float = 1.0 / 240.0

    def __post_init__(self):
        if not self.wheelbase > 0:
            raise ValueError("wheelbase must be positive")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive")
        if not 0 < self.dynamic_accel_limit < self.static_accel_limit:
            raise ValueError("need 0 < dynamic_accel_limit < static_accel_limit")
        if not 0 < self.steer_gain < math.pi / 2:
            raise ValueError("steer_gain must lie in (0, pi/2)")
        if self.drag_coeff < 0:
            raise ValueError("drag_coeff must be nonnegative")

    @classmethod
    def from_dict(cls, data: dict) -> "SimParams":
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in data]
        if missing:
            raise ValueError(f"sim params missing fields: {', '.join(missing)}")
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ValueError(f"unknown sim params fields: {', '.join(unknown)}")
        return cls(**{n: float(data[n]) for n in names})

    @classmethod
    def from_json(cls, path) -> "SimParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def inner_steps(self, h: float) -> int:
        """Number of ``dt_sim`` sub-steps in an outer step ``h``; rejects non-multiples."""
        if not h > 0:
            raise ValueError(f"step h must be positive, got {h}")
        k = round(h / self.dt_sim)
        if k < 1 or abs(k * self.dt_sim - h) > 1e-9 * h:
            raise ValueError(f"h={h} is not an integer multiple of dt_sim={self.dt_sim}")
        return k


@dataclass(frozen=True)
class CarPose:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])


@dataclass(frozen=True)
class BodyVelocity:
    v_x: float
    v_y: float
    omega: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.v_x, self.v_y, self.omega)):
            raise ValueError("body velocity components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.v_x, self.v_y, self.omega])


@dataclass(frozen=True)
class ControlInput:
    throttle: float
    steer: float

    def __post_init__(self):
        object.__setattr__(self, "throttle", min(1.0, max(-1.0, float(self.throttle))))
        object.__setattr__(self, "steer", min(1.0, max(-1.0, float(self.steer))))

    def as_array(self) -> np.ndarray:
        return np.array([self.throttle, self.steer])


@dataclass(frozen=True)
class SimState:
    pose: CarPose
    vel: BodyVelocity

    @classmethod
    def from_arrays(cls, pose, vel) -> "SimState":
        return cls(CarPose(*map(float, pose)), BodyVelocity(*map(float, vel)))

    @classmethod
    def at_rest(cls, x: float = 0.0, y: float = 0.0, heading: float = 0.0) -> "SimState":
        return cls(CarPose(x, y, heading), BodyVelocity(0.0, 0.0, 0.0))


class WheelAccel(NamedTuple):
    """Per-wheel accelerations in m/s^2 (scalars or equally shaped arrays)."""

    front_lat: float
    rear_lat: float
    rear_long: float


def _wheel_targets(vx, vy, om, throttle, steer, p: SimParams) -> WheelAccel:
    half = 0.5 * p.wheelbase
    delta = steer * p.steer_gain
    # front wheel velocity component across its rolling direction
    slip_f = -vx * np.sin(delta) + (vy + om * half) * np.cos(delta)
    slip_r = vy - om * half
    return WheelAccel(-slip_f / p.dt_sim, -slip_r / p.dt_sim, throttle * p.drive_gain)


def _cap(norm, p: SimParams):
    slip = norm > p.static_accel_limit
    scale = np.where(slip, p.dynamic_accel_limit / np.where(slip, norm, 1.0), 1.0)
    return scale, slip


def _apply_friction(req: WheelAccel, p: SimParams):
    scale_f, slip_f = _cap(np.abs(req.front_lat), p)
    scale_r, slip_r = _cap(np.hypot(req.rear_long, req.rear_lat), p)
    realized = WheelAccel(req.front_lat * scale_f, req.rear_lat * scale_r, req.rear_long * scale_r)
    return realized, slip_f, slip_r


def wheel_targets(state: SimState, control: ControlInput, params: SimParams) -> WheelAccel:
    """Accelerations each wheel would need to roll without slip (plus the drive request)."""
    v = state.vel
    req = _wheel_targets(v.v_x, v.v_y, v.omega, control.throttle, control.steer, params)
    return WheelAccel(*(float(a) for a in req))


def apply_friction(requested: WheelAccel, params: SimParams) -> tuple[WheelAccel, bool, bool]:
    """Cap each wheel's acceleration vector by the friction limits.

    A wheel whose requested norm exceeds ``static_accel_limit`` loses traction
    and gets its request rescaled to norm ``dynamic_accel_limit``. The boundary
    itself still grips.

    Returns:
        Realized accelerations, front slip flag, rear slip flag.
    """
    realized, sf, sr = _apply_friction(requested, params)
    return WheelAccel(*(float(a) for a in realized)), bool(sf), bool(sr)


def _inner_step(vx, vy, om, throttle, steer, p: SimParams):
    req = _wheel_targets(vx, vy, om, throttle, steer, p)
    acc, slip_f, slip_r = _apply_friction(req, p)
    delta = steer * p.steer_gain
    sin_d, cos_d = np.sin(delta), np.cos(delta)
    # each wheel pushes on half of the unit mass
    ax = 0.5 * (acc.rear_long - acc.front_lat * sin_d) - p.drag_coeff * vx
    ay = 0.5 * (acc.rear_lat + acc.front_lat * cos_d) - p.drag_coeff * vy
    alpha = (acc.front_lat * cos_d - acc.rear_lat) / p.wheelbase - p.drag_coeff * om
    dt = p.dt_sim
    vx1 = vx + dt * ax
    vy1 = vy + dt * ay
    om1 = om + dt * alpha
    # the body frame turns by om1*dt during the step; re-express velocity in it
    rot = om1 * dt
    c, s = np.cos(rot), np.sin(rot)
    return c * vx1 + s * vy1, -s * vx1 + c * vy1, om1, acc, slip_f, slip_r


def advance_velocity(vel, control, params: SimParams, h: float):
    """Advance body velocities over one outer step ``h``.

    Args:
        vel: ``(..., 3)`` body velocities.
        control: ``(..., 2)`` controls; clipped to [-1, 1].
        params: Simulator parameters.
        h: Outer step, an integer multiple of ``params.dt_sim``.

    Returns:
        ``(vel_next, slip)`` where ``slip`` is a ``(..., 2)`` boolean array
        flagging front/rear loss of traction at any sub-step.
    """
    k = params.inner_steps(h)
    vel = np.asarray(vel, dtype=float)
    u = np.clip(np.asarray(control, dtype=float), -1.0, 1.0)
    vx, vy, om = vel[..., 0], vel[..., 1], vel[..., 2]
    thr, st = u[..., 0], u[..., 1]
    any_f = np.zeros(np.shape(vx), dtype=bool)
    any_r = np.zeros(np.shape(vx), dtype=bool)
    for _ in range(k):
        vx, vy, om, _, sf, sr = _inner_step(vx, vy, om, thr, st, params)
        any_f |= sf
        any_r |= sr
    return np.stack([vx, vy, om], axis=-1), np.stack([any_f, any_r], axis=-1)


def integrate_pose(pose, vel_next, h: float):
    """Pose update ``x_{i+1} = x_i + h * R(heading_i) * v_{i+1}`` with heading rewrapped."""
    pose = np.asarray(pose, dtype=float)
    v = np.asarray(vel_next, dtype=float)
    th = pose[..., 2]
    c, s = np.cos(th), np.sin(th)
    x = pose[..., 0] + h * (c * v[..., 0] - s * v[..., 1])
    y = pose[..., 1] + h * (s * v[..., 0] + c * v[..., 1])
    return np.stack([x, y, wrap_angle(th + h * v[..., 2])], axis=-1)


def step(state: SimState, control: ControlInput, params: SimParams, h: float) -> SimState:
    vel, _ = advance_velocity(state.vel.as_array(), control.as_array(), params, h)
    pose = integrate_pose(state.pose.as_array(), vel, h)
    return SimState.from_arrays(pose, vel)


def rollout_arrays(pose0, vel0, controls, params: SimParams, h: float):
    """Array-level rollout.

    Returns:
        ``poses (n+1, 3)``, ``vels (n+1, 3)``, ``slip (n, 2)``.
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    n = len(controls)
    poses = np.empty((n + 1, 3))
    vels = np.empty((n + 1, 3))
    slip = np.zeros((n, 2), dtype=bool)
    poses[0] = np.asarray(pose0, dtype=float)
    poses[0, 2] = wrap_angle(poses[0, 2])
    vels[0] = np.asarray(vel0, dtype=float)
    for i in range(n):
        vels[i + 1], slip[i] = advance_velocity(vels[i], controls[i], params, h)
        poses[i + 1] = integrate_pose(poses[i], vels[i + 1], h)
    return poses, vels, slip


def rollout_sim(x0: SimState, controls: Sequence[ControlInput], params: SimParams, h: float) -> list[SimState]:
    if len(controls) == 0:
        raise ValueError("controls must be nonempty")
    out = [x0]
    for u in controls:
        out.append(step(out[-1], u, params, h))
    return out


# --- data collection ---------------------------------------------------------


@dataclass
class PoseLog:
    """Uniformly sampled pose/control recording.

    ``controls[i]`` is the command held during ``[t_i, t_{i+1})``; ``slip[i]``
    flags loss of traction during the interval that ends at ``t_i``.
    ``velocities`` holds ground-truth body velocities when the log comes from
    the simulator; recorded logs leave it empty.
    """

    timestamps: np.ndarray
    poses: np.ndarray
    controls: np.ndarray
    slip: np.ndarray | None = None
    velocities: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, 2)
        if self.slip is None:
            self.slip = np.zeros((len(self.poses), 2), dtype=bool)
        self.slip = np.asarray(self.slip, dtype=bool).reshape(-1, 2)
        n = len(self.poses)
        if n < 3:
            raise ValueError("a pose log needs at least 3 poses")
        if len(self.timestamps) != n or len(self.slip) != n:
            raise ValueError("timestamps, poses and slip flags must have equal length")
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=float).reshape(-1, 3)
            if len(self.velocities) != n:
                raise ValueError("velocities must match poses in length")
        if len(self.controls) not in (n, n - 1):
            raise ValueError("controls must have length len(poses) or len(poses) - 1")
        dt = np.diff(self.timestamps)
        if np.any(dt <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.max(np.abs(dt - dt[0])) > 1e-6 * dt[0]:
            raise ValueError("timestamps must be uniformly spaced")

    @property
    def h(self) -> float:
        return float((self.timestamps[-1] - self.timestamps[0]) / (len(self.timestamps) - 1))

    def __len__(self) -> int:
        return len(self.poses)

    def segment(self, start: int, stop: int) -> "PoseLog":
        ctrl_stop = min(stop, len(self.controls))
        return PoseLog(
            self.timestamps[start:stop] - self.timestamps[start],
            self.poses[start:stop],
            self.controls[start:ctrl_stop],
            self.slip[start:stop],
            None if self.velocities is None else self.velocities[start:stop],
        )


LOG_HEADER = ["t", "x", "y", "heading", "throttle", "steer", "slip_front", "slip_rear"]
VELOCITY_COLUMNS = ["vx", "vy", "omega"]


def write_log_csv(log: PoseLog, path) -> None:
    controls = log.controls
    if len(controls) == len(log) - 1:
        controls = np.vstack([controls, np.zeros((1, 2))])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        has_vel = log.velocities is not None
        w.writerow(LOG_HEADER + (VELOCITY_COLUMNS if has_vel else []))
        for k, (t, p, u, s) in enumerate(zip(log.timestamps, log.poses, controls, log.slip)):
            row = [repr(float(t)), *(repr(float(a)) for a in p), *(repr(float(a)) for a in u), int(s[0]), int(s[1])]
            if has_vel:
                row += [repr(float(a)) for a in log.velocities[k]]
            w.writerow(row)


def read_log_csv(path) -> PoseLog:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty log")
    col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
    return PoseLog(
        col("t"),
        np.column_stack([col("x"), col("y"), col("heading")]),
        np.column_stack([col("throttle"), col("steer")]),
        np.column_stack([col("slip_front"), col("slip_rear")]).astype(bool),
        np.column_stack([col(k) for k in VELOCITY_COLUMNS]) if "vx" in rows[0] else None,
    )


@dataclass(frozen=True)
class ExcitationConfig:
    """Smoothed random-walk driver; rates in 1/s, sigmas in units per sqrt(s)."""

    speed_mean: float = 2.0
    speed_sigma: float = 1.6
    speed_reversion: float = 0.4
    speed_range: tuple[float, float] = (-1.0, 4.5)
    speed_gain: float = 0.6
    throttle_sigma: float = 0.8
    throttle_reversion: float = 3.0
    steer_sigma: float = 2.0
    steer_reversion: float = 1.5
    kick_rate: float = 0.12
    kick_duration: tuple[float, float] = (0.4, 1.2)
    arena: tuple[float, float] = ARENA_SIZE
    pose_noise: tuple[float, float, float] = (0.0, 0.0, 0.0)


def collect_dataset(
    params: SimParams,
    duration: float,
    h: float,
    seed: int,
    excitation: ExcitationConfig | None = None,
) -> PoseLog:
    """Drive the simulated car with a seeded excitation policy and log it at 1/h Hz.

    The policy is an Ornstein-Uhlenbeck walk on a target speed and on the
    steering, plus occasional full-throttle/full-lock "kicks" that provoke
    drifts. When the car leaves the arena (centered on the origin) it steers
    back towards the center.
    """
    if not duration > 0:
        raise ValueError("duration must be positive")
    cfg = excitation or ExcitationConfig()
    params.inner_steps(h)
    n = int(round(duration / h))
    rng = np.random.default_rng(seed)
    half_w, half_l = cfg.arena[0] / 2, cfg.arena[1] / 2

    poses = np.zeros((n + 1, 3))
    controls = np.zeros((n + 1, 2))
    slip = np.zeros((n + 1, 2), dtype=bool)
    vels = np.zeros((n + 1, 3))
    vel = vels[0]
    speed_target = 0.0
    thr_noise = 0.0
    steer_ou = 0.0
    kick_left = 0.0
    kick_dir = 1.0
    sq = math.sqrt(h)
    for k in range(n + 1):
        pose = poses[k]
        # policy
        speed_target += cfg.speed_reversion * (cfg.speed_mean - speed_target) * h + cfg.speed_sigma * sq * rng.standard_normal()
        speed_target = min(max(speed_target, cfg.speed_range[0]), cfg.speed_range[1])
        thr_noise += -cfg.throttle_reversion * thr_noise * h + cfg.throttle_sigma * sq * rng.standard_normal()
        steer_ou += -cfg.steer_reversion * steer_ou * h + cfg.steer_sigma * sq * rng.standard_normal()
        if kick_left <= 0 and rng.random() < cfg.kick_rate * h:
            kick_left = rng.uniform(*cfg.kick_duration)
            kick_dir = 1.0 if rng.random() < 0.5 else -1.0
        throttle = cfg.speed_gain * (speed_target - vel[0]) + thr_noise
        steer = steer_ou
        if kick_left > 0:
            kick_left -= h
            throttle, steer = 1.0, kick_dir
        if abs(pose[0]) > half_w or abs(pose[1]) > half_l:
            bearing = math.atan2(-pose[1], -pose[0]) - pose[2]
            bearing = float(wrap_angle(bearing))
            steer = math.copysign(1.0, bearing) * (1.0 if vel[0] >= 0 else -1.0)
            throttle = min(throttle, 0.6 * (1.5 - vel[0]))
        controls[k] = (min(1.0, max(-1.0, throttle)), min(1.0, max(-1.0, steer)))
        if k == n:
            break
        vel, slip[k + 1] = advance_velocity(vel, controls[k], params, h)
        vels[k + 1] = vel
        poses[k + 1] = integrate_pose(pose, vel, h)

    if any(cfg.pose_noise):
        poses = poses + rng.standard_normal(poses.shape) * np.asarray(cfg.pose_noise)
        poses[:, 2] = wrap_angle(poses[:, 2])
    return PoseLog(np.arange(n + 1) * h, poses, controls, slip, vels)
