"""Preprocessing: raw pose/control logs -> local-frame (v_i, u_i, v_{i+1}) pairs.

Pipeline: unwrap heading, Savitzky-Golay smooth x/y/heading, central finite
differences (one-sided at the ends), rotate each velocity into its own
frame. Controls are commands, not measurements, and are left unsmoothed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import savgol_filter

from learndrift.angles import to_global_frame, to_local_frame, wrap_angle, wrap_angle_diff
from learndrift.car_sim import BodyVelocity, ControlInput, PoseLog, read_log_csv, write_log_csv

__all__ = [
    "PoseLog",
    "SmoothingConfig",
    "TrainingPair",
    "Pairs",
    "ValidationTrajectory",
    "SplitDataset",
    "savgol_smooth",
    "wrap_angle_diff",
    "smooth_poses",
    "finite_diff_velocities",
    "to_local_frame",
    "to_global_frame",
    "local_velocities",
    "build_pairs",
    "split_and_save",
    "load_split",
    "read_pairs_jsonl",
    "write_pairs_jsonl",
]


def savgol_smooth(series, window: int, poly_order: int) -> np.ndarray:
    """Least-squares polynomial smoothing over a centered odd window.

    Edge samples take the value of the polynomial fitted to the nearest full
    window, evaluated at their own offset.
    """
    y = np.asarray(series, dtype=float)
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if window > len(y):
        raise ValueError(f"window {window} exceeds series length {len(y)}")
    if not 0 <= poly_order < window:
        raise ValueError(f"poly_order must satisfy 0 <= poly_order < window, got {poly_order}")
    return savgol_filter(y, window, poly_order, mode="interp")


@dataclass(frozen=True)
class SmoothingConfig:
    window: int = 9
    poly_order: int = 2

    def fitted(self, n: int) -> tuple[int, int]:
        """Shrink the window to fit a short series (largest odd length <= n)."""
        w = min(self.window, n if n % 2 else n - 1)
        return w, min(self.poly_order, w - 1)


def smooth_poses(poses, smoothing: SmoothingConfig | None = SmoothingConfig()) -> np.ndarray:
    """Smooth x, y and the unwrapped heading; the returned heading is rewrapped."""
    poses = np.asarray(poses, dtype=float)
    if smoothing is None:
        return poses.copy()
    w, k = smoothing.fitted(len(poses))
    out = np.empty_like(poses)
    out[:, 0] = savgol_smooth(poses[:, 0], w, k)
    out[:, 1] = savgol_smooth(poses[:, 1], w, k)
    out[:, 2] = wrap_angle(savgol_smooth(np.unwrap(poses[:, 2]), w, k))
    return out


def finite_diff_velocities(log: PoseLog, smoothing: SmoothingConfig | None = SmoothingConfig()) -> np.ndarray:
    """World-frame velocities ``(xdot, ydot, heading_rate)``, one per pose."""
    p = smooth_poses(log.poses, smoothing)
    h = log.h
    out = np.empty_like(p)
    xy = p[:, :2]
    out[1:-1, :2] = (xy[2:] - xy[:-2]) / (2 * h)
    out[0, :2] = (xy[1] - xy[0]) / h
    out[-1, :2] = (xy[-1] - xy[-2]) / h
    th = p[:, 2]
    out[1:-1, 2] = wrap_angle_diff(th[2:], th[:-2]) / (2 * h)
    out[0, 2] = wrap_angle_diff(th[1], th[0]) / h
    out[-1, 2] = wrap_angle_diff(th[-1], th[-2]) / h
    return out


def local_velocities(log: PoseLog, smoothing: SmoothingConfig | None = SmoothingConfig()) -> np.ndarray:
    """Body-frame velocities, each rotated by its own (smoothed) heading."""
    heading = smooth_poses(log.poses, smoothing)[:, 2]
    return to_local_frame(heading, finite_diff_velocities(log, smoothing))


@dataclass(frozen=True)
class TrainingPair:
    v_in: BodyVelocity
    u_in: ControlInput
    v_out: BodyVelocity


@dataclass
class Pairs:
    """Column store of training pairs; ``index`` is the source frame of ``v_in``."""

    v_in: np.ndarray
    u: np.ndarray
    v_out: np.ndarray
    index: np.ndarray | None = None

    def __post_init__(self):
        self.v_in = np.asarray(self.v_in, dtype=float).reshape(-1, 3)
        self.u = np.asarray(self.u, dtype=float).reshape(-1, 2)
        self.v_out = np.asarray(self.v_out, dtype=float).reshape(-1, 3)
        if self.index is None:
            self.index = np.arange(len(self.v_in))
        self.index = np.asarray(self.index, dtype=int)
        if not len(self.v_in) == len(self.u) == len(self.v_out) == len(self.index):
            raise ValueError("pair columns must have equal length")
        if not (np.isfinite(self.v_in).all() and np.isfinite(self.u).all() and np.isfinite(self.v_out).all()):
            raise ValueError("training pairs must be finite")

    def __len__(self) -> int:
        return len(self.v_in)

    def __getitem__(self, i: int) -> TrainingPair:
        return TrainingPair(BodyVelocity(*self.v_in[i]), ControlInput(*self.u[i]), BodyVelocity(*self.v_out[i]))

    def take(self, idx) -> "Pairs":
        return Pairs(self.v_in[idx], self.u[idx], self.v_out[idx], self.index[idx])

    @property
    def inputs(self) -> np.ndarray:
        return np.hstack([self.v_in, self.u])

    @classmethod
    def concat(cls, parts: Sequence["Pairs"]) -> "Pairs":
        return cls(
            np.vstack([p.v_in for p in parts]),
            np.vstack([p.u for p in parts]),
            np.vstack([p.v_out for p in parts]),
            np.concatenate([p.index for p in parts]),
        )


VELOCITY_SOURCES = ("poses", "recorded")


def build_pairs(log: PoseLog, smoothing: SmoothingConfig | None = SmoothingConfig(), source: str = "poses") -> Pairs:
    """Emit ``(v_i, u_i, v_{i+1})`` for ``i = 0 .. N-3`` of an N-frame log.

    ``source="poses"`` differentiates the smoothed poses. ``source="recorded"``
    takes the velocities a simulator log carries instead. The simulator's
    velocity is the one held over the step that ends at frame ``i``, while a
    central difference at frame ``i`` averages that step with the next, whose
    velocity already depends on ``u_i``.
    """
    if source == "poses":
        v = local_velocities(log, smoothing)
    elif source == "recorded":
        if log.velocities is None:
            raise ValueError("log has no recorded velocities")
        v = log.velocities
    else:
        raise ValueError(f"velocity source must be one of {VELOCITY_SOURCES}, got {source!r}")
    n = len(log) - 2
    return Pairs(v[:n], log.controls[:n], v[1 : n + 1], np.arange(n))


# --- persistence ---------------------------------------------------------------


def write_pairs_jsonl(pairs: Pairs, path) -> None:
    with open(path, "w") as fh:
        for a, u, b in zip(pairs.v_in, pairs.u, pairs.v_out):
            fh.write(json.dumps({"v_in": a.tolist(), "u": u.tolist(), "v_out": b.tolist()}) + "\n")


def read_pairs_jsonl(path) -> Pairs:
    v_in, u, v_out = [], [], []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                v_in.append(rec["v_in"])
                u.append(rec["u"])
                v_out.append(rec["v_out"])
    return Pairs(np.array(v_in).reshape(-1, 3), np.array(u).reshape(-1, 2), np.array(v_out).reshape(-1, 3))


@dataclass
class ValidationTrajectory:
    """Recorded open-loop segment: ``n`` controls, ``n + 1`` poses, initial body velocity."""

    poses: np.ndarray
    controls: np.ndarray
    v0: np.ndarray
    h: float

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        self.controls = np.asarray(self.controls, dtype=float).reshape(-1, 2)
        self.v0 = np.asarray(self.v0, dtype=float).reshape(3)
        if len(self.controls) != len(self.poses) - 1:
            raise ValueError("a validation trajectory needs len(controls) == len(poses) - 1")

    @property
    def x0(self) -> np.ndarray:
        return self.poses[0]

    @property
    def final_pose(self) -> np.ndarray:
        return self.poses[-1]

    @property
    def n(self) -> int:
        return len(self.controls)

    def to_log(self) -> PoseLog:
        return PoseLog(np.arange(len(self.poses)) * self.h, self.poses, self.controls)


@dataclass
class SplitDataset:
    train: Pairs
    test: Pairs
    validation: list[ValidationTrajectory]
    h: float
    seed: int
    manifest: dict = field(default_factory=dict)


def carve_validation(
    logs: Sequence[PoseLog],
    count: int,
    steps: int,
    seed: int,
    smoothing: SmoothingConfig | None = SmoothingConfig(),
) -> list[ValidationTrajectory]:
    """Cut ``count`` segments of ``steps`` steps out of held-out logs.

    Consecutive slots share their boundary frame, so ``count * steps * h``
    seconds of recording is exactly enough. The initial velocity comes from
    the log's ground truth when it has one, else from finite differences.
    """
    slots = []
    for li, log in enumerate(logs):
        for k in range((len(log) - 1) // steps):
            slots.append((li, k * steps))
    if len(slots) < count:
        needed = count * steps * (logs[0].h if logs else float("nan"))
        have = sum((len(l) - 1) * l.h for l in logs)
        raise ValueError(f"insufficient held-out data for {count} validation trajectories: need {needed:.1f} s, have {have:.1f} s")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(slots), size=count, replace=False).tolist())
    vels = [log.velocities if log.velocities is not None else local_velocities(log, smoothing) for log in logs]
    out = []
    for j in chosen:
        li, start = slots[j]
        log = logs[li]
        out.append(
            ValidationTrajectory(
                log.poses[start : start + steps + 1],
                log.controls[start : start + steps],
                vels[li][start],
                log.h,
            )
        )
    return out


def split_and_save(
    pairs: Pairs,
    logs: Sequence[PoseLog],
    ratios: tuple[float, float],
    seed: int,
    path,
    *,
    h: float,
    val_count: int = 40,
    val_steps: int = 60,
    smoothing: SmoothingConfig | None = SmoothingConfig(),
) -> SplitDataset:
    """Time-block train/test split plus validation carving, persisted under ``path``.

    The test block is one contiguous run of pairs placed by ``seed``; train
    pairs within a guard band of the block are discarded so no train and test
    pair share a source frame (smoothing spreads each frame over the window).
    """
    train_ratio, test_ratio = ratios
    if train_ratio <= 0 or test_ratio <= 0 or train_ratio + test_ratio > 1 + 1e-12:
        raise ValueError("ratios must be positive and sum to at most 1")
    validation = carve_validation(logs, val_count, val_steps, seed, smoothing)

    n = len(pairs)
    window = smoothing.window if smoothing else 1
    guard = window + 3
    n_test = int(round(test_ratio * n))
    n_train_wanted = int(round(train_ratio * n))
    if n_test < 1 or n - n_test - 2 * guard < 1:
        raise ValueError("not enough pairs for the requested split")
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, n - n_test + 1))
    test_idx = np.arange(start, start + n_test)
    keep = np.ones(n, dtype=bool)
    keep[max(0, start - guard) : start + n_test + guard] = False
    train_idx = np.flatnonzero(keep)[:n_train_wanted]
    train, test = pairs.take(train_idx), pairs.take(test_idx)

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    write_pairs_jsonl(train, root / "train.jsonl")
    write_pairs_jsonl(test, root / "test.jsonl")
    val_files = []
    (root / "validation").mkdir(exist_ok=True)
    for j, vt in enumerate(validation):
        name = f"validation/val_{j:03d}.csv"
        write_log_csv(vt.to_log(), root / name)
        val_files.append({"file": name, "v0": vt.v0.tolist()})
    manifest = {
        "h": h,
        "seed": seed,
        "ratios": list(ratios),
        "smoothing": None if smoothing is None else {"window": smoothing.window, "poly_order": smoothing.poly_order},
        "train": {"file": "train.jsonl", "count": len(train)},
        "test": {"file": "test.jsonl", "count": len(test)},
        "validation_trajectories": val_files,
        "validation_steps": val_steps,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return SplitDataset(train, test, validation, h, seed, manifest)


def load_split(path) -> SplitDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    for key in ("h", "train", "test"):
        if key not in manifest:
            raise KeyError(f"dataset manifest is missing field '{key}'")
    train = read_pairs_jsonl(root / manifest["train"]["file"])
    test = read_pairs_jsonl(root / manifest["test"]["file"])
    validation = []
    for entry in manifest.get("validation_trajectories", []):
        log = read_log_csv(root / entry["file"])
        validation.append(ValidationTrajectory(log.poses, log.controls[:-1], entry["v0"], manifest["h"]))
    return SplitDataset(train, test, validation, float(manifest["h"]), int(manifest.get("seed", 0)), manifest)
