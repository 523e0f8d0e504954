"""Model selection: trajectory validation error, loss and architecture sweeps, smoothness traces."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from learndrift.angles import wrap_angle_diff
from learndrift.dataset import SplitDataset, ValidationTrajectory
from learndrift.mlp import Activation, LossKind, MlpSpec, TrainConfig, batch_loss, train
from learndrift.trajopt import Scenario, optimize, rollout_model


def pose_l1_error(predicted, recorded) -> np.ndarray:
    """``|dx| + |dy| + |dheading|`` per row, heading difference wrapped."""
    p = np.asarray(predicted, dtype=float)
    r = np.asarray(recorded, dtype=float)
    return np.abs(p[..., 0] - r[..., 0]) + np.abs(p[..., 1] - r[..., 1]) + np.abs(wrap_angle_diff(p[..., 2], r[..., 2]))


@dataclass
class TveReport:
    errors: np.ndarray
    model_id: str = "model"

    def __post_init__(self):
        self.errors = np.asarray(self.errors, dtype=float).reshape(-1)
        if np.any(self.errors < 0):
            raise ValueError("final-pose errors must be nonnegative")

    @property
    def tve(self) -> float:
        return float(np.mean(self.errors))

    @property
    def count(self) -> int:
        return len(self.errors)

    def to_dict(self) -> dict:
        return {"model": self.model_id, "tve": self.tve, "count": self.count, "errors": self.errors.tolist()}


def tve(model, trajectories: Sequence[ValidationTrajectory], model_id: str = "model") -> TveReport:
    """Mean L1 final-pose error of open-loop replays of the recorded controls.

    Trajectories of equal length and step are rolled out as one batch.
    """
    if len(trajectories) == 0:
        raise ValueError("validation set is empty")
    errors = np.empty(len(trajectories))
    groups: dict[tuple[int, float], list[int]] = {}
    for j, t in enumerate(trajectories):
        groups.setdefault((t.n, t.h), []).append(j)
    for (_, h), idx in groups.items():
        x0 = np.stack([trajectories[j].x0 for j in idx])
        v0 = np.stack([trajectories[j].v0 for j in idx])
        u = np.stack([trajectories[j].controls for j in idx])
        poses, _ = rollout_model(model, h, x0, v0, u)
        final = np.stack([trajectories[j].final_pose for j in idx])
        errors[idx] = pose_l1_error(poses[:, -1], final)
    return TveReport(errors, model_id)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(jobs) as pool:
        return list(pool.map(fn, items))


# --- loss comparison ---------------------------------------------------------


@dataclass
class LossComparison:
    seeds: list[int]
    tve: dict[str, list[float]]
    test_loss: dict[str, list[float]]

    def summary(self) -> dict[str, dict[str, float]]:
        return {k: {"mean": float(np.mean(v)), "std": float(np.std(v, ddof=1))} for k, v in self.tve.items()}

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "tve": self.tve, "test_loss": self.test_loss, "summary": self.summary()}

    def write(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "loss_comparison.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(root / "loss_comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["loss", "seed", "tve", "test_loss"])
            for kind, vals in self.tve.items():
                for s, v, tl in zip(self.seeds, vals, self.test_loss[kind]):
                    w.writerow([kind, s, repr(v), repr(tl)])


def compare_losses(
    spec: MlpSpec,
    dataset: SplitDataset,
    repeats: int,
    seed: int,
    config: TrainConfig = TrainConfig(),
    jobs: int = 1,
) -> LossComparison:
    """Train ``repeats`` seeded networks per loss kind on identical data.

    Repeat ``r`` uses seed ``seed + r`` for both initialization and batching,
    the same for every loss kind. Test losses are each run's own loss on the test split.
    """
    if repeats < 2:
        raise ValueError("repeats must be >= 2")
    seeds = [seed + r for r in range(repeats)]
    jobs_list = [(kind, s) for kind in LossKind for s in seeds]

    def run(job):
        kind, s = job
        cfg = replace(config, loss=kind, seed=s)
        model, hist = train(replace(spec, seed=s), (dataset.train, dataset.test), cfg)
        return tve(model, dataset.validation).tve, hist.test_loss[-1] if hist.test_loss else float("nan")

    results = _map(run, jobs_list, jobs)
    out_tve = {k.value: [] for k in LossKind}
    out_test = {k.value: [] for k in LossKind}
    for (kind, _), (t, tl) in zip(jobs_list, results):
        out_tve[kind.value].append(t)
        out_test[kind.value].append(tl)
    return LossComparison(seeds, out_tve, out_test)


# --- grid search -------------------------------------------------------------


@dataclass
class GridRow:
    layers: int
    width: int
    activation: str
    loss: str
    test_loss: float
    tve: float
    n_params: int
    wall_time: float


@dataclass
class GridSearchReport:
    rows: list[GridRow]
    rejected: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "rejected": self.rejected}

    def write(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "grid_search.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(root / "grid_search.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(GridRow.__dataclass_fields__))
            for r in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def grid_search(
    layer_counts: Sequence[int],
    widths: Sequence[int],
    activations: Sequence[Activation | str],
    dataset: SplitDataset,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> GridSearchReport:
    """One seeded training per (layers, width, activation); rows sorted by TVE.

    Configurations the network spec rejects are listed under ``rejected``.
    """
    if not (layer_counts and widths and activations):
        raise ValueError("every grid axis needs at least one value")
    specs, rejected = [], []
    for layers in layer_counts:
        for width in widths:
            for act in activations:
                try:
                    specs.append(MlpSpec.hidden(layers, width, Activation(act), seed))
                except ValueError as e:
                    rejected.append({"layers": layers, "width": width, "activation": Activation(act).value, "error": str(e)})
    cfg = replace(config, seed=seed)

    def run(spec: MlpSpec) -> GridRow:
        t0 = time.perf_counter()
        model, hist = train(spec, (dataset.train, dataset.test), cfg)
        elapsed = time.perf_counter() - t0
        test = batch_loss(spec, model.weights, model.normalizer, dataset.test.inputs, dataset.test.v_out, cfg.loss, cfg.epsilon)
        hidden = spec.layer_sizes[1:-1]
        return GridRow(len(hidden), hidden[0], spec.activation.value, cfg.loss.value, test, tve(model, dataset.validation).tve, spec.n_params, elapsed)

    rows = _map(run, specs, jobs)
    rows.sort(key=lambda r: (r.tve, r.layers, r.width, r.activation))
    return GridSearchReport(rows, rejected)


# --- smoothness --------------------------------------------------------------


def fluctuation(seq) -> float:
    """Mean norm of the second difference ``u_{i+1} - 2 u_i + u_{i-1}``."""
    seq = np.asarray(seq, dtype=float)
    if len(seq) < 3:
        raise ValueError("need at least 3 entries for a second difference")
    return float(np.mean(np.linalg.norm(seq[2:] - 2 * seq[1:-1] + seq[:-2], axis=-1)))


@dataclass
class SmoothnessTrace:
    label: str
    first_gradient: np.ndarray
    controls: np.ndarray
    gradient_fluctuation: float
    control_fluctuation: float
    final_cost: float


@dataclass
class SmoothnessReport:
    scenario: str
    traces: list[SmoothnessTrace]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "models": {
                t.label: {
                    "gradient_fluctuation": t.gradient_fluctuation,
                    "control_fluctuation": t.control_fluctuation,
                    "final_cost": t.final_cost,
                    "trace_file": f"smoothness_{t.label}.csv",
                }
                for t in self.traces
            },
        }

    def write(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "smoothness.json").write_text(json.dumps(self.to_dict(), indent=2))
        for t in self.traces:
            with open(root / f"smoothness_{t.label}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "grad_throttle", "grad_steer", "throttle", "steer"])
                for i, (g, u) in enumerate(zip(t.first_gradient, t.controls)):
                    w.writerow([i, repr(float(g[0])), repr(float(g[1])), repr(float(u[0])), repr(float(u[1]))])


def smoothness_report(model_relu, model_gelu, scenario: Scenario, labels=("relu", "gelu")) -> SmoothnessReport:
    """Optimize the same scenario with both models and compare trace roughness."""
    traces = []
    for label, model in zip(labels, (model_relu, model_gelu)):
        problem = scenario.problem(model)
        result = optimize(problem, np.zeros((scenario.n, 2)))
        grad = result.first_gradient if result.first_gradient is not None else np.zeros((scenario.n, 2))
        traces.append(SmoothnessTrace(label, grad, result.u, fluctuation(grad), fluctuation(result.u), result.cost))
    return SmoothnessReport(scenario.name, traces)
