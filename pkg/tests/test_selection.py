import csv
import json

import numpy as np
import pytest

from learndrift import bundled
from learndrift.angles import rigid_transform_poses
from learndrift.car_sim import SimParams, collect_dataset, rollout_arrays
from learndrift.dataset import SplitDataset, ValidationTrajectory, build_pairs, carve_validation
from learndrift.mlp import Activation, MlpSpec, TrainConfig
from learndrift.models import ConstantVelocityModel, LinearModel, SimModel, ZeroVelocityModel
from learndrift.selection import (
    TveReport,
    compare_losses,
    fluctuation,
    grid_search,
    pose_l1_error,
    smoothness_report,
    tve,
)
from learndrift.trajopt import Scenario

H = 0.05


@pytest.fixture(scope="module")
def sim_validation():
    held = collect_dataset(SimParams(), 121.0, H, seed=5)
    return carve_validation([held], 40, 60, seed=0)


@pytest.fixture(scope="module")
def tiny_dataset():
    log = collect_dataset(SimParams(), 40.0, H, seed=2)
    pairs = build_pairs(log)
    held = collect_dataset(SimParams(), 16.0, H, seed=3)
    return SplitDataset(pairs.take(np.arange(600)), pairs.take(np.arange(650, 780)), carve_validation([held], 5, 60, 0), H, 0)


class TestTve:
    def test_oracle_model_is_exact(self, sim_validation):
        report = tve(SimModel(), sim_validation)
        assert report.count == 40
        assert report.tve < 1e-6

    def test_worked_arithmetic(self):
        # a stationary model with the recorded final pose offset by (0.1, -0.2, 0.3)
        trajs = [ValidationTrajectory(np.vstack([np.zeros((60, 3)), [[0.1, -0.2, 0.3]]]), np.zeros((60, 2)), np.zeros(3), H) for _ in range(40)]
        report = tve(ZeroVelocityModel(), trajs)
        assert report.tve == pytest.approx(0.6, abs=1e-12)
        np.testing.assert_allclose(report.errors, 0.6, atol=1e-12)

    def test_zero_model_is_start_to_end_distance(self, sim_validation):
        expected = np.mean([pose_l1_error(t.x0, t.final_pose) for t in sim_validation])
        assert tve(ZeroVelocityModel(), sim_validation).tve == pytest.approx(expected, rel=1e-12)

    def test_heading_wraps(self):
        assert pose_l1_error([0, 0, 3.1], [0, 0, -3.1]) == pytest.approx(2 * np.pi - 6.2)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            tve(SimModel(), [])

    def test_negative_errors_rejected(self):
        with pytest.raises(ValueError):
            TveReport([0.1, -0.1])

    # |dx| + |dy| is only invariant under rotations that permute the axes
    @pytest.mark.parametrize("dtheta", [0.0, np.pi / 2, np.pi, -np.pi / 2])
    def test_rigid_transform_invariance(self, sim_validation, dtheta):
        model = ConstantVelocityModel()
        moved = [
            ValidationTrajectory(rigid_transform_poses(t.poses, 2.0, -3.0, dtheta), t.controls, t.v0, t.h)
            for t in sim_validation[:10]
        ]
        a, b = tve(model, sim_validation[:10]), tve(model, moved)
        np.testing.assert_allclose(a.errors, b.errors, atol=1e-9)

    def test_zero_iff_exact(self):
        poses, _, _ = rollout_arrays([0, 0, 0], [1, 0, 0], np.zeros((5, 2)), SimParams(), H)
        t = ValidationTrajectory(poses, np.zeros((5, 2)), [1, 0, 0], H)
        assert tve(SimModel(), [t]).tve == 0
        assert tve(ConstantVelocityModel(), [t]).tve > 0

    def test_mixed_lengths(self, sim_validation):
        short = ValidationTrajectory(sim_validation[0].poses[:11], sim_validation[0].controls[:10], sim_validation[0].v0, H)
        r = tve(SimModel(), [short, sim_validation[1]])
        assert r.count == 2 and r.tve < 1e-12


class TestFluctuation:
    def test_constant(self):
        assert fluctuation(np.full((10, 2), 0.4)) == 0

    def test_linear_ramp(self):
        assert fluctuation(np.linspace(0, 1, 10)[:, None] * [1, 2]) == pytest.approx(0, abs=1e-15)

    def test_alternating(self):
        u = np.array([[1.0, 0.0], [-1.0, 0.0]] * 3)
        assert fluctuation(u) == pytest.approx(4.0)

    def test_too_short(self):
        with pytest.raises(ValueError):
            fluctuation(np.zeros((2, 2)))


class TestSmoothness:
    def test_identical_models(self, tmp_path):
        model = LinearModel(0.9 * np.eye(3), [[1, 0], [0, 0.5], [0, 1]])
        scn = Scenario.load(bundled("scenarios", "parallel_parking.json"))
        scn = Scenario(scn.name, scn.n, scn.h, scn.x0, scn.v0, scn.cost, scn.schedule, 5, scn.tolerance)
        report = smoothness_report(model, model, scn)
        a, b = report.traces
        assert np.array_equal(a.controls, b.controls) and np.array_equal(a.first_gradient, b.first_gradient)
        assert a.control_fluctuation - b.control_fluctuation == 0
        report.write(tmp_path)
        doc = json.loads((tmp_path / "smoothness.json").read_text())
        assert set(doc["models"]) == {"relu", "gelu"}
        rows = list(csv.reader(open(tmp_path / "smoothness_gelu.csv")))
        assert rows[0] == ["step", "grad_throttle", "grad_steer", "throttle", "steer"]
        assert len(rows) == scn.n + 1


CFG = TrainConfig(epochs=2, batch_size=64)


class TestCompareLosses:
    def test_bookkeeping_and_determinism(self, tiny_dataset, tmp_path):
        spec = MlpSpec.hidden(1, 8)
        a = compare_losses(spec, tiny_dataset, 2, seed=4, config=CFG)
        assert a.seeds == [4, 5]
        assert set(a.tve) == {"l1", "l2", "relative"}
        assert all(len(v) == 2 and all(np.isfinite(v)) for v in a.tve.values())
        b = compare_losses(spec, tiny_dataset, 2, seed=4, config=CFG, jobs=2)
        assert a.tve == b.tve
        a.write(tmp_path)
        rows = list(csv.reader(open(tmp_path / "loss_comparison.csv")))
        assert len(rows) == 7
        assert set(json.loads((tmp_path / "loss_comparison.json").read_text())["summary"]) == {"l1", "l2", "relative"}

    def test_repeats_validation(self, tiny_dataset):
        with pytest.raises(ValueError):
            compare_losses(MlpSpec.hidden(1, 8), tiny_dataset, 1, 0, CFG)


class TestGridSearch:
    def test_single(self, tiny_dataset):
        r = grid_search([1], [8], [Activation.GELU], tiny_dataset, CFG)
        assert len(r.rows) == 1 and not r.rejected
        row = r.rows[0]
        assert (row.layers, row.width, row.activation) == (1, 8, "gelu")
        assert row.n_params == MlpSpec.hidden(1, 8).n_params

    def test_rejects_zero_layers(self, tiny_dataset):
        r = grid_search([0, 1], [4], ["relu"], tiny_dataset, CFG)
        assert len(r.rows) == 1 and len(r.rejected) == 1
        assert r.rejected[0]["layers"] == 0

    def test_rows_cover_grid_sorted(self, tiny_dataset, tmp_path):
        r = grid_search([1, 2], [4, 8], ["relu", "gelu"], tiny_dataset, CFG, jobs=2)
        keys = {(x.layers, x.width, x.activation) for x in r.rows}
        assert len(r.rows) == 8 and len(keys) == 8
        tves = [x.tve for x in r.rows]
        assert tves == sorted(tves) and all(np.isfinite(tves))
        r.write(tmp_path)
        assert len(list(csv.reader(open(tmp_path / "grid_search.csv")))) == 9

    def test_empty_axis(self, tiny_dataset):
        with pytest.raises(ValueError):
            grid_search([], [4], ["relu"], tiny_dataset, CFG)
