"""Command-line entry point: collect, train, select, optimize, race.

Every command writes its artifacts under ``--out`` together with
``run_manifest.json``, which lists each artifact with its SHA-256 hash.
Settings resolve as command-line flag, then ``--config`` JSON file, then the
built-in default. Exit codes: 0 success, 2 validation error, 3 runtime or
numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from learndrift import __version__, bundled
from learndrift.car_sim import ExcitationConfig, SimParams, collect_dataset, rollout_arrays, write_log_csv
from learndrift.dataset import SmoothingConfig, build_pairs, load_split, split_and_save
from learndrift.mlp import Activation, LossKind, MlpModel, MlpSpec, TrainConfig, train
from learndrift.models import SimModel
from learndrift.mpc import MpcConfig, Track, run_closed_loop
from learndrift.selection import compare_losses, grid_search, smoothness_report
from learndrift.trajopt import OptimizationError, Scenario, optimize, result_report, write_telemetry_csv

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
MANIFEST_NAME = "run_manifest.json"


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    if not isinstance(doc, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return doc


def _pick(flag, config: dict, key: str, default):
    """Flag value if given, else the config entry, else ``default``."""
    if flag is not None:
        return flag
    return config.get(key, default)


def _sim_params(config: dict) -> SimParams:
    src = config.get("sim_params")
    if src is None:
        return SimParams.from_json(bundled("sim_params.json"))
    if isinstance(src, dict):
        return SimParams.from_dict(src)
    return SimParams.from_json(src)


def _load_model(spec: str, h: float, params: SimParams):
    """``"sim"`` selects the simulator oracle; anything else is a model JSON path."""
    if spec == "sim":
        return SimModel(params, h)
    return MlpModel.load(spec)


def _bundled_or_path(value: str, folder: str):
    p = Path(value)
    if p.exists():
        return p
    candidate = bundled(folder, value if value.endswith(".json") else value + ".json")
    if candidate.is_file():
        return candidate
    raise FileNotFoundError(f"no such file or bundled {folder[:-1]}: {value}")


def write_manifest(out: Path, command: str, configs: list, seeds: dict, artifacts: list[Path], settings: dict, wall_time: float) -> dict:
    manifest = {
        "command": command,
        "config_files": [str(c) for c in configs if c is not None],
        "seeds": seeds,
        "settings": settings,
        "artifacts": [{"path": str(a.relative_to(out)), "sha256": sha256(a)} for a in sorted(artifacts)],
        "tool_version": __version__,
        "wall_time": wall_time,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))
    return manifest


def verify_manifest(out) -> list[str]:
    """Artifacts that are missing or whose hash changed since the manifest was written."""
    out = Path(out)
    manifest = json.loads((out / MANIFEST_NAME).read_text())
    bad = []
    for a in manifest["artifacts"]:
        p = out / a["path"]
        if not p.exists() or sha256(p) != a["sha256"]:
            bad.append(a["path"])
    return bad


def _files_under(root: Path) -> list[Path]:
    return [p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST_NAME]


# --- commands ----------------------------------------------------------------


def cmd_collect(args, cfg: dict) -> dict:
    seed = _pick(args.seed, cfg, "seed", 0)
    duration = float(_pick(args.duration, cfg, "duration", 960.0))
    h = float(cfg.get("h", 0.05))
    ratios = tuple(cfg.get("ratios", (15 / 16, 1 / 16)))
    val_count = int(cfg.get("validation_count", 40))
    val_steps = int(cfg.get("validation_steps", 60))
    smoothing = SmoothingConfig(**cfg["smoothing"]) if cfg.get("smoothing") else SmoothingConfig()
    source = cfg.get("velocity_source", "recorded")
    if not duration > 0:
        raise ValueError("duration must be positive")
    params = _sim_params(cfg)
    excitation = ExcitationConfig(**cfg.get("excitation", {}))
    # the held-out log is just long enough for the validation slots, plus one frame
    held_duration = float(cfg.get("holdout_duration", val_count * val_steps * h + h))

    log = collect_dataset(params, duration, h, seed, excitation)
    held = collect_dataset(params, held_duration, h, seed + 1, excitation)
    pairs = build_pairs(log, smoothing, source)
    out = Path(args.out)
    split = split_and_save(pairs, [held], ratios, seed, out, h=h, val_count=val_count, val_steps=val_steps, smoothing=smoothing)
    write_log_csv(log, out / "raw_log.csv")
    write_log_csv(held, out / "heldout_log.csv")
    return {
        "seeds": {"collect": seed, "heldout": seed + 1, "split": seed},
        "settings": {"duration": duration, "h": h, "velocity_source": source, "ratios": list(ratios), "pairs": len(pairs), "train": len(split.train), "test": len(split.test)},
    }


def cmd_train(args, cfg: dict) -> dict:
    seed = _pick(args.seed, cfg, "seed", 0)
    dataset = _pick(args.dataset, cfg, "dataset", None)
    if dataset is None:
        raise ValueError("train needs --dataset (or 'dataset' in the config file)")
    split = load_split(dataset)
    layers = int(_pick(args.layers, cfg, "layers", 8))
    width = int(_pick(args.width, cfg, "width", 64))
    act = Activation(_pick(args.activation, cfg, "activation", "gelu"))
    tcfg = TrainConfig.from_dict({**cfg.get("train", {}), "seed": seed})
    if args.loss is not None:
        tcfg = replace(tcfg, loss=LossKind(args.loss))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    spec = MlpSpec.hidden(layers, width, act, seed)
    model, hist = train(spec, (split.train, split.test), tcfg, log=print if args.verbose else None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json")
    hist.write_csv(out / "history.csv")
    return {"seeds": {"init": seed, "batching": seed}, "settings": {"dataset": str(dataset), "spec": spec.to_dict(), "train": tcfg.to_dict()}}


DEFAULT_SELECT = {
    "grid": {"layers": [2, 4, 8], "widths": [32, 64], "activations": ["relu", "gelu"]},
    "loss_comparison": {"layers": 4, "width": 32, "activation": "gelu", "repeats": 5},
    "smoothness": {"layers": 4, "width": 32, "scenario": "parallel_parking"},
    "train": {"epochs": 20},
}


def cmd_select(args, cfg: dict) -> dict:
    seed = _pick(args.seed, cfg, "seed", 0)
    dataset = _pick(args.dataset, cfg, "dataset", None)
    if dataset is None:
        raise ValueError("select needs --dataset (or 'dataset' in the config file)")
    split = load_split(dataset)
    if not split.validation:
        raise ValueError("dataset manifest field 'validation_trajectories' is missing or empty")
    sel = {k: {**v, **cfg.get(k, {})} for k, v in DEFAULT_SELECT.items()}
    tcfg = TrainConfig.from_dict({**sel["train"], "seed": seed})
    jobs = args.jobs
    out = Path(args.out)

    g = sel["grid"]
    grid = grid_search(g["layers"], g["widths"], g["activations"], split, tcfg, seed, jobs)
    grid.write(out)
    lc = sel["loss_comparison"]
    losses = compare_losses(MlpSpec.hidden(lc["layers"], lc["width"], Activation(lc["activation"]), seed), split, int(lc["repeats"]), seed, tcfg, jobs)
    losses.write(out)
    sm = sel["smoothness"]
    pair = [train(MlpSpec.hidden(sm["layers"], sm["width"], act, seed), (split.train, split.test), tcfg)[0] for act in (Activation.RELU, Activation.GELU)]
    scenario = Scenario.load(_bundled_or_path(sm["scenario"], "scenarios"))
    smoothness_report(pair[0], pair[1], scenario).write(out)
    return {"seeds": {"base": seed}, "settings": {"dataset": str(dataset), **sel}}


def cmd_optimize(args, cfg: dict) -> dict:
    scenario_arg = _pick(args.scenario, cfg, "scenario", "parallel_parking")
    scenario = Scenario.load(_bundled_or_path(scenario_arg, "scenarios"))
    model_arg = _pick(args.model, cfg, "model", scenario.model or "sim")
    if model_arg is None:
        raise ValueError("optimize needs --model")
    params = _sim_params(cfg)
    model = _load_model(model_arg, scenario.h, params)
    if args.iterations is not None:
        scenario = replace(scenario, max_iterations=args.iterations)
    grad_mode = _pick(args.grad_mode, cfg, "grad_mode", "analytic")
    result = optimize(scenario.problem(model, args.jobs), np.zeros((scenario.n, 2)), grad_mode=grad_mode)

    poses_exec, vels_exec, _ = rollout_arrays(scenario.x0, scenario.v0, result.u, params, scenario.h)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_telemetry_csv(out / "nominal.csv", result.states, result.velocities, result.u)
    write_telemetry_csv(out / "executed.csv", poses_exec, vels_exec, result.u)
    pos_err = np.linalg.norm(poses_exec[:, :2] - result.states[:, :2], axis=1)
    final = scenario.cost.targets[-1]
    final_exec = poses_exec[final.step]
    error = {
        "mean_l2_position_error": float(np.mean(pos_err)),
        "max_l2_position_error": float(np.max(pos_err)),
        "final_l2_position_error": float(pos_err[-1]),
        "target_step": final.step,
        "target_pose": list(final.pose),
        "executed_pose_at_target": final_exec.tolist(),
        "nominal_pose_at_target": result.states[final.step].tolist(),
    }
    (out / "error.json").write_text(json.dumps(error, indent=2))
    (out / "result.json").write_text(json.dumps({"scenario": scenario.name, **result_report(result)}, indent=2))
    return {"seeds": {}, "settings": {"scenario": str(scenario_arg), "model": str(model_arg), "grad_mode": grad_mode, "max_iterations": scenario.max_iterations}}


def cmd_race(args, cfg: dict) -> dict:
    track = Track.load(_bundled_or_path(_pick(args.track, cfg, "track", "oval"), "tracks"))
    mpc_dict = dict(cfg.get("mpc", {}))
    if args.grad_mode is not None:
        mpc_dict["grad_mode"] = args.grad_mode
    if args.jobs is not None:
        mpc_dict["jobs"] = args.jobs
    if args.iterations is not None:
        mpc_dict["iterations"] = args.iterations
    mpc = MpcConfig.from_dict(mpc_dict)
    laps = int(_pick(args.laps, cfg, "laps", 1))
    model_arg = _pick(args.model, cfg, "model", None)
    if model_arg is None:
        raise ValueError("race needs --model (a model JSON path, or 'sim')")
    params = _sim_params(cfg)
    model = _load_model(model_arg, mpc.h, params)

    tel = run_closed_loop(track, mpc, model, params, laps=laps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tel.write_csv(out / "telemetry.csv", timing=not args.no_timing)
    summary = tel.summary()
    if args.no_timing:
        summary.pop("over_budget_fraction")
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    if tel.first_gradient is not None:
        np.savetxt(out / "first_gradient.csv", tel.first_gradient, delimiter=",", header="grad_throttle,grad_steer", comments="", fmt="%.17g")
    info = {"seeds": {}, "settings": {"model": str(model_arg), "laps": laps, "mpc": mpc.to_dict()}}
    if not tel.completed:
        info["failure"] = f"lap not completed within {mpc.max_cycles} cycles"
    return info


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="learndrift", description="Simulate, learn, optimize and race a drifting RC car.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON settings file; flags override its entries")
        p.add_argument("--seed", type=int, help="base seed (default: config 'seed', else 0)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
        return p

    p = common(sub.add_parser("collect", help="simulate driving and build the dataset"))
    p.add_argument("--duration", type=float, help="seconds of driving (default: config 'duration', else 960)")

    p = common(sub.add_parser("train", help="train a dynamics network"))
    p.add_argument("--dataset", help="dataset directory written by collect")
    p.add_argument("--loss", choices=[k.value for k in LossKind], help="training loss (default relative)")
    p.add_argument("--layers", type=int, help="hidden layers (default 8)")
    p.add_argument("--width", type=int, help="hidden width (default 64)")
    p.add_argument("--activation", choices=[a.value for a in Activation], help="activation (default gelu)")
    p.add_argument("--epochs", type=int, help="epochs (default: config 'train.epochs', else 200)")
    p.add_argument("--verbose", action="store_true", help="print per-epoch losses")

    p = common(sub.add_parser("select", help="loss comparison, grid search and smoothness reports"))
    p.add_argument("--dataset", help="dataset directory written by collect")

    p = common(sub.add_parser("optimize", help="offline trajectory optimization with plant playback"))
    p.add_argument("--scenario", help="scenario JSON path or bundled name (default parallel_parking)")
    p.add_argument("--model", help="model JSON path, or 'sim' for the simulator oracle (default sim)")
    p.add_argument("--iterations", type=int, help="override the scenario's iteration cap")
    p.add_argument("--grad-mode", choices=["analytic", "fd"], help="gradient mode (default analytic)")

    p = common(sub.add_parser("race", help="closed-loop MPC laps"))
    p.add_argument("--track", help="track JSON path or bundled name (default oval)")
    p.add_argument("--model", help="model JSON path, or 'sim' for the simulator oracle")
    p.add_argument("--laps", type=int, help="laps to drive (default 1)")
    p.add_argument("--iterations", type=int, help="optimizer iterations per cycle")
    p.add_argument("--grad-mode", choices=["analytic", "fd"], help="gradient mode (default analytic)")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock columns so reruns hash identically")
    return parser


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "select": cmd_select, "optimize": cmd_optimize, "race": cmd_race}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        if args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        cfg = _read_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[args.command](args, cfg)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"learndrift {args.command}: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OptimizationError, FloatingPointError, ArithmeticError, RuntimeError) as e:
        print(f"learndrift {args.command}: failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    write_manifest(out, args.command, [args.config], info["seeds"], _files_under(out), info["settings"], time.perf_counter() - t0)
    if "failure" in info:
        print(f"learndrift {args.command}: failed: {info['failure']}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
