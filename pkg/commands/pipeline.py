# commands/pipeline.py
import argparse
import os
from typing import Any, Callable, Dict, List, Optional, Sequence

import pandas as pd

from modules.config import build_section, flatten_sections, get_seed, load_config_file, logger, parse_overrides, save_run_snapshot
from modules.data import DATASET_FILE, SPLITS, build_dataset, read_trajectory_file, write_trajectory_file
from modules.errors import ConfigError, DataFormatError, HorizonMismatchError
from modules.metrics import TASKS, EvalReport, evaluate, scaling_probe
from modules.model import ModelParams, init_params, load, save
from modules.training import EpochRecord, train

MODEL_FILE: str = "model.pain"


def resolve_flat(args: argparse.Namespace) -> Dict[str, str]:
    """Config file first, then --set overrides; explicit flags are applied per section."""
    flat: Dict[str, str] = {}
    if getattr(args, "config", None):
        flat.update(load_config_file(args.config))
    flat.update(parse_overrides(getattr(args, "set", None)))
    return flat


def flat_value(flat: Dict[str, str], key: str, explicit: Any, cast: Callable[[str], Any] = str,
               default: Any = None) -> Any:
    """Explicit flag, else the flat config entry, else `default`."""
    if explicit is not None:
        return explicit
    if key not in flat:
        return default
    try:
        return cast(flat[key])
    except ValueError:
        raise ConfigError(f"{key} has an invalid value '{flat[key]}'")


def required_value(flat: Dict[str, str], key: str, explicit: Optional[str], flag: str) -> str:
    value = flat_value(flat, key, explicit)
    if value is None:
        raise ConfigError(f"{flag} is required (or set {key} in the config)")
    return value


def check_choice(key: str, value: str, choices: Sequence[str]) -> str:
    if value not in choices:
        raise ConfigError(f"{key} must be one of {list(choices)}, got '{value}'")
    return value


def parse_int_list(text: str, flag: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, got '{text}'")
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"{flag} needs positive integers, got '{text}'")
    return values


def cmd_generate(args: argparse.Namespace) -> str:
    flat = resolve_flat(args)
    seed = get_seed(args.seed, flat)
    n_samples = flat_value(flat, "dataset.samples", args.samples, int, 100)
    if n_samples < 1:
        raise ConfigError(f"--samples must be >= 1, got {n_samples}")
    sim = build_section("sim", flat, n_particles=args.n_particles, frames=args.frames, spring_k=args.spring_k,
                        coulomb_c=args.coulomb_c, dt_sim=args.dt, stride=args.stride, seed=seed)
    dataset = build_dataset(sim, n_samples, seed=seed)
    path = os.path.join(args.out, DATASET_FILE)
    write_trajectory_file(dataset, path)
    snapshot = flatten_sections(sim=sim)
    snapshot["dataset.samples"] = str(n_samples)
    save_run_snapshot(args.out, snapshot, seed)
    return path


def _model_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {"hidden": getattr(args, "hidden", None), "layers": getattr(args, "layers", None),
            "horizon": getattr(args, "horizon", None), "eta": getattr(args, "eta", None),
            "num_heads": getattr(args, "num_heads", None),
            "tie_steps": True if getattr(args, "tie_steps", False) else None}


def cmd_train(args: argparse.Namespace) -> ModelParams:
    flat = resolve_flat(args)
    seed = get_seed(args.seed, flat)
    data_path = required_value(flat, "data.path", args.data, "--data")
    dataset = read_trajectory_file(data_path)
    if not dataset.samples:
        raise DataFormatError(f"{data_path} holds no samples")
    state, traj = dataset.samples[0]
    model_cfg = build_section("model", flat, feature_dim=state.features.shape[1], n_types=state.types.shape[1],
                              edge_dim=state.graph.edge_dim, seed=seed, **_model_overrides(args))
    if model_cfg.horizon > traj.horizon:
        raise HorizonMismatchError(f"horizon {model_cfg.horizon} exceeds the {traj.horizon} frames stored in {data_path}")
    train_cfg = build_section("train", flat, lr=args.lr, weight_decay=args.weight_decay, patience=args.patience,
                              epochs=args.epochs, batch_size=args.batch_size, seed=seed)
    train_samples = dataset.split("train") or dataset.samples
    params = init_params(model_cfg, train_cfg, seed=seed)
    os.makedirs(args.out, exist_ok=True)
    save_run_snapshot(args.out, {**flatten_sections(model=model_cfg, train=train_cfg), "data.path": data_path}, seed)

    history: List[EpochRecord] = []
    result = train(train_samples, params, train_cfg, val_samples=dataset.split("val"), on_epoch=history.append)
    frame = pd.DataFrame([{"epoch": r.epoch, "train": r.train_loss, "val": r.val_loss} for r in history],
                         columns=["epoch", "train", "val"])
    frame.to_csv(os.path.join(args.out, "loss.csv"), index=False, float_format="%.17g")
    save(result.params, os.path.join(args.out, MODEL_FILE))
    return result.params


def _write_report(out: str, task: str, model: EvalReport, baseline: EvalReport) -> None:
    pd.DataFrame({"step": model.steps, "mse": model.per_step, "baseline_mse": baseline.per_step}).to_csv(
        os.path.join(out, "report.csv"), index=False, float_format="%.17g")
    rows = [("F-MSE", model.f_mse, baseline.f_mse)]
    if task == "s2t":
        rows.append(("A-MSE", model.a_mse, baseline.a_mse))
    rows += [("wall_time_s", model.wall_time, baseline.wall_time),
             ("peak_bytes", float(model.peak_bytes), float(baseline.peak_bytes))]
    pd.DataFrame(rows, columns=["metric", "model", "baseline"]).to_csv(
        os.path.join(out, "report_summary.csv"), index=False, float_format="%.17g")


def cmd_eval(args: argparse.Namespace) -> EvalReport:
    flat = resolve_flat(args)
    seed = get_seed(args.seed, flat)
    model_path = required_value(flat, "eval.model", args.model, "--model")
    data_path = required_value(flat, "data.path", args.data, "--data")
    task = check_choice("eval.task", flat_value(flat, "eval.task", args.task, default="s2t"), TASKS)
    split = check_choice("eval.split", flat_value(flat, "eval.split", args.split, default="test"), SPLITS)
    if not os.path.exists(model_path):
        raise DataFormatError(f"model file not found: {model_path}")
    params = load(model_path)
    dataset = read_trajectory_file(data_path)
    samples = dataset.split(split) or dataset.samples
    T = flat_value(flat, "eval.horizon", args.horizon, int, params.config.horizon)
    if T > params.config.horizon and not params.config.tie_steps:
        raise HorizonMismatchError(f"model {model_path} was trained for horizon {params.config.horizon}, {T} requested")
    if T > min(traj.horizon for _, traj in samples):
        raise HorizonMismatchError(f"{data_path} stores fewer than {T} frames per sample")
    report = evaluate(samples, params, T=T, task=task)
    baseline = evaluate(samples, None, T=T, task=task)
    os.makedirs(args.out, exist_ok=True)
    _write_report(args.out, task, report, baseline)
    save_run_snapshot(args.out, {"eval.task": task, "eval.split": split, "eval.horizon": str(T),
                                 "eval.model": model_path, "data.path": data_path}, seed)
    logger.info(f"Evaluation written to {args.out}: model A-MSE {report.a_mse:.6g} vs linear {baseline.a_mse:.6g}")
    return report


def cmd_probe(args: argparse.Namespace) -> pd.DataFrame:
    flat = resolve_flat(args)
    seed = get_seed(args.seed, flat)
    model_path = flat_value(flat, "probe.model", args.model)
    if model_path:
        params = load(model_path)
    else:
        params = init_params(build_section("model", flat, seed=seed, **_model_overrides(args)), seed=seed)
    sizes_text = flat_value(flat, "probe.sizes", args.sizes, default="16,32,64")
    horizons_text = flat_value(flat, "probe.horizons", args.horizons, default="5,10")
    repeats = flat_value(flat, "probe.repeats", args.repeats, int, 3)
    sizes = parse_int_list(sizes_text, "--sizes")
    horizons = parse_int_list(horizons_text, "--horizons")
    if not params.config.tie_steps and max(horizons) > params.config.horizon:
        raise HorizonMismatchError(f"probe horizons up to {max(horizons)} need --tie-steps or horizon >= {max(horizons)}")
    table = scaling_probe(params, sizes, horizons, seed=seed, repeats=repeats)
    os.makedirs(args.out, exist_ok=True)
    table.to_csv(os.path.join(args.out, "scaling.csv"), index=False, float_format="%.17g")
    snapshot = {"probe.sizes": sizes_text, "probe.horizons": horizons_text, "probe.repeats": str(repeats)}
    if model_path:
        snapshot["probe.model"] = model_path
    else:
        snapshot.update(flatten_sections(model=params.config))
    save_run_snapshot(args.out, snapshot, seed)
    return table
