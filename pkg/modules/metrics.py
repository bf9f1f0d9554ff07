# modules/metrics.py
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from modules.config import logger
from modules.data import linear_baseline
from modules.decoder import ObservedGraph
from modules.errors import ContractError, DimensionError
from modules.model import Batch, ModelParams, SystemState, Trajectory, predict_frames
from modules.tensor import TRACKER
from modules.training import minibatches

Frames = Union[Trajectory, np.ndarray]
Sample = Tuple[SystemState, Trajectory]
TASKS = ("s2s", "s2t")


def _frames(x: Frames) -> np.ndarray:
    return x.frames if isinstance(x, Trajectory) else np.asarray(x, dtype=np.float64)


def _check(op: str, pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape or pred.shape[-1] != 3:
        raise DimensionError(op, pred.shape, truth.shape)


def per_step_mse(pred: Frames, truth: Frames) -> np.ndarray:
    """Per-particle mean squared displacement at every step of a (T, N, 3) pair."""
    p, t = _frames(pred), _frames(truth)
    _check("per_step_mse", p, t)
    if p.ndim != 3:
        raise DimensionError("per_step_mse", p.shape, ("T", "N", 3))
    diff = p - t
    return (diff * diff).sum(axis=-1).mean(axis=-1)


def f_mse(pred: Frames, truth: Frames) -> float:
    """Final-frame error; accepts whole trajectories or single (N, 3) frames."""
    p, t = _frames(pred), _frames(truth)
    _check("f_mse", p, t)
    if p.ndim == 3:
        p, t = p[-1], t[-1]
    diff = p - t
    return float((diff * diff).sum(axis=-1).mean())


def a_mse(pred: Frames, truth: Frames) -> float:
    return float(np.mean(per_step_mse(pred, truth)))


@dataclass
class EvalReport:
    steps: List[int]
    per_step: List[float]
    f_mse: float
    a_mse: float
    wall_time: float = 0.0
    peak_bytes: int = 0
    label: str = "model"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"step": self.steps, "mse": self.per_step})


def evaluate(samples: Sequence[Sample], params: Optional[ModelParams] = None, T: Optional[int] = None,
             task: str = "s2t", batch_size: int = 64) -> EvalReport:
    """Score a split; without params the inertial baseline is scored instead.

    Per-step errors are particle-weighted over the whole split, so A-MSE is the
    plain mean of the per-step column and F-MSE is its last entry.
    """
    if task not in TASKS:
        raise ContractError(f"task must be one of {TASKS}, got '{task}'")
    if not samples:
        raise ContractError("cannot evaluate an empty split")
    T = T if T is not None else (params.config.horizon if params is not None else samples[0][1].horizon)
    sq = np.zeros(T)
    particles = 0
    TRACKER.reset_peak()
    base = TRACKER.current
    started = time.perf_counter()
    if params is not None:
        for batch in minibatches(samples, batch_size, None, T):
            diff = predict_frames(batch, params, T) - batch.targets
            sq += (diff * diff).sum(axis=(0, 2, 3))
            particles += diff.shape[0] * diff.shape[2]
    else:
        for state, traj in samples:
            pred = linear_baseline(state, T, traj.dt)
            diff = pred.frames - traj.head(T).frames
            sq += (diff * diff).sum(axis=(1, 2))
            particles += state.n
    wall = time.perf_counter() - started
    per_step = sq / particles
    steps = list(range(1, T + 1))
    if task == "s2s":
        steps, per_step = [T], per_step[-1:]
    report = EvalReport(steps, [float(v) for v in per_step], float(per_step[-1]), float(np.mean(per_step)),
                        wall_time=wall, peak_bytes=max(0, TRACKER.peak - base),
                        label="model" if params is not None else "linear")
    logger.info(f"{report.label} {task}: F-MSE={report.f_mse:.6g} A-MSE={report.a_mse:.6g} ({wall:.2f}s)")
    return report


def probe_state(n: int, params: ModelParams, rng: np.random.Generator) -> SystemState:
    """Random chain-connected system sized for `params`."""
    cfg = params.config
    pairs = np.stack([np.arange(n - 1), np.arange(1, n)], axis=1) if n > 1 else np.zeros((0, 2), dtype=np.int64)
    graph = ObservedGraph.undirected(n, pairs, rng.uniform(0.5, 1.5, size=(len(pairs), cfg.edge_dim)))
    types = np.zeros((n, cfg.n_types))
    types[np.arange(n), np.arange(n) % cfg.n_types] = 1.0
    return SystemState(rng.normal(size=(n, 3)) * n ** (1.0 / 3.0), rng.normal(size=(n, 3)),
                       rng.normal(size=(n, cfg.feature_dim)), types, graph)


def scaling_probe(params: ModelParams, Ns: Sequence[int], Ts: Sequence[int], seed: int = 0,
                  repeats: int = 3) -> pd.DataFrame:
    """Inference wall time (best of `repeats`) and tracked peak bytes per (N, T) cell."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in Ns:
        state = probe_state(int(n), params, rng)
        batch = Batch.from_samples([(state, None)])
        for T in Ts:
            best, peak = float("inf"), 0
            for _ in range(max(1, repeats)):
                TRACKER.reset_peak()
                base = TRACKER.current
                started = time.perf_counter()
                predict_frames(batch, params, int(T))
                best = min(best, time.perf_counter() - started)
                peak = max(peak, TRACKER.peak - base)
            rows.append({"N": int(n), "T": int(T), "time_ms": best * 1000.0, "mem_bytes": int(peak)})
            logger.debug(f"probe N={n} T={T}: {best * 1000.0:.2f} ms, {peak} bytes")
    return pd.DataFrame(rows, columns=["N", "T", "time_ms", "mem_bytes"])
