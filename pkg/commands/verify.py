# commands/verify.py
import argparse
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from commands.pipeline import check_choice, flat_value, resolve_flat
from modules.attention import attention_step_matrix, attention_step_pairwise
from modules.config import ModelConfig, get_seed, logger, save_run_snapshot
from modules.energy import EnergyConfig, PotentialCoeffs, certify_descent, random_unit_embeddings
from modules.errors import ConfigError, PropertyFailure
from modules.extensions import executor
from modules.geometry import apply, random_permutation, random_transform
from modules.metrics import probe_state
from modules.model import ModelParams, SystemState, embeddings, forward, init_params, predict, trajectory_loss_tensor
from modules import tensor as tn

SUITES: Tuple[str, ...] = ("descent", "equivariance", "permutation", "matrix-vs-pairwise", "gradients")

DEFAULT_TOLERANCE: Dict[str, float] = {
    "descent": 1e-9,
    "equivariance": 1e-9,
    "embedding-invariance": 1e-12,
    "permutation": 1e-12,
    "matrix-vs-pairwise": 1e-10,
    "gradients": 1e-4,
}

DEFAULT_TRIALS: Dict[str, int] = {
    "descent": 100,
    "equivariance": 20,
    "permutation": 20,
    "matrix-vs-pairwise": 20,
    "gradients": 1,
}


@dataclass
class PropertyResult:
    name: str
    max_violation: float
    tolerance: float
    trials: int

    @property
    def passed(self) -> bool:
        # a zero tolerance cannot be certified in floating point
        return self.tolerance > 0 and self.max_violation <= self.tolerance

    def summary_line(self) -> str:
        return f"{self.name}: max_violation={self.max_violation:.6e} {'PASS' if self.passed else 'FAIL'}"


def _untrained_model(seed: int, hidden: int = 8, horizon: int = 3, layers: int = 2, num_heads: int = 2) -> ModelParams:
    """Random parameters with non-zero coordinate heads so the decoder moves particles."""
    cfg = ModelConfig(hidden=hidden, horizon=horizon, layers=layers, num_heads=num_heads,
                      zero_init_heads=False, seed=seed)
    return init_params(cfg, seed=seed)


def descent_suite(trials: int, tolerance: float, seed: int, out_dir: Optional[str] = None,
                  steps: int = 10) -> PropertyResult:
    rng = np.random.default_rng(seed)
    shapes = [(int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.integers(0, 2 ** 31))) for _ in range(trials)]

    def run(shape: Tuple[int, int, int]):
        n, d, s = shape
        cfg = EnergyConfig(PotentialCoeffs.uniform(n, a=1.0, b=0.1), lam=1.0, eta=0.1)
        return certify_descent(random_unit_embeddings(n, d, np.random.default_rng(s)), cfg, steps)

    reports = list(executor.map(run, shapes))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        frame = pd.concat([r.to_frame().assign(trial=i) for i, r in enumerate(reports)], ignore_index=True)
        frame[["trial", "step", "energy"]].to_csv(os.path.join(out_dir, "descent.csv"), index=False, float_format="%.17g")
    return PropertyResult("descent", max(r.max_violation for r in reports), tolerance, trials)


def equivariance_suite(trials: int, tolerance: float, seed: int,
                       embedding_tolerance: Optional[float] = None) -> List[PropertyResult]:
    """Rigid motions: predictions follow the motion, embeddings do not move."""
    params = _untrained_model(seed)
    state = probe_state(6, params, np.random.default_rng(seed))
    base = predict(state, params).frames
    base_h = np.stack([h.data for h in embeddings(state, params)])
    rng = np.random.default_rng(seed + 1)
    transforms = [random_transform(rng=rng) for _ in range(trials)]

    def run(t) -> Tuple[float, float]:
        moved = state.transformed(t)
        pred = predict(moved, params).frames
        h = np.stack([x.data for x in embeddings(moved, params)])
        return float(np.max(np.abs(pred - apply(t, base)))), float(np.max(np.abs(h - base_h)))

    results = list(executor.map(run, transforms))
    emb_tol = embedding_tolerance if embedding_tolerance is not None else DEFAULT_TOLERANCE["embedding-invariance"]
    return [PropertyResult("equivariance", max(r[0] for r in results), tolerance, trials),
            PropertyResult("embedding-invariance", max(r[1] for r in results), emb_tol, trials)]


def permutation_suite(trials: int, tolerance: float, seed: int) -> PropertyResult:
    params = _untrained_model(seed)
    state = probe_state(7, params, np.random.default_rng(seed))
    base = predict(state, params).frames
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for _ in range(trials):
        perm = random_permutation(state.n, rng=rng)
        pred = predict(state.permuted(perm), params).frames
        worst = max(worst, float(np.max(np.abs(pred - perm.apply(base, axis=1)))))
    return PropertyResult("permutation", worst, tolerance, trials)


def matrix_vs_pairwise_suite(trials: int, tolerance: float, seed: int) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 33))
        heads = int(rng.integers(1, 3))
        params = _untrained_model(int(rng.integers(0, 2 ** 31)), hidden=4 * heads, horizon=1, layers=1, num_heads=heads)
        types = np.zeros((n, params.config.n_types))
        types[np.arange(n), rng.integers(0, params.config.n_types, size=n)] = 1.0
        maps = params.tables.bind(types)
        H = tn.Tensor(rng.normal(size=(n, params.config.hidden)))
        matrix = attention_step_matrix(H, params.attention[0], maps, num_heads=heads).data
        pairwise = attention_step_pairwise(H.data, params.attention[0], maps, num_heads=heads)
        worst = max(worst, float(np.max(np.abs(matrix - pairwise))))
    return PropertyResult("matrix-vs-pairwise", worst, tolerance, trials)


def _loss_fn(state: SystemState, params: ModelParams, targets: np.ndarray) -> Callable[[], tn.Tensor]:
    return lambda: trajectory_loss_tensor(forward(state, params), targets)


def gradients_suite(trials: int, tolerance: float, seed: int, step: float = 1e-5) -> PropertyResult:
    """Every parameter of a tiny end-to-end model against central differences."""
    worst = 0.0
    for trial in range(trials):
        params = _untrained_model(seed + trial, hidden=8, horizon=2, layers=2, num_heads=1)
        rng = np.random.default_rng(seed + trial)
        state = probe_state(4, params, rng)
        targets = state.positions[None] + rng.normal(scale=0.1, size=(2, 4, 3))
        loss_fn = _loss_fn(state, params, targets)
        tn.backward(loss_fn())
        for name, t in params.named_tensors():
            analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
            original = t.data.copy()
            value = original.copy()

            def evaluate() -> float:
                t.assign(value)
                return loss_fn().item()

            numeric = tn.finite_difference(evaluate, value, step)
            t.assign(original)
            err = tn.relative_error(analytic, numeric)
            if err > worst:
                logger.debug(f"gradient check {name}: relative error {err:.3e}")
            worst = max(worst, err)
    return PropertyResult("gradients", worst, tolerance, trials)


def run_suite(suite: str, trials: Optional[int] = None, tolerance: Optional[float] = None, seed: int = 0,
              out_dir: Optional[str] = None) -> List[PropertyResult]:
    if suite == "all":
        results: List[PropertyResult] = []
        for name in SUITES:
            results += run_suite(name, trials, tolerance, seed, out_dir)
        return results
    if suite not in SUITES:
        raise ConfigError(f"unknown suite '{suite}', expected one of {SUITES + ('all',)}")
    n = trials if trials is not None else DEFAULT_TRIALS[suite]
    if n < 1:
        raise ConfigError(f"--trials must be >= 1, got {n}")
    tol = tolerance if tolerance is not None else DEFAULT_TOLERANCE[suite]
    logger.info(f"Running {suite} suite: {n} trials, tolerance {tol:g}")
    if suite == "descent":
        return [descent_suite(n, tol, seed, out_dir)]
    if suite == "equivariance":
        return equivariance_suite(n, tol, seed, embedding_tolerance=tolerance)
    if suite == "permutation":
        return [permutation_suite(n, tol, seed)]
    if suite == "matrix-vs-pairwise":
        return [matrix_vs_pairwise_suite(n, tol, seed)]
    return [gradients_suite(n, tol, seed)]


def cmd_verify(args: argparse.Namespace) -> List[PropertyResult]:
    flat = resolve_flat(args)
    seed = get_seed(args.seed, flat)
    suite = check_choice("verify.suite", flat_value(flat, "verify.suite", args.suite, default="all"), SUITES + ("all",))
    trials = flat_value(flat, "verify.trials", args.trials, int)
    tolerance = flat_value(flat, "verify.tolerance", args.tolerance, float)
    snapshot = {"verify.suite": suite}
    if trials is not None:
        snapshot["verify.trials"] = str(trials)
    if tolerance is not None:
        snapshot["verify.tolerance"] = repr(float(tolerance))
    save_run_snapshot(args.out, snapshot, seed)

    results = run_suite(suite, trials, tolerance, seed, args.out)
    for result in results:
        print(result.summary_line())
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_violation)
        raise PropertyFailure(
            f"{len(failed)} property check(s) failed; worst {worst.name} max_violation={worst.max_violation:.6e} "
            f"(tolerance {worst.tolerance:g})")
    return results
