"""Synthetic learning experiments: full model vs linear baseline, attention
ablation, decoder depth and readout variants, and inference time against horizon.

    python scripts/run_ablations.py --out data/ablations
"""
import argparse
import os
import sys
import time

import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.config import ModelConfig, SimConfig, TrainConfig, logger  # noqa: E402
from modules.data import build_dataset  # noqa: E402
from modules.decoder import MLP_MODES  # noqa: E402
from modules.metrics import evaluate, scaling_probe  # noqa: E402
from modules.model import init_params  # noqa: E402
from modules.training import train  # noqa: E402

# --- Configuration ---
N_PARTICLES = 10
N_SAMPLES = 300
RATIOS = (2 / 3, 1 / 6, 1 / 6)
HORIZON = 5


def fit(dataset, seed: int, epochs: int, **overrides) -> float:
    cfg = ModelConfig(horizon=HORIZON, seed=seed, **overrides)
    train_cfg = TrainConfig(lr=5e-3, epochs=epochs, patience=10, batch_size=16, seed=seed)
    params = init_params(cfg, train_cfg, seed=seed)
    train(dataset.split("train"), params, train_cfg, val_samples=dataset.split("val"))
    return evaluate(dataset.split("test"), params, T=HORIZON).a_mse


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default=os.path.join("data", "ablations"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=40)
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)

    started = time.perf_counter()
    sim = SimConfig(n_particles=N_PARTICLES, frames=HORIZON, seed=args.seed)
    dataset = build_dataset(sim, N_SAMPLES, RATIOS, seed=args.seed)
    linear = evaluate(dataset.split("test"), None, T=HORIZON).a_mse
    full = fit(dataset, args.seed, args.epochs)
    no_attention = fit(dataset, args.seed, args.epochs, attention=False)
    shallow = fit(dataset, args.seed, args.epochs, layers=1)
    readouts = {mode: fit(dataset, args.seed, args.epochs, decoder_mode=mode) for mode in MLP_MODES}

    timing_model = init_params(ModelConfig(tie_steps=True, seed=args.seed), seed=args.seed)
    timing = scaling_probe(timing_model, [64], [5, 10], seed=args.seed)
    timing.to_csv(os.path.join(args.out, "scaling.csv"), index=False, float_format="%.17g")
    t5, t10 = (float(timing.loc[timing["T"] == T, "time_ms"].iloc[0]) for T in (5, 10))

    checks = [
        ("model_beats_linear_by_30pct", full <= 0.7 * linear),
        ("attention_ablation_is_worse", no_attention > full),
        ("depth3_not_worse_than_depth1", full <= shallow),
        ("time_ratio_T10_T5_le_2.5", t10 / t5 <= 2.5),
    ]
    summary = pd.DataFrame(
        [("linear_a_mse", linear), ("full_a_mse", full), ("no_attention_a_mse", no_attention),
         ("depth1_a_mse", shallow), ("mlp_add_a_mse", readouts["mlp_add"]),
         ("mlp_concat_a_mse", readouts["mlp_concat"]), ("time_ratio_T10_T5", t10 / t5),
         ("wall_time_s", time.perf_counter() - started)],
        columns=["metric", "value"])
    summary.to_csv(os.path.join(args.out, "ablations.csv"), index=False, float_format="%.17g")
    for name, ok in checks:
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    failed = [name for name, ok in checks if not ok]
    if failed:
        logger.error(f"Ablation checks failed: {', '.join(failed)}")
        return 4
    logger.info(f"All ablation checks passed in {time.perf_counter() - started:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
