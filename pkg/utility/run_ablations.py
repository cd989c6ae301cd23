#!/usr/bin/env python3
"""
Activation and normalization ablations on synthetic experts

This script:
1. Builds a planted SiLU model and factorizes one layer once per activation
2. Builds a gaussian model (std 2.3e-2) and factorizes it with and without Z-score normalization
3. Writes one CSV per ablation

Usage:
    python utility/run_ablations.py --out-dir results/
    python utility/run_ablations.py --steps 500 --only activation
    python utility/run_ablations.py --config data/planted_acceptance.json
"""

import argparse
import json
import os
import sys
from pathlib import Path

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mobe import configure_logging, load_settings
from mobe.analyzer import write_rows
from mobe.errors import ToolkitError
from mobe.factorizer import FactorizeConfig, factorize_layer
from mobe.model_store import generate_synthetic
from mobe.models import Activation, MoEConfig

DEFAULT_CONFIG = {"layers": 1, "experts": 16, "hidden": 128, "intermediate": 48, "top_k": 2, "m": 4}


def load_config(path):
    if path is None:
        return dict(DEFAULT_CONFIG)
    with open(path, encoding="utf-8") as fh:
        return {**DEFAULT_CONFIG, **json.load(fh)}


def moe_config(values):
    fields = ("layers", "experts", "hidden", "intermediate", "top_k")
    return MoEConfig(**{key: values[key] for key in fields}).validate()


def activation_ablation(values, steps, seed):
    """Final loss per activation on a planted SiLU layer; fixed budget and seed."""
    model, _ = generate_synthetic(moe_config(values), seed, mode="planted", basis_count=values["m"])
    experts = model.layers[0].gate
    rows = []
    for activation in Activation:
        config = FactorizeConfig(m=values["m"], activation=activation, steps=steps, seed=seed)
        _, trace = factorize_layer(experts, config)
        rows.append((activation.value, trace.final_loss, trace.relative_loss))
        print(f"   {activation.value:<8} final loss {trace.final_loss:.4e}")
    return rows


def normalization_ablation(values, steps, seed):
    """Original-unit reconstruction error with and without Z-score normalization."""
    model, _ = generate_synthetic(moe_config(values), seed, mode="gaussian", std=2.3e-2)
    experts = model.layers[0].gate
    rows = []
    for normalize in (True, False):
        config = FactorizeConfig(m=values["m"], steps=steps, normalize=normalize, seed=seed)
        _, trace = factorize_layer(experts, config)
        error = sum(trace.per_expert_sq_error)
        rows.append((normalize, error))
        print(f"   normalize={normalize!s:<5} error {error:.4e}")
    return rows


def main():
    settings = load_settings()
    parser = argparse.ArgumentParser(description="Run activation / normalization ablations")
    parser.add_argument("--config", help="JSON with model dimensions and m")
    parser.add_argument("--steps", type=int, default=settings.steps)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--only", choices=["activation", "normalization"])
    parser.add_argument("--out-dir", default=".")
    args = parser.parse_args()

    configure_logging(settings.log_level)
    values = load_config(args.config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        if args.only in (None, "activation"):
            print("🔬 Activation ablation (planted SiLU experts)")
            rows = activation_ablation(values, args.steps, args.seed)
            path = write_rows(out_dir / "activation_ablation.csv", rows,
                              columns=["activation", "final_loss", "relative_loss"])
            print(f"✅ Wrote {path}")
        if args.only in (None, "normalization"):
            print("🔬 Normalization ablation (gaussian experts, std 2.3e-2)")
            rows = normalization_ablation(values, args.steps, args.seed)
            path = write_rows(out_dir / "normalization_ablation.csv", rows,
                              columns=["normalize", "final_loss_original_units"])
            print(f"✅ Wrote {path}")
    except ToolkitError as e:
        print(f"❌ {e}")
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
