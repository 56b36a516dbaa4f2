#!/usr/bin/env python3
"""Sweep the transform's step scale and measure the clean-vs-robust tradeoff.

For each gamma, trains a plain baseline and the transform pipeline on the
same blob split, then reports clean test accuracy and pixel-off accuracy.
Gentle steps track the baseline on clean data; stronger steps give up a
little clean accuracy and gain under corruption.

Usage:
    python scripts/sweep_transform_strength.py [--seeds 0 1 2] [--gammas ...]
"""

import argparse
import sys

from signreg import repro
from signreg.augment import CorruptionSpec
from signreg.evalharness import evaluate, robustness_suite
from signreg.sign import SignConfig
from signreg.tensor import Rng
from signreg.training import sign_pipeline
from signreg.nn import build_model
from signreg.training import train


def run_one(seed: int, gamma: float) -> dict:
    raw = repro.blob_split(seed, separation=1.5, samples_per_class=40,
                           noise_sigma=14.0, test_per_class=300, val_per_class=150,
                           normalized=False)
    from signreg.datasets import normalize
    split = normalize(raw)
    meta = repro.mlp_meta(split)
    cfg = repro._base_cfg(seed, epochs=24)

    baseline = build_model(meta, rng=Rng(seed).child("init"))
    report = train(baseline, split, cfg)
    baseline.set_params(report.best_params)

    cfgs = [SignConfig(k=50, gamma=gamma, normalize="unit-max-abs"),
            SignConfig(k=100, gamma=gamma, normalize="unit-max-abs")]
    pipe = sign_pipeline(split, meta, cfg, cfgs, repro._base_cfg(seed, 24, "sign"))

    spec = [CorruptionSpec(kind="pixel-off", pixel_count=14)]

    def measure(model):
        clean = evaluate(model, split.test).mean_accuracy
        rob = robustness_suite(model, raw.test, spec, repeats=5,
                               rng=Rng(seed).child("rob"), stats=split.stats)
        return clean, rob[0].mean_accuracy

    base_clean, base_rob = measure(baseline)
    sign_clean, sign_rob = measure(pipe.final_model)
    return {"base_clean": base_clean, "base_rob": base_rob,
            "sign_clean": sign_clean, "sign_rob": sign_rob}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", nargs="*", type=int, default=[0, 1, 2])
    parser.add_argument("--gammas", nargs="*", type=float,
                        default=[0.002, 0.005, 0.01, 0.02, 0.05])
    args = parser.parse_args()

    print(f"{'gamma':>7} {'clean(base)':>12} {'clean(sign)':>12} "
          f"{'pixoff(base)':>13} {'pixoff(sign)':>13}")
    for gamma in args.gammas:
        rows = [run_one(seed, gamma) for seed in args.seeds]
        mean = {k: sum(r[k] for r in rows) / len(rows) for k in rows[0]}
        print(f"{gamma:>7g} {mean['base_clean']:>12.4f} {mean['sign_clean']:>12.4f} "
              f"{mean['base_rob']:>13.4f} {mean['sign_rob']:>13.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
