"""Command-line entry point.

Subcommands:
  train      run an experiment config (plain or offline-transform pipeline)
  transform  apply the Jacobian transform to a sample container
  eval       evaluate a checkpoint (accuracy, corruption, OOD, projection)
  repro      run one of the bundled desk-scale protocols

Exit codes: 0 success, 1 configuration/user error, 2 runtime failure.
Every run writes a resolved config snapshot into its output directory so
it can be reproduced bit-exactly. SIGNREG_THREADS overrides the config's
thread count.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import config as cfgmod
from . import repro
from .config import ConfigError, ExperimentConfig, load_experiment_config
from .datasets import (NormStats, load_container, load_ood_directory, normalize,
                       normalize_sample, save_container)
from .evalharness import (evaluate, ood_evaluate, project_features, robustness_suite,
                          score_samples, write_scores_csv)
from .nn import build_model, load_checkpoint, params_checksum, save_checkpoint
from .sign import transform_dataset
from .tensor import Rng
from .training import sign_pipeline, train


def _write_run_dir(cfg: ExperimentConfig):
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "resolved-config.ini"), "w") as fh:
        fh.write(cfgmod.resolved_config_text(cfg))


def _log(cfg: ExperimentConfig, message: str):
    print(message, file=sys.stderr)
    with open(os.path.join(cfg.output_dir, "run.log"), "a") as fh:
        fh.write(message + "\n")


def cmd_train(config_path: str) -> int:
    cfg = load_experiment_config(config_path)
    _write_run_dir(cfg)
    split = normalize(cfgmod.build_dataset(cfg))
    meta = cfgmod.model_meta(cfg, split)
    out = cfg.output_dir

    if cfg.strategy in ("sign", "sign-plus-classical"):
        pretrain = cfgmod.train_config(cfg, epochs=cfg.source_epochs or cfg.epochs,
                                       seed=cfg.source_seed, strategy="none")
        result = sign_pipeline(split, meta, pretrain, cfgmod.sign_configs(cfg),
                               cfgmod.train_config(cfg), threads=cfg.threads)
        save_checkpoint(result.source_model, os.path.join(out, "source-checkpoint.bin"))
        save_checkpoint(result.final_model, os.path.join(out, "checkpoint.bin"))
        aug = [s for s in result.augmented_split.train if s.provenance is not None]
        save_container(aug, os.path.join(out, "transformed-train.container"),
                       split.class_names, raw_domain=False, stats=split.stats)
        report = result.final_report
        _log(cfg, f"pipeline wall time: source {result.source_report.wall_time_s:.1f}s "
                  f"final {report.wall_time_s:.1f}s")
    else:
        model = build_model(meta, rng=Rng(cfg.init_seed).child("init"))
        report = train(model, split, cfgmod.train_config(cfg))
        model.set_params(report.best_params)
        save_checkpoint(model, os.path.join(out, "checkpoint.bin"))
        _log(cfg, f"train wall time: {report.wall_time_s:.1f}s")

    report.to_csv(os.path.join(out, "report.csv"))
    report.to_json(os.path.join(out, "report.json"))
    if report.rows:
        last = report.rows[-1]
        _log(cfg, f"final epoch {last.epoch}: val_acc={last.val_acc:.4f} "
                  f"(best epoch {report.selected_epoch})")
    return 0


def cmd_transform(config_path: str, checkpoint: str, in_dataset: str, out_path: str) -> int:
    cfg = load_experiment_config(config_path)
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    if not os.path.exists(in_dataset):
        raise ConfigError(f"input dataset not found: {in_dataset}")
    model = load_checkpoint(checkpoint)
    samples, manifest = load_container(in_dataset)
    if samples and samples[0].image.shape != model.input_shape:
        raise RuntimeError(f"checkpoint expects input {model.input_shape}, "
                           f"container has {samples[0].image.shape}")
    cfgs = cfgmod.sign_configs(cfg)
    out_samples = transform_dataset(model, samples, cfgs, threads=cfg.threads)
    checksum = params_checksum(model.params)
    provenance = {"source_checkpoint": os.path.basename(checkpoint),
                  "source_model": checksum,
                  "configs": [c.provenance(checksum) for c in cfgs]}
    stats = manifest.get("stats")
    save_container(out_samples, out_path, tuple(manifest["class_names"]),
                   raw_domain=bool(manifest["raw_domain"]),
                   stats=None if stats is None else NormStats(mean=tuple(stats["mean"]),
                                                              std=tuple(stats["std"])),
                   provenance=provenance)
    print(f"wrote {len(out_samples)} samples to {out_path}", file=sys.stderr)
    return 0


def cmd_eval(config_path: str, checkpoint: str) -> int:
    cfg = load_experiment_config(config_path)
    if not os.path.exists(checkpoint):
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    _write_run_dir(cfg)
    model = load_checkpoint(checkpoint)
    raw_split = cfgmod.build_dataset(cfg)
    split = normalize(raw_split)
    out = cfg.output_dir

    scores = score_samples(model, split.test, cfg.mc_samples)
    write_scores_csv(scores, os.path.join(out, "per-sample.csv"))
    report = evaluate(model, split.test, cfg.mc_samples)

    if cfg.corruptions:
        report.corruptions = robustness_suite(
            model, raw_split.test, cfg.corruptions, cfg.eval_repeats,
            Rng(cfg.seed).child("robustness"), stats=split.stats,
            mc_samples=cfg.mc_samples)
    report.to_json(os.path.join(out, "eval-report.json"))
    print(f"mean accuracy: {report.mean_accuracy:.4f}", file=sys.stderr)

    if cfg.ood_path:
        ood_raw = load_ood_directory(cfg.ood_path, cfg.ood_class_map,
                                     size=model.input_shape[1:])
        ood_samples = [normalize_sample(s, split.stats) for s in ood_raw]
        ood_report = ood_evaluate(model, ood_samples, cfg.mc_samples)
        ood_report.to_json(os.path.join(out, "ood-report.json"))
    if cfg.projection:
        export = project_features(model, split.test, cfg.projection_tap)
        export.to_csv(os.path.join(out, "projection.csv"))
    return 0


def cmd_repro(recipe: str, seed: int = 0) -> int:
    if recipe not in repro.RECIPES:
        print(f"unknown recipe {recipe!r}; valid recipes: {', '.join(repro.RECIPES)}",
              file=sys.stderr)
        return 1
    return repro.run_recipe(recipe, seed)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="signreg",
                                     description="Jacobian-based input regularization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment from a config file")
    p_train.add_argument("-c", "--config", required=True)

    p_tr = sub.add_parser("transform", help="transform a sample container with a checkpoint")
    p_tr.add_argument("-c", "--config", required=True)
    p_tr.add_argument("--checkpoint", required=True)
    p_tr.add_argument("--in", dest="in_dataset", required=True)
    p_tr.add_argument("--out", dest="out_path", required=True)

    p_ev = sub.add_parser("eval", help="evaluate a checkpoint per the config's eval block")
    p_ev.add_argument("-c", "--config", required=True)
    p_ev.add_argument("--checkpoint", required=True)

    p_rp = sub.add_parser("repro", help="run a bundled desk-scale protocol")
    p_rp.add_argument("recipe")
    p_rp.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            return cmd_train(args.config)
        if args.command == "transform":
            return cmd_transform(args.config, args.checkpoint, args.in_dataset, args.out_path)
        if args.command == "eval":
            return cmd_eval(args.config, args.checkpoint)
        if args.command == "repro":
            return cmd_repro(args.recipe, args.seed)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
