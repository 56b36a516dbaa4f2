"""Desk-scale end-to-end protocols, runnable from the CLI in minutes.

Each protocol mirrors one of the evaluation comparisons (classification,
uncertainty, corruption robustness, out-of-distribution, transferability,
delta-only signal) on the synthetic blob dataset, and prints a small
comparison table. These are directional demonstrations at toy scale, not
benchmark numbers; the same machinery runs on CIFAR-10 via the config
file interface when the binary batches are available.
"""

from __future__ import annotations

import numpy as np

from .augment import CorruptionSpec
from .datasets import DatasetSplit, make_synthetic_blobs, normalize, normalize_sample
from .evalharness import (EvalReport, TransferResult, evaluate, min_correct_probability,
                          ood_evaluate, robustness_suite, transferability_protocol)
from .nn import build_model
from .sign import SignConfig, delta_only_dataset
from .tensor import Rng
from .training import TrainConfig, sign_pipeline, train

RECIPES = ("classify", "uncertainty", "robustness", "ood", "transfer", "delta-only")

BLOB_SHAPE = (1, 12, 12)


def blob_split(seed: int = 0, classes: int = 3, samples_per_class: int = 100,
               separation: float = 2.0, noise_sigma: float = 12.0,
               normalized: bool = True, test_per_class: int | None = None,
               val_per_class: int | None = None) -> DatasetSplit:
    split = make_synthetic_blobs(classes, samples_per_class, BLOB_SHAPE, separation,
                                 Rng(seed).child("blobs"), noise_sigma=noise_sigma,
                                 test_per_class=test_per_class, val_per_class=val_per_class)
    return normalize(split) if normalized else split


def mlp_meta(split: DatasetSplit, hidden: tuple[int, ...] = (32,)) -> dict:
    shape = split.train[0].image.shape
    dim = int(np.prod(shape))
    return {"arch": "small_mlp", "input_dim": dim, "hidden_dims": list(hidden),
            "num_classes": split.num_classes, "input_shape": list(shape)}


def cnn_meta(split: DatasetSplit, drop_prob: float = 0.3) -> dict:
    shape = split.train[0].image.shape
    return {"arch": "basic_cnn", "input_shape": list(shape),
            "num_classes": split.num_classes, "drop_prob": drop_prob}


def desk_sign_cfgs(k_values: tuple[int, ...] = (50, 100), gamma: float = 0.02,
                   normalize_mode: str = "unit-max-abs") -> list[SignConfig]:
    """Bounded-step transform configs sized for toy data. The literal
    update rule (gamma=1, no normalization) diverges on most trained
    models at K >= 50; normalized small steps keep the same accumulation
    mechanism at a usable magnitude."""
    return [SignConfig(k=k, gamma=gamma, normalize=normalize_mode) for k in k_values]


def _train_fresh(meta: dict, split: DatasetSplit, cfg: TrainConfig):
    model = build_model(meta, rng=Rng(cfg.seed).child("init"))
    report = train(model, split, cfg)
    model.set_params(report.best_params)
    return model, report


def _base_cfg(seed: int, epochs: int = 16, strategy: str = "none", **kw) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=32, learning_rate=0.05,
                       strategy=strategy, seed=seed, **kw)


# -- protocols -------------------------------------------------------------------


def run_classify(seed: int = 0, separation: float = 1.0, epochs: int = 20,
                 samples_per_class: int = 40) -> dict[str, EvalReport]:
    """Per-class and overall accuracy under each augmentation strategy."""
    split = blob_split(seed, separation=separation, samples_per_class=samples_per_class,
                       test_per_class=200, val_per_class=100)
    meta = mlp_meta(split)
    results: dict[str, EvalReport] = {}
    for strategy in ("none", "classical", "mixup"):
        model, _ = _train_fresh(meta, split, _base_cfg(seed, epochs, strategy))
        results[strategy] = evaluate(model, split.test)
    pipeline = sign_pipeline(split, meta, _base_cfg(seed, epochs),
                             desk_sign_cfgs(), _base_cfg(seed, epochs, "sign"))
    results["sign"] = evaluate(pipeline.final_model, split.test)
    return results


def run_uncertainty(seed: int = 0, separation: float = 1.0,
                    epochs: int = 20) -> dict[str, dict]:
    """Accuracy, low-confidence bucket, learned noise scale per strategy."""
    split = blob_split(seed, separation=separation, samples_per_class=60,
                       test_per_class=200, val_per_class=100)
    meta = dict(mlp_meta(split), uncertainty_head=True)
    out: dict[str, dict] = {}
    for strategy in ("none", "mixup"):
        model, _ = _train_fresh(meta, split, _base_cfg(seed, epochs, strategy))
        report = evaluate(model, split.test)
        out[strategy] = {"report": report,
                         "min_correct_probability": min_correct_probability(model, split.test)}
    pipeline = sign_pipeline(split, meta, _base_cfg(seed, epochs),
                             desk_sign_cfgs(), _base_cfg(seed, epochs, "sign"))
    report = evaluate(pipeline.final_model, split.test)
    out["sign"] = {"report": report,
                   "min_correct_probability": min_correct_probability(pipeline.final_model, split.test)}
    return out


def blob_corruptions() -> list[CorruptionSpec]:
    # 12x12 images: 14 pixels ~ the same 5% coverage that 50 pixels gives 32x32
    return [CorruptionSpec(kind="pixel-off", pixel_count=14),
            CorruptionSpec(kind="gaussian", mu=0.0, sigma=10.0)]


def run_robustness(seed: int = 0, separation: float = 2.0, epochs: int = 16,
                   repeats: int = 5) -> dict[str, dict]:
    """Clean accuracy and accuracy under pixel-off / additive-noise draws."""
    raw_split = blob_split(seed, separation=separation, normalized=False)
    split = normalize(raw_split)
    meta = mlp_meta(split)
    out: dict[str, dict] = {}

    def measure(model) -> dict:
        clean = evaluate(model, split.test)
        corr = robustness_suite(model, raw_split.test, blob_corruptions(), repeats,
                                Rng(seed).child("robustness"), stats=split.stats)
        return {"clean": clean, "corruptions": corr}

    model, _ = _train_fresh(meta, split, _base_cfg(seed, epochs))
    out["none"] = measure(model)
    pipeline = sign_pipeline(split, meta, _base_cfg(seed, epochs),
                             desk_sign_cfgs(), _base_cfg(seed, epochs, "sign"))
    out["sign"] = measure(pipeline.final_model)
    return out


def run_ood(seed: int = 0, separation: float = 2.0, epochs: int = 16) -> dict[str, EvalReport]:
    """Evaluate on a shifted blob distribution covering a class subset."""
    split = blob_split(seed, separation=separation)
    # shifted distribution: noisier draws of a class subset, different stream
    ood_raw = make_synthetic_blobs(split.num_classes, 40, BLOB_SHAPE,
                                   separation * 0.7, Rng(seed + 1).child("ood"),
                                   noise_sigma=18.0)
    subset = [s for s in ood_raw.test if s.label < split.num_classes - 1]
    ood_samples = [normalize_sample(s, split.stats) for s in subset]
    meta = mlp_meta(split)
    out: dict[str, EvalReport] = {}
    model, _ = _train_fresh(meta, split, _base_cfg(seed, epochs))
    out["none"] = ood_evaluate(model, ood_samples)
    pipeline = sign_pipeline(split, meta, _base_cfg(seed, epochs),
                             desk_sign_cfgs(), _base_cfg(seed, epochs, "sign"))
    out["sign"] = ood_evaluate(pipeline.final_model, ood_samples)
    return out


def run_transfer(seed: int = 0, separation: float = 2.0, epochs: int = 10,
                 sign_cfgs: list[SignConfig] | None = None) -> TransferResult:
    """Transform with a trained conv net, train a fresh MLP on the result."""
    split = blob_split(seed, separation=separation)
    source = cnn_meta(split)
    target = mlp_meta(split)
    cfgs = desk_sign_cfgs((20, 40)) if sign_cfgs is None else sign_cfgs
    return transferability_protocol(source, target, split, cfgs,
                                    _base_cfg(seed, epochs),
                                    _base_cfg(seed, epochs, "sign"))


def run_sign_benefit(seed: int = 0, separation: float = 0.8, noise_sigma: float = 14.0,
                     samples_per_class: int = 30, epochs: int = 30,
                     sign_cfgs: list[SignConfig] | None = None) -> dict:
    """Plain training vs the offline-transform pipeline, same seeds throughout.

    The protocol sits in the scarce-data regime (90 training samples on a
    hard task, baseline ~0.72) where extra label-consistent samples have
    room to move test accuracy, with large validation/test pools so both
    epoch selection and the measured accuracies are fine-grained. The
    transform is kept gentle (gamma 0.002, bounded steps); stronger
    settings trade clean accuracy for the robustness gains the corruption
    protocol measures.
    """
    split = blob_split(seed, separation=separation, samples_per_class=samples_per_class,
                       noise_sigma=noise_sigma, test_per_class=400, val_per_class=200)
    meta = mlp_meta(split)
    none_model, _ = _train_fresh(meta, split, _base_cfg(seed, epochs))
    none_acc = evaluate(none_model, split.test).mean_accuracy
    cfgs = desk_sign_cfgs(gamma=0.002) if sign_cfgs is None else sign_cfgs
    pipeline = sign_pipeline(split, meta, _base_cfg(seed, epochs), cfgs,
                             _base_cfg(seed, epochs, "sign"))
    sign_acc = evaluate(pipeline.final_model, split.test).mean_accuracy
    return {"none": none_acc, "sign": sign_acc}


def run_sign_benefit_cifar(seed: int, cifar_dir: str, subset: int = 4000,
                           test_subset: int = 2000, epochs: int = 10,
                           val_count: int = 5000, val_subset: int = 1000,
                           sign_cfgs: list[SignConfig] | None = None) -> dict:
    """CIFAR-10 variant of the benefit comparison on a training subset."""
    from .datasets import load_cifar10_binary

    full = load_cifar10_binary(cifar_dir, val_count=val_count, split_rng=Rng(seed))
    split = DatasetSplit(train=full.train[:subset], val=full.val[:val_subset],
                         test=full.test[:test_subset], class_names=full.class_names)
    split = normalize(split)
    meta = cnn_meta(split)
    cfg = TrainConfig(epochs=epochs, batch_size=128, learning_rate=0.01, seed=seed)
    none_model, _ = _train_fresh(meta, split, cfg)
    none_acc = evaluate(none_model, split.test).mean_accuracy
    cfgs = desk_sign_cfgs(gamma=0.002) if sign_cfgs is None else sign_cfgs
    pipeline = sign_pipeline(split, meta, cfg, cfgs,
                             TrainConfig(epochs=epochs, batch_size=128,
                                         learning_rate=0.01, seed=seed, strategy="sign"))
    sign_acc = evaluate(pipeline.final_model, split.test).mean_accuracy
    return {"none": none_acc, "sign": sign_acc}


def run_mixup_confidence(seed: int = 0, separation: float = 6.0, noise_sigma: float = 10.0,
                         samples_per_class: int = 40, epochs: int = 40,
                         mixup_alpha: float = 1.0) -> dict:
    """Confidence floor (lowest correct-prediction probability) under mixup.

    Mixup's blended targets keep the model from saturating, so its floor
    sits below the plainly-trained model's. Blending strength here is
    alpha = 1 (uniform lambda): the saturation contrast is the phenomenon
    being demonstrated, and near-0/1 lambdas barely exercise it at this
    scale.
    """
    split = blob_split(seed, separation=separation, samples_per_class=samples_per_class,
                       noise_sigma=noise_sigma, test_per_class=400, val_per_class=100)
    meta = mlp_meta(split)
    floors = {}
    for strategy in ("none", "mixup"):
        cfg = TrainConfig(epochs=epochs, batch_size=32, learning_rate=0.05,
                          strategy=strategy, seed=seed, mixup_alpha=mixup_alpha)
        model, _ = _train_fresh(meta, split, cfg)
        floors[strategy] = min_correct_probability(model, split.test)
    return floors


def run_delta_only(seed: int = 0, separation: float = 10.0,
                   samples_per_class: int = 200, epochs: int = 20) -> dict:
    """Train a fresh model on the accumulated deltas alone.

    Better-than-chance accuracy certifies that the transform's perturbation
    carries class signal, not just noise.
    """
    split = blob_split(seed, separation=separation,
                       samples_per_class=samples_per_class)
    meta = mlp_meta(split)
    source, _ = _train_fresh(meta, split, _base_cfg(seed, epochs))
    cfg = SignConfig(k=5, gamma=1.0)
    delta_split = DatasetSplit(
        train=delta_only_dataset(source, split.train, cfg),
        val=delta_only_dataset(source, split.val, cfg),
        test=delta_only_dataset(source, split.test, cfg),
        class_names=split.class_names, stats=split.stats, normalized=True)
    fresh, _ = _train_fresh(meta, delta_split, _base_cfg(seed, epochs))
    report = evaluate(fresh, delta_split.test)
    return {"delta_accuracy": report.mean_accuracy,
            "chance": 1.0 / split.num_classes,
            "source_accuracy": evaluate(source, split.test).mean_accuracy,
            "report": report}


# -- table printing ----------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return "N/A"
    return f"{value:.4f}"


def print_classify(results: dict[str, EvalReport], out=print):
    classes = [row.label for row in next(iter(results.values())).per_class]
    header = ["method"] + [f"class{c}" for c in classes] + ["mean"]
    out("  ".join(f"{h:>10}" for h in header))
    for method, report in results.items():
        cells = [f"{method:>10}"] + [f"{row.accuracy:>10.4f}" for row in report.per_class]
        cells.append(f"{report.mean_accuracy:>10.4f}")
        out("  ".join(cells))


def print_uncertainty(results: dict[str, dict], out=print):
    out(f"{'method':>10}  {'accuracy':>9} {'p<=0.5 n':>9} {'bucket p':>9} "
        f"{'uncert':>8} {'min corr p':>10}")
    for method, entry in results.items():
        report: EvalReport = entry["report"]
        bucket = report.bucket
        out(f"{method:>10}  {report.mean_accuracy:>9.4f} {bucket.count:>9d} "
            f"{_fmt(bucket.mean_probability):>9} {_fmt(bucket.mean_uncertainty):>8} "
            f"{_fmt(entry['min_correct_probability']):>10}")


def print_robustness(results: dict[str, dict], out=print):
    out(f"{'method':>10}  {'clean':>8}  corruption results (mean +- std)")
    for method, entry in results.items():
        cells = [f"{method:>10}", f"{entry['clean'].mean_accuracy:>8.4f}"]
        for res in entry["corruptions"]:
            cells.append(f"{res.spec.describe()}={res.mean_accuracy:.4f}+-{res.std_accuracy:.1e}")
        out("  ".join(cells))


def print_ood(results: dict[str, EvalReport], out=print):
    for method, report in results.items():
        out(f"method={method}  mean={report.mean_accuracy:.4f}")
        for row in report.per_class:
            out(f"    class{row.label}: n={row.total} acc={row.accuracy:.4f} "
                f"bucket n={row.bucket.count} p={_fmt(row.bucket.mean_probability)}")


def print_transfer(result: TransferResult, out=print):
    header = ["arm"] + [f"class{r.label}" for r in result.control_report.per_class] + ["mean"]
    out("  ".join(f"{h:>10}" for h in header))
    for name, report in (("control", result.control_report),
                         ("transfer", result.transfer_report)):
        cells = [f"{name:>10}"] + [f"{r.accuracy:>10.4f}" for r in report.per_class]
        cells.append(f"{report.mean_accuracy:>10.4f}")
        out("  ".join(cells))


def print_delta_only(result: dict, out=print):
    out(f"source accuracy:      {result['source_accuracy']:.4f}")
    out(f"delta-only accuracy:  {result['delta_accuracy']:.4f}")
    out(f"chance level:         {result['chance']:.4f}")
    ratio = result["delta_accuracy"] / result["chance"]
    out(f"ratio over chance:    {ratio:.2f}x")


def run_recipe(name: str, seed: int = 0, out=print) -> int:
    if name == "classify":
        print_classify(run_classify(seed), out)
    elif name == "uncertainty":
        print_uncertainty(run_uncertainty(seed), out)
    elif name == "robustness":
        print_robustness(run_robustness(seed), out)
    elif name == "ood":
        print_ood(run_ood(seed), out)
    elif name == "transfer":
        print_transfer(run_transfer(seed), out)
    elif name == "delta-only":
        print_delta_only(run_delta_only(seed), out)
    else:
        raise ValueError(f"unknown recipe {name!r}; valid: {', '.join(RECIPES)}")
    return 0
