"""Measurement protocols: accuracy, confidence buckets, corruption
robustness, out-of-distribution tables, transfer comparison, 2D feature
projection.

All report quantities are recomputable from the emitted per-sample CSV;
``recompute_report`` does exactly that and the tests assert equality.
The low-confidence bucket is: prediction correct AND top-class
probability <= 0.5. Uncertainty is the learned per-class noise scale
averaged over classes (absent for models without an uncertainty head).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import CorruptionSpec, corrupt
from .datasets import DatasetSplit, NormStats, Sample, normalize_sample
from .nn import Model, build_model
from .sign import SignConfig
from .tensor import Rng, Tensor
from .training import TrainConfig, train

_EVAL_SEED = 0x5EED_E7A1


@dataclass(frozen=True)
class SampleScore:
    index: int
    true_label: int
    predicted: int
    top_probability: float
    uncertainty: float | None

    @property
    def correct(self) -> bool:
        return self.true_label == self.predicted


@dataclass
class Bucket:
    """Correct predictions with top-class probability <= 0.5."""

    count: int = 0
    mean_probability: float | None = None
    mean_uncertainty: float | None = None


@dataclass
class ClassRow:
    label: int
    total: int
    correct: int
    accuracy: float
    bucket: Bucket


@dataclass
class CorruptionResult:
    spec: CorruptionSpec
    mean_accuracy: float
    std_accuracy: float
    accuracies: tuple[float, ...]


@dataclass
class EvalReport:
    per_class: list[ClassRow]
    mean_accuracy: float
    bucket: Bucket
    min_correct_probability: float | None
    corruptions: list[CorruptionResult] = field(default_factory=list)

    @property
    def per_class_accuracy(self) -> list[float]:
        return [row.accuracy for row in self.per_class]

    def to_json(self, path: str):
        doc = {
            "mean_accuracy": self.mean_accuracy,
            "min_correct_probability": self.min_correct_probability,
            "bucket": _bucket_doc(self.bucket),
            "per_class": [{
                "label": row.label, "total": row.total, "correct": row.correct,
                "accuracy": row.accuracy, "bucket": _bucket_doc(row.bucket),
            } for row in self.per_class],
            "corruptions": [{
                "spec": res.spec.describe(), "mean_accuracy": res.mean_accuracy,
                "std_accuracy": res.std_accuracy, "accuracies": list(res.accuracies),
            } for res in self.corruptions],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _bucket_doc(bucket: Bucket) -> dict:
    return {"count": bucket.count, "mean_probability": bucket.mean_probability,
            "mean_uncertainty": bucket.mean_uncertainty}


# -- scoring -------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def score_samples(model: Model, samples: list[Sample], mc_samples: int = 20,
                  rng: Rng | None = None, batch_size: int = 256) -> list[SampleScore]:
    """Per-sample predictions and probabilities, deterministic by default.

    For uncertainty-head models the probability is the mean softmax over
    ``mc_samples`` noise draws and the uncertainty the mean learned sigma.
    """
    if not samples:
        raise ValueError("empty sample list")
    rng = rng if rng is not None else Rng(_EVAL_SEED)
    scores: list[SampleScore] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        xb = np.stack([s.image.data for s in chunk])
        tape = model.forward(Tensor._wrap(xb), train=False)
        logits = tape.output.value.data
        if model.has_uncertainty_head:
            sigma = tape.taps["sigma"].value.data
            eps = rng.child("eps", start).normal((mc_samples,) + logits.shape)
            probs = _softmax((logits[None] + sigma[None] * eps)
                             .reshape(-1, logits.shape[1]))
            probs = probs.reshape(mc_samples, *logits.shape).mean(axis=0)
            uncert = sigma.mean(axis=1)
        else:
            probs = _softmax(logits)
            uncert = None
        preds = probs.argmax(axis=1)
        for j, s in enumerate(chunk):
            scores.append(SampleScore(
                index=start + j, true_label=s.label, predicted=int(preds[j]),
                top_probability=float(probs[j, preds[j]]),
                uncertainty=float(uncert[j]) if uncert is not None else None))
    return scores


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _bucket_of(scores: list[SampleScore]) -> Bucket:
    hits = [s for s in scores if s.correct and s.top_probability <= 0.5]
    uncert = [s.uncertainty for s in hits if s.uncertainty is not None]
    return Bucket(count=len(hits),
                  mean_probability=_mean([s.top_probability for s in hits]),
                  mean_uncertainty=_mean(uncert))


def _aggregate(scores: list[SampleScore], labels: list[int]) -> EvalReport:
    per_class = []
    for label in labels:
        rows = [s for s in scores if s.true_label == label]
        correct = sum(1 for s in rows if s.correct)
        per_class.append(ClassRow(label=label, total=len(rows), correct=correct,
                                  accuracy=correct / len(rows) if rows else 0.0,
                                  bucket=_bucket_of(rows)))
    total_correct = sum(1 for s in scores if s.correct)
    correct_probs = [s.top_probability for s in scores if s.correct]
    return EvalReport(per_class=per_class,
                      mean_accuracy=total_correct / len(scores),
                      bucket=_bucket_of(scores),
                      min_correct_probability=min(correct_probs) if correct_probs else None)


def evaluate(model: Model, samples: list[Sample], mc_samples: int = 20,
             rng: Rng | None = None) -> EvalReport:
    """Accuracy per class and mean, plus the low-confidence bucket."""
    scores = score_samples(model, samples, mc_samples, rng)
    return _aggregate(scores, list(range(model.num_classes)))


def min_correct_probability(model: Model, samples: list[Sample], mc_samples: int = 20,
                            rng: Rng | None = None) -> float | None:
    """Lowest top-class probability among correctly predicted samples.

    None when nothing is predicted correctly.
    """
    scores = score_samples(model, samples, mc_samples, rng)
    probs = [s.top_probability for s in scores if s.correct]
    return min(probs) if probs else None


def ood_evaluate(model: Model, ood_samples: list[Sample], mc_samples: int = 20,
                 rng: Rng | None = None) -> EvalReport:
    """Same schema as evaluate, restricted to the classes present.

    Empty buckets stay visible as count 0 with absent statistics.
    """
    scores = score_samples(model, ood_samples, mc_samples, rng)
    present = sorted({s.label for s in ood_samples})
    return _aggregate(scores, present)


# -- corruption robustness -------------------------------------------------------


def robustness_suite(model: Model, test_samples: list[Sample],
                     specs: list[CorruptionSpec], repeats: int, rng: Rng,
                     stats: NormStats | None = None,
                     mc_samples: int = 20) -> list[CorruptionResult]:
    """Accuracy under repeated independent corruption draws, mean +- std.

    ``test_samples`` must be raw-domain; corruption happens before the
    per-channel normalization given by ``stats``. The reported std is the
    population standard deviation over repeats.
    """
    if any(not s.raw for s in test_samples):
        raise ValueError("robustness_suite needs raw-domain test samples")
    results = []
    n = len(test_samples)
    for si, spec in enumerate(specs):
        counts = []
        for rep in range(repeats):
            rep_rng = rng.child("corrupt", si, rep)
            corrupted = [corrupt(s, spec, rep_rng.child(i))
                         for i, s in enumerate(test_samples)]
            if stats is not None:
                corrupted = [normalize_sample(s, stats) for s in corrupted]
            scores = score_samples(model, corrupted, mc_samples)
            counts.append(sum(1 for s in scores if s.correct))
        # one division from integer totals: identical repeats reproduce the
        # single-run accuracy bit-exactly
        mean = float(sum(counts)) / float(repeats * n)
        accs = tuple(c / n for c in counts)
        std = float(np.sqrt(np.mean([(a - mean) ** 2 for a in accs])))
        results.append(CorruptionResult(spec=spec, mean_accuracy=mean,
                                        std_accuracy=std, accuracies=accs))
    return results


# -- transferability ---------------------------------------------------------------


@dataclass
class TransferResult:
    transfer_report: EvalReport
    control_report: EvalReport


def transferability_protocol(source_meta: dict, target_meta: dict, split: DatasetSplit,
                             sign_cfgs: list[SignConfig], pretrain_cfg: TrainConfig,
                             final_cfg: TrainConfig, mc_samples: int = 20) -> TransferResult:
    """Train a target architecture on samples transformed by a different source.

    The control arm trains the identical target on the plain split with
    identical seeds, so with no transform configs the two reports match
    bit-exactly.
    """
    from dataclasses import replace

    from .training import sign_pipeline  # local import keeps module load acyclic

    pipeline = sign_pipeline(split, source_meta, pretrain_cfg, sign_cfgs, final_cfg,
                             final_meta=target_meta)
    control = build_model(target_meta, rng=Rng(final_cfg.seed).child("init"))
    control_split = replace_train(
        pipeline.augmented_split, [s for s in pipeline.augmented_split.train
                                   if s.provenance is None])
    # identical seeds and loop; the checkpoint marker only satisfies the
    # strategy precondition and has no effect on training dynamics
    control_report = train(control, control_split, replace(final_cfg, source_checkpoint="<control>"))
    control.set_params(control_report.best_params)
    test = pipeline.augmented_split.test
    return TransferResult(
        transfer_report=evaluate(pipeline.final_model, test, mc_samples),
        control_report=evaluate(control, test, mc_samples))


def replace_train(split: DatasetSplit, train_samples: list[Sample]) -> DatasetSplit:
    return DatasetSplit(train=train_samples, val=split.val, test=split.test,
                        class_names=split.class_names, stats=split.stats,
                        normalized=split.normalized)


# -- feature projection ---------------------------------------------------------


@dataclass
class ProjectionExport:
    coordinates: np.ndarray  # (N, 2)
    labels: list[int]
    split_tags: list[str]
    explained_variance: tuple[float, float]

    def to_csv(self, path: str):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "class", "split"])
            for (x, y), label, tag in zip(self.coordinates, self.labels, self.split_tags):
                writer.writerow([repr(float(x)), repr(float(y)), label, tag])


def _power_top2(cov: np.ndarray, tol: float = 1e-9, max_iter: int = 10_000):
    """Leading two eigenpairs by power iteration with deflation.

    Deterministic start vector; sign fixed so the first nonzero loading is
    positive.
    """
    dim = cov.shape[0]
    comps, variances = [], []
    work = cov.copy()
    for _ in range(2):
        vec = np.ones(dim) / math.sqrt(dim)
        eig = 0.0
        for _ in range(max_iter):
            nxt = work @ vec
            norm = np.linalg.norm(nxt)
            if norm < tol:  # degenerate direction: no variance left
                nxt = vec
                eig = 0.0
                break
            nxt /= norm
            eig = float(nxt @ work @ nxt)
            if np.linalg.norm(nxt - vec) < tol or np.linalg.norm(nxt + vec) < tol:
                vec = nxt
                break
            vec = nxt
        # "first nonzero loading positive", where nonzero means above the
        # iteration's own convergence noise
        nz = np.nonzero(np.abs(vec) > 1e-6)[0]
        if nz.size and vec[nz[0]] < 0:
            vec = -vec
        comps.append(vec)
        variances.append(max(eig, 0.0))
        work = work - variances[-1] * np.outer(vec, vec)
    return np.stack(comps, axis=1), (variances[0], variances[1])


def project_features(model: Model, samples: list[Sample], tap: str = "pre-logits",
                     split_tag: str = "test", batch_size: int = 256) -> ProjectionExport:
    """Tapped activations centered and projected onto the top-2 principal axes."""
    if len(samples) < 3:
        raise ValueError(f"projection needs at least 3 samples, got {len(samples)}")
    feats = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        xb = np.stack([s.image.data for s in chunk])
        tape = model.forward(Tensor._wrap(xb), train=False)
        if tap not in tape.taps:
            raise ValueError(f"model has no tap {tap!r}; available: {sorted(tape.taps)}")
        node = tape.taps[tap]
        feats.append(node.value.data.reshape(len(chunk), -1))
    matrix = np.concatenate(feats, axis=0)
    centered = matrix - matrix.mean(axis=0)
    cov = centered.T @ centered / centered.shape[0]
    comps, variances = _power_top2(cov)
    coords = centered @ comps
    if not np.all(np.isfinite(coords)):
        raise ArithmeticError("projection produced non-finite coordinates")
    return ProjectionExport(coordinates=coords, labels=[s.label for s in samples],
                            split_tags=[split_tag] * len(samples),
                            explained_variance=variances)


# -- per-sample CSV and recomputation ---------------------------------------------


def write_scores_csv(scores: list[SampleScore], path: str, split_tag: str = "test"):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "true", "predicted", "top_prob", "uncertainty", "split"])
        for s in scores:
            writer.writerow([s.index, s.true_label, s.predicted, repr(s.top_probability),
                             "" if s.uncertainty is None else repr(s.uncertainty), split_tag])


def read_scores_csv(path: str) -> list[SampleScore]:
    scores = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            scores.append(SampleScore(
                index=int(row["sample_id"]), true_label=int(row["true"]),
                predicted=int(row["predicted"]), top_probability=float(row["top_prob"]),
                uncertainty=float(row["uncertainty"]) if row["uncertainty"] else None))
    return scores


def recompute_report(csv_path: str, num_classes: int) -> EvalReport:
    """Rebuild the full report from the per-sample CSV alone."""
    return _aggregate(read_scores_csv(csv_path), list(range(num_classes)))
