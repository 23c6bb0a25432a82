"""Staging metrics, recording-level scoring, cross-validation, and the
sequence-length scaling benchmark."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .frontend import NUM_STAGES, STAGE_NAMES
from .model import ModelConfig, SleepStager


@dataclass
class MetricReport:
    accuracy: float
    kappa: float
    macro_f1: float
    mean_sensitivity: float
    mean_specificity: float
    per_class_f1: np.ndarray
    n_scored: int
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "kappa": self.kappa,
            "macro_f1": self.macro_f1,
            "mean_sensitivity": self.mean_sensitivity,
            "mean_specificity": self.mean_specificity,
            "per_class_f1": {STAGE_NAMES[c]: float(v)
                             for c, v in enumerate(self.per_class_f1)},
            "n_scored": self.n_scored,
            "flags": list(self.flags),
        }


def confusion_matrix(reference: np.ndarray, predicted: np.ndarray,
                     n_classes: int = NUM_STAGES) -> np.ndarray:
    """Counts[r, p] over scored epochs; rows = reference, cols = predicted."""
    reference = np.asarray(reference, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if reference.shape != predicted.shape:
        raise ValueError("reference/predicted length mismatch")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (reference, predicted), 1)
    return cm


def compute_metrics(cm: np.ndarray) -> MetricReport:
    """Accuracy, Cohen's kappa, macro F1, and macro sensitivity/specificity
    from a confusion matrix."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    flags = []
    n = cm.shape[0]
    ref_marginal = cm.sum(axis=1)
    pred_marginal = cm.sum(axis=0)

    accuracy = np.trace(cm) / total

    p_o = accuracy
    p_e = float(ref_marginal @ pred_marginal) / (total * total)
    if abs(1.0 - p_e) < 1e-15:
        kappa = 0.0
        flags.append("kappa_degenerate")
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)

    f1 = np.zeros(n)
    sens = np.zeros(n)
    spec = np.zeros(n)
    for c in range(n):
        tp = cm[c, c]
        fn = ref_marginal[c] - tp
        fp = pred_marginal[c] - tp
        tn = total - tp - fn - fp
        if ref_marginal[c] == 0 and pred_marginal[c] == 0:
            f1[c] = 0.0
            flags.append(f"class_absent:{c}")
        else:
            f1[c] = 2 * tp / max(2 * tp + fp + fn, 1e-300)
        sens[c] = tp / ref_marginal[c] if ref_marginal[c] > 0 else 0.0
        spec[c] = tn / (tn + fp) if (tn + fp) > 0 else 0.0

    return MetricReport(
        accuracy=float(accuracy),
        kappa=float(kappa),
        macro_f1=float(f1.mean()),
        mean_sensitivity=float(sens.mean()),
        mean_specificity=float(spec.mean()),
        per_class_f1=f1,
        n_scored=int(total),
        flags=flags,
    )


def score_recording(model: SleepStager, images: np.ndarray,
                    stride: int | None = None,
                    batch_size: int = 8) -> np.ndarray:
    """Predict one stage per epoch of a recording.

    Slides L-length windows with the given stride (default L, i.e. disjoint);
    overlapping windows average their posteriors before the argmax.
    Recordings shorter than L are right-padded with the final epoch; padded
    positions are dropped from the output.
    """
    length = model.config.sequence_length
    stride = length if stride is None else stride
    n_epochs = images.shape[0]
    padded = images
    if n_epochs < length:
        pad = np.repeat(images[-1:], length - n_epochs, axis=0)
        padded = np.concatenate([images, pad], axis=0)
    n_padded = padded.shape[0]
    starts = list(range(0, n_padded - length + 1, stride))
    if starts[-1] != n_padded - length:
        starts.append(n_padded - length)  # cover the tail

    dtype = next(model.parameters()).dtype
    posterior_sum = np.zeros((n_padded, model.config.n_classes))
    counts = np.zeros(n_padded)
    model.eval()
    with torch.no_grad():
        for i in range(0, len(starts), batch_size):
            chunk = starts[i : i + batch_size]
            batch = torch.as_tensor(
                np.stack([padded[s : s + length] for s in chunk]), dtype=dtype)
            probs = model(batch).cpu().numpy()
            for j, s in enumerate(chunk):
                posterior_sum[s : s + length] += probs[j]
                counts[s : s + length] += 1
    mean_posterior = posterior_sum / counts[:, None]
    return np.argmax(mean_posterior[:n_epochs], axis=1)


def pooled_report(cms: list[np.ndarray]) -> MetricReport:
    """Metrics of the epoch-level pooled confusion matrix."""
    return compute_metrics(np.sum(cms, axis=0))


def loso_folds(subjects: list[str]) -> list[tuple[list[str], list[str]]]:
    """Leave-one-subject-out folds as (train_subjects, test_subjects)."""
    unique = sorted(set(subjects))
    if len(unique) < 2:
        raise ValueError("LOSO cross-validation needs at least 2 subjects")
    return [([s for s in unique if s != test], [test]) for test in unique]


def split_folds(subjects: list[str], train_fraction: float,
                rng: np.random.Generator) -> list[tuple[list[str], list[str]]]:
    """A single shuffled train/test split of subjects."""
    unique = sorted(set(subjects))
    order = list(rng.permutation(unique))
    n_train = max(1, int(round(train_fraction * len(unique))))
    n_train = min(n_train, len(unique) - 1)
    return [(sorted(order[:n_train]), sorted(order[n_train:]))]


def check_fold_partition(folds: list[tuple[list[str], list[str]]]) -> None:
    for train, test in folds:
        overlap = set(train) & set(test)
        if overlap:
            raise ValueError(f"subjects in both train and test: {overlap}")


@dataclass
class FoldReport:
    test_subjects: list
    cm: np.ndarray
    report: MetricReport
    per_recording_accuracy: dict


def evaluate_fold(model: SleepStager, recordings, stride: int | None = None
                  ) -> tuple[np.ndarray, dict]:
    """Score recordings with a frozen model; returns the pooled confusion
    matrix and per-recording accuracies (valid epochs only)."""
    cm = np.zeros((model.config.n_classes, model.config.n_classes),
                  dtype=np.int64)
    per_recording = {}
    for rec in recordings:
        pred = score_recording(model, rec.images, stride=stride)
        m = rec.valid_mask
        cm += confusion_matrix(rec.stages[m], pred[m],
                               model.config.n_classes)
        per_recording[rec.recording_id] = float(
            (pred[m] == rec.stages[m]).mean()) if m.any() else float("nan")
    return cm, per_recording


def cross_validate(recordings, protocol: str, build_and_train,
                   repetitions: int = 1, train_fraction: float = 0.7,
                   seed: int = 0, stride: int | None = None) -> dict:
    """Subject-partitioned cross-validation with confusion-matrix pooling.

    ``build_and_train(train_recs, repetition_seed)`` must return a trained
    model (carving its own validation subjects out of ``train_recs``).
    Folds partition subjects (all recordings of a subject
    stay together). Repetitions reseed and the aggregate reports the
    mean and standard deviation of the pooled metrics.
    """
    subjects = [rec.subject_id for rec in recordings]
    by_subject = {}
    for rec in recordings:
        by_subject.setdefault(rec.subject_id, []).append(rec)

    rep_metrics = []
    rep_folds = []
    for rep in range(repetitions):
        rng = np.random.default_rng([seed, rep])
        if protocol == "loso":
            folds = loso_folds(subjects)
        elif protocol == "split":
            folds = split_folds(subjects, train_fraction, rng)
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        check_fold_partition(folds)

        fold_reports = []
        cms = []
        for train_subjects, test_subjects in folds:
            train_recs = [r for s in train_subjects for r in by_subject[s]]
            test_recs = [r for s in test_subjects for r in by_subject[s]]
            model = build_and_train(train_recs, [seed, rep])
            cm, per_rec = evaluate_fold(model, test_recs, stride=stride)
            cms.append(cm)
            fold_reports.append(FoldReport(
                test_subjects=list(test_subjects), cm=cm,
                report=compute_metrics(cm),
                per_recording_accuracy=per_rec))
        rep_metrics.append(pooled_report(cms))
        rep_folds.append(fold_reports)

    keys = ["accuracy", "kappa", "macro_f1", "mean_sensitivity",
            "mean_specificity"]
    aggregate = {
        key: {
            "mean": float(np.mean([getattr(m, key) for m in rep_metrics])),
            "std": float(np.std([getattr(m, key) for m in rep_metrics])),
        }
        for key in keys
    }
    return {"aggregate": aggregate, "repetitions": rep_metrics,
            "folds": rep_folds}


@dataclass
class BenchmarkRow:
    variant: str
    L: int
    B: int
    K: int
    steps: int
    wall_clock_s: float
    seq_steps: int
    ratio_vs_flat20: float = float("nan")


def benchmark_scaling(configs: list[ModelConfig], steps: int = 1000,
                      batch_size: int = 8, n_frames: int = 29,
                      seed: int = 0) -> list[BenchmarkRow]:
    """Wall-clock for `steps` training steps per config, plus the analytic
    sequential step count, normalized against the flat L=20 row if present.

    Runs strictly serially on synthetic batches to keep timing honest.
    """
    keys = set()
    for cfg in configs:
        key = (cfg.variant, cfg.sequence_length,
               cfg.fold_spec.B, cfg.fold_spec.K)
        if key in keys:
            raise ValueError(f"duplicate benchmark config {key}")
        keys.add(key)

    rows = []
    for cfg in configs:
        torch.manual_seed(seed)
        model = SleepStager(cfg)
        model.train()
        opt = torch.optim.Adam(model.parameters(), lr=1e-4)
        gen = torch.Generator().manual_seed(seed)
        images = torch.randn(batch_size, cfg.sequence_length, n_frames,
                             cfg.n_bins, generator=gen)
        labels = torch.randint(0, cfg.n_classes,
                               (batch_size, cfg.sequence_length),
                               generator=gen)
        # warm-up step outside the timer
        model.loss(images, labels).backward()
        opt.zero_grad()
        t0 = time.perf_counter()
        for _ in range(steps):
            opt.zero_grad()
            loss = model.loss(images, labels)
            loss.backward()
            opt.step()
        elapsed = time.perf_counter() - t0
        spec = cfg.fold_spec
        seq_steps = model.last_sequential_steps
        rows.append(BenchmarkRow(
            variant=cfg.variant, L=spec.L, B=spec.B, K=spec.K, steps=steps,
            wall_clock_s=elapsed, seq_steps=seq_steps))

    baseline = next((r for r in rows if r.variant == "flat" and r.L == 20),
                    None)
    if baseline is not None:
        for r in rows:
            r.ratio_vs_flat20 = r.wall_clock_s / baseline.wall_clock_s
    return rows


def write_benchmark_csv(rows: list[BenchmarkRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "L", "B", "K", "steps", "wall_clock_s",
                         "seq_steps", "ratio_vs_flat20"])
        for r in rows:
            writer.writerow([r.variant, r.L, r.B, r.K, r.steps,
                             f"{r.wall_clock_s:.4f}", r.seq_steps,
                             f"{r.ratio_vs_flat20:.4f}"])
