"""Sequence sampling, optimization, validation cadence, and early stopping."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .io import RecordingFeatures, save_checkpoint
from .model import SleepStager

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; the best checkpoint survives."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    minibatch_size: int = 8
    max_train_epochs: int = 10
    validate_every: int = 100
    patience: int = 50
    grad_clip: float = 5.0
    early_stopping: bool = True
    max_steps: int = 0  # 0 = no cap
    seed: int = 0

    def __post_init__(self):
        positive = ["learning_rate", "beta1", "beta2", "eps",
                    "minibatch_size", "max_train_epochs", "validate_every"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


class SequenceSampler:
    """Maximal-overlap sequence windows over a set of recordings.

    Yields every start index 0..R-L per recording (shift of one epoch);
    recordings shorter than L are skipped with a warning. The global index
    pool is reshuffled each pass with the seeded RNG, so batch order is a
    pure function of the seed.
    """

    def __init__(self, recordings: list[RecordingFeatures], length: int,
                 seed: int = 0):
        self.recordings = recordings
        self.length = length
        self.pool = []
        for r_idx, rec in enumerate(recordings):
            if rec.n_epochs < length:
                logger.warning(
                    "skipping recording %s: %d epochs < sequence length %d",
                    rec.recording_id, rec.n_epochs, length)
                continue
            self.pool.extend((r_idx, s)
                             for s in range(rec.n_epochs - length + 1))
        self.rng = np.random.default_rng(seed)

    @property
    def n_sequences(self) -> int:
        return len(self.pool)

    def epoch_batches(self, batch_size: int):
        """One full shuffled pass over the pool, in batches."""
        order = self.rng.permutation(len(self.pool))
        for i in range(0, len(order) - batch_size + 1, batch_size):
            yield [self.pool[j] for j in order[i:i + batch_size]]


def make_batch(recordings: list[RecordingFeatures], items, length: int,
               dtype=torch.float32):
    images = np.stack([recordings[r].images[s:s + length]
                       for r, s in items])
    labels = np.stack([recordings[r].stages[s:s + length]
                       for r, s in items])
    mask = np.stack([recordings[r].valid_mask[s:s + length]
                     for r, s in items])
    return (torch.as_tensor(images, dtype=dtype),
            torch.as_tensor(labels, dtype=torch.int64),
            torch.as_tensor(mask, dtype=torch.bool))


def validation_accuracy(model: SleepStager,
                        recordings: list[RecordingFeatures],
                        batch_size: int = 8) -> float:
    """Accuracy over all valid epochs, non-overlapping stride-L windows."""
    from .evaluation import score_recording  # local import to avoid a cycle

    correct = total = 0
    for rec in recordings:
        pred = score_recording(model, rec.images, batch_size=batch_size)
        m = rec.valid_mask
        correct += int((pred[m] == rec.stages[m]).sum())
        total += int(m.sum())
    return correct / max(total, 1)


@dataclass
class TrainResult:
    best_accuracy: float
    best_step: int
    steps_run: int
    stopped_early: bool
    aborted: bool = False
    history: list = field(default_factory=list)  # (step, train_loss, val_acc)


def make_optimizer(model, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                            betas=(config.beta1, config.beta2),
                            eps=config.eps)


def train(model: SleepStager, train_recs: list[RecordingFeatures],
          val_recs: list[RecordingFeatures], config: TrainConfig,
          run_dir=None) -> TrainResult:
    """Adam training with periodic validation and best-checkpoint retention.

    Stops after `patience` consecutive validations without improvement
    (when early stopping is on), after `max_train_epochs` full passes, or at
    `max_steps` if set. With run_dir set, writes the resolved config, a
    metrics CSV (one row per validation), best/last checkpoints, and a text
    run report.
    """
    torch.manual_seed(config.seed)
    sampler = SequenceSampler(train_recs, model.config.sequence_length,
                              seed=config.seed)
    if sampler.n_sequences == 0:
        raise ValueError("no usable training sequences")
    optimizer = make_optimizer(model, config)
    dtype = next(model.parameters()).dtype

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "config.json", "w") as fh:
            json.dump({"model": model.config.to_dict(),
                       "train": config.to_dict()}, fh, indent=2,
                      sort_keys=True)
        metrics_fh = open(run_dir / "metrics.csv", "w")
        metrics_fh.write("step,train_loss,val_accuracy,seconds_per_step\n")
    else:
        metrics_fh = None

    best_acc, best_step = -1.0, 0
    bad_validations = 0
    step = 0
    running_loss, running_n = 0.0, 0
    window_start = time.perf_counter()
    stop = False
    stopped_early = aborted = False
    history = []

    def checkpoint(name: str):
        if run_dir is not None:
            save_checkpoint(run_dir / name, model, optimizer, step=step,
                            best_metric=best_acc if best_acc >= 0 else None)

    try:
        for _ in range(config.max_train_epochs):
            for items in sampler.epoch_batches(config.minibatch_size):
                images, labels, mask = make_batch(
                    train_recs, items, model.config.sequence_length, dtype)
                model.train()
                optimizer.zero_grad()
                loss = model.loss(images, labels, mask)
                if not torch.isfinite(loss):
                    aborted = True
                    checkpoint("last.ckpt")
                    raise TrainingDiverged(
                        f"non-finite loss at step {step + 1}; best "
                        f"checkpoint from step {best_step} retained")
                loss.backward()
                if config.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(model.parameters(),
                                                   config.grad_clip)
                optimizer.step()
                step += 1
                running_loss += float(loss.detach())
                running_n += 1

                if step % config.validate_every == 0:
                    acc = validation_accuracy(model, val_recs,
                                              config.minibatch_size)
                    mean_loss = running_loss / max(running_n, 1)
                    sec = ((time.perf_counter() - window_start)
                           / config.validate_every)
                    history.append((step, mean_loss, acc))
                    if metrics_fh:
                        metrics_fh.write(
                            f"{step},{mean_loss:.6f},{acc:.6f},{sec:.4f}\n")
                        metrics_fh.flush()
                    running_loss, running_n = 0.0, 0
                    window_start = time.perf_counter()
                    if acc > best_acc:
                        best_acc, best_step = acc, step
                        bad_validations = 0
                        checkpoint("best.ckpt")
                    else:
                        bad_validations += 1
                        if (config.early_stopping
                                and bad_validations >= config.patience):
                            stopped_early = stop = True
                if config.max_steps and step >= config.max_steps:
                    stop = True
                if stop:
                    break
            if stop:
                break
        checkpoint("last.ckpt")
    finally:
        if metrics_fh:
            metrics_fh.close()

    if best_acc < 0:  # no validation ever ran; keep the final state
        best_acc = validation_accuracy(model, val_recs,
                                       config.minibatch_size)
        best_step = step
        checkpoint("best.ckpt")

    result = TrainResult(best_accuracy=best_acc, best_step=best_step,
                         steps_run=step, stopped_early=stopped_early,
                         aborted=aborted, history=history)
    if run_dir is not None:
        with open(run_dir / "report.txt", "w") as fh:
            fh.write(
                f"steps run:        {result.steps_run}\n"
                f"best val acc:     {result.best_accuracy:.4f}\n"
                f"best step:        {result.best_step}\n"
                f"stopped early:    {result.stopped_early}\n"
                f"train sequences:  {sampler.n_sequences}\n")
    return result
