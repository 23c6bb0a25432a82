"""Command-line surface: synth, prepare, train, evaluate, benchmark, predict."""

from __future__ import annotations

import csv
import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import config as cfglib
from . import evaluation, io, synth, training
from .frontend import STAGE_NAMES
from .model import ModelConfig, build_model, parameter_census

RUN_ROOT_ENV = "SLEEPFOLD_RUN_ROOT"


def _run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


@click.group()
def main():
    """Whole-cycle long-sequence sleep staging toolkit."""


@main.command(name="synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--preset", type=click.Choice(["tiny", "small"]),
              default="tiny", show_default=True)
@click.option("-o", "--override", "overrides", multiple=True,
              help="synth config override, e.g. -o seed=3")
def synth_cmd(out_dir, preset, overrides):
    """Generate a synthetic dataset (manifest + signal/label files)."""
    preset_dict = dict(synth.TINY_PRESET if preset == "tiny"
                       else synth.SMALL_PRESET)
    for item in overrides:
        key, _, raw = item.partition("=")
        if not raw:
            raise click.ClickException(f"override {item!r} is not key=value")
        import yaml
        preset_dict[key.strip()] = yaml.safe_load(raw)
    try:
        cfg = synth.SynthConfig(**preset_dict)
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"invalid synth config: {exc}")
    manifest = synth.write_dataset(cfg, out_dir)
    n = cfg.n_subjects * cfg.recordings_per_subject
    click.echo(f"wrote {n} recordings and {manifest}")


@main.command(name="prepare")
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--zscore", is_flag=True, default=False,
              help="per-recording z-score of spectrograms")
def prepare_cmd(manifest, out_dir, zscore):
    """Convert raw recordings from a manifest into feature archives."""
    try:
        summary = io.prepare_dataset(manifest, out_dir, zscore=zscore)
    except io.ArchiveError as exc:
        raise click.ClickException(str(exc))
    click.echo(f"prepared {len(summary['prepared'])} recordings, "
               f"{summary['epochs']} epochs ({summary['masked']} masked)")
    for rec_id, err in summary["failed"].items():
        click.echo(f"FAILED {rec_id}: {err}", err=True)
    if summary["failed"]:
        sys.exit(1)
    if not summary["prepared"]:
        raise click.ClickException("no recordings prepared")


def _split_by_subject(recordings, val_subjects: int, seed: int):
    subjects = sorted({r.subject_id for r in recordings})
    if len(subjects) <= val_subjects:
        raise click.ClickException(
            f"cannot hold out {val_subjects} of {len(subjects)} subjects")
    rng = np.random.default_rng(seed)
    held = set(rng.permutation(subjects)[:val_subjects])
    train = [r for r in recordings if r.subject_id not in held]
    val = [r for r in recordings if r.subject_id in held]
    return train, val


@main.command(name="train")
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--run-dir", type=click.Path(), default=None,
              help=f"default: $" + RUN_ROOT_ENV + "/<name>")
@click.option("--name", default="run", show_default=True)
@click.option("--config", "config_file", type=click.Path(exists=True),
              default=None, help="YAML run config")
@click.option("-o", "--override", "overrides", multiple=True,
              help="dotted override, e.g. -o model.variant=flat")
@click.option("--variant", type=click.Choice(["folded", "flat"]),
              default=None, help="shorthand for -o model.variant=...")
@click.option("--init-from", "init_from", type=click.Path(exists=True),
              default=None, help="checkpoint for pretrained initialization")
@click.option("--init-mode", type=click.Choice(["all", "compatible"]),
              default="all", show_default=True)
@click.option("--workers", type=int, default=1, show_default=True,
              help="data-loading workers; 1 is the deterministic mode")
def train_cmd(features, run_dir, name, config_file, overrides, variant,
              init_from, init_mode, workers):
    """Train a folded or flat model on prepared features."""
    try:
        cfg = cfglib.load_run_config(config_file, list(overrides))
        if variant is not None:
            cfg["model"]["variant"] = variant
        model_cfg = cfglib.model_config(cfg)
        train_cfg = cfglib.train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"invalid config: {exc}")
    if workers != 1:
        click.echo("note: only single-worker loading is implemented; "
                   "running deterministically", err=True)

    recordings = io.load_feature_dir(features)
    train_recs, val_recs = _split_by_subject(
        recordings, cfg["data"]["val_subjects"], train_cfg.seed)

    model = build_model(model_cfg, seed=train_cfg.seed)
    if init_from is not None:
        try:
            ckpt = io.load_checkpoint(init_from)
            fresh = io.init_from_pretrained(model, ckpt, strictness=init_mode)
        except io.ArchiveError as exc:
            raise click.ClickException(str(exc))
        click.echo(f"initialized from {init_from}; "
                   f"{len(fresh)} fresh tensors")
        for tensor_name in fresh:
            click.echo(f"  fresh: {tensor_name}")

    run_dir = Path(run_dir) if run_dir else _run_root() / name
    try:
        result = training.train(model, train_recs, val_recs, train_cfg,
                                run_dir=run_dir)
    except training.TrainingDiverged as exc:
        raise click.ClickException(str(exc))
    click.echo(f"best validation accuracy {result.best_accuracy:.4f} "
               f"at step {result.best_step} ({result.steps_run} steps); "
               f"run dir {run_dir}")


@main.command(name="evaluate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--protocol", type=click.Choice(["loso", "split", "all"]),
              default="all", show_default=True,
              help="fold layout for reporting; 'all' pools everything")
@click.option("--train-fraction", type=float, default=0.7, show_default=True)
@click.option("--stride", type=int, default=0, show_default=True,
              help="scoring window stride; 0 = model sequence length")
@click.option("--plots/--no-plots", default=True, show_default=True)
def evaluate_cmd(checkpoint, features, out_dir, protocol, train_fraction,
                 stride, plots):
    """Score recordings with a frozen checkpoint and emit metric reports."""
    try:
        ckpt = io.load_checkpoint(checkpoint)
    except io.ArchiveError as exc:
        raise click.ClickException(str(exc))
    model = build_model(ModelConfig(**ckpt.config))
    io.restore_model(model, ckpt)
    recordings = io.load_feature_dir(features)
    stride = stride or None

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_subject = {}
    for rec in recordings:
        by_subject.setdefault(rec.subject_id, []).append(rec)
    if protocol == "loso":
        folds = evaluation.loso_folds([r.subject_id for r in recordings])
    elif protocol == "split":
        rng = np.random.default_rng(0)
        folds = evaluation.split_folds([r.subject_id for r in recordings],
                                       train_fraction, rng)
    else:
        folds = [([], sorted(by_subject))]

    cms = []
    all_per_rec = {}
    for i, (_, test_subjects) in enumerate(folds):
        test_recs = [r for s in test_subjects for r in by_subject[s]]
        cm, per_rec = evaluation.evaluate_fold(model, test_recs,
                                               stride=stride)
        cms.append(cm)
        all_per_rec.update(per_rec)
        report = evaluation.compute_metrics(cm)
        with open(out_dir / f"fold_{i:03d}.json", "w") as fh:
            json.dump({"test_subjects": test_subjects,
                       **report.as_dict()}, fh, indent=2, sort_keys=True)

    pooled_cm = np.sum(cms, axis=0)
    pooled = evaluation.compute_metrics(pooled_cm)
    with open(out_dir / "aggregate.json", "w") as fh:
        json.dump(pooled.as_dict(), fh, indent=2, sort_keys=True)
    np.savetxt(out_dir / "confusion_matrix.csv", pooled_cm,
               fmt="%d", delimiter=",",
               header=",".join(STAGE_NAMES), comments="")
    with open(out_dir / "per_recording_accuracy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording_id", "accuracy"])
        for rec_id in sorted(all_per_rec):
            writer.writerow([rec_id, f"{all_per_rec[rec_id]:.6f}"])
    if plots:
        _plot_confusion(pooled_cm, out_dir / "confusion_matrix.png")
        _plot_accuracy_strip(all_per_rec,
                             out_dir / "per_recording_accuracy.png")
    click.echo(f"accuracy {pooled.accuracy:.4f}  kappa {pooled.kappa:.4f}  "
               f"MF1 {pooled.macro_f1:.4f}  ({pooled.n_scored} epochs); "
               f"reports in {out_dir}")


TABLE_GRID = (
    ("flat", 20, 1, 20),
    ("flat", 100, 1, 100),
    ("flat", 200, 1, 200),
    ("folded", 200, 10, 20),
    ("folded", 200, 20, 10),
)


@main.command(name="benchmark")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--grid", "grid_items", multiple=True,
              help="rows like flat:20 or folded:200:20:10 "
                   "(default: the standard 5-row grid)")
@click.option("-o", "--override", "overrides", multiple=True,
              help="model override applied to every row, e.g. "
                   "-o model.n_filters=8")
@click.option("--plots/--no-plots", default=True, show_default=True)
def benchmark_cmd(out_dir, steps, grid_items, overrides, plots):
    """Measure training wall-clock across sequence lengths and folds."""
    rows = []
    for item in (grid_items or None) or _default_grid_items():
        rows.append(_parse_grid_item(item))
    if len(set(rows)) != len(rows):
        raise click.ClickException("duplicate grid rows")

    try:
        base = cfglib.load_run_config(None, list(overrides))["model"]
        configs = []
        for variant, length, b, _ in rows:
            section = dict(base)
            section.update(variant=variant, sequence_length=length,
                           n_subsequences=b)
            configs.append(ModelConfig(**section))
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"invalid config: {exc}")
    results = evaluation.benchmark_scaling(configs, steps=steps)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "scaling.csv"
    evaluation.write_benchmark_csv(results, csv_path)
    if plots:
        _plot_scaling(results, out_dir / "scaling.png")
    for r in results:
        click.echo(f"{r.variant:7s} L={r.L:4d} ({r.B}x{r.K})  "
                   f"{r.wall_clock_s:8.2f}s  seq_steps={r.seq_steps}")
    click.echo(f"wrote {csv_path}")


def _default_grid_items():
    return [":".join(map(str, row)) for row in
            [(v, L) if v == "flat" else (v, L, B, K)
             for v, L, B, K in TABLE_GRID]]


def _parse_grid_item(item: str):
    parts = item.split(":")
    variant = parts[0]
    if variant == "flat" and len(parts) == 2:
        length = int(parts[1])
        return ("flat", length, 1, length)
    if variant == "folded" and len(parts) == 4:
        length, b, k = map(int, parts[1:])
        if b * k != length:
            raise click.ClickException(f"{item}: L must equal B*K")
        return ("folded", length, b, k)
    raise click.ClickException(
        f"bad grid item {item!r}; use flat:L or folded:L:B:K")


@main.command(name="predict")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--features", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--stride", type=int, default=0, show_default=True)
def predict_cmd(checkpoint, features, out_path, stride):
    """Write predicted hypnograms (one CSV row per epoch)."""
    try:
        ckpt = io.load_checkpoint(checkpoint)
    except io.ArchiveError as exc:
        raise click.ClickException(str(exc))
    model = build_model(ModelConfig(**ckpt.config))
    io.restore_model(model, ckpt)
    recordings = io.load_feature_dir(features)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording_id", "epoch", "stage"])
        for rec in recordings:
            pred = evaluation.score_recording(model, rec.images,
                                              stride=stride or None)
            for i, stage in enumerate(pred):
                writer.writerow([rec.recording_id, i, STAGE_NAMES[stage]])
    click.echo(f"wrote {out_path}")


@main.command(name="census")
@click.option("--checkpoint", type=click.Path(exists=True), default=None)
@click.option("-o", "--override", "overrides", multiple=True)
def census_cmd(checkpoint, overrides):
    """Print the parameter census (name, shape, count)."""
    if checkpoint:
        ckpt = io.load_checkpoint(checkpoint)
        model = build_model(ModelConfig(**ckpt.config))
    else:
        try:
            cfg = cfglib.load_run_config(None, list(overrides))
            model = build_model(cfglib.model_config(cfg))
        except (TypeError, ValueError) as exc:
            raise click.ClickException(f"invalid config: {exc}")
    total = 0
    for name, shape, count in parameter_census(model):
        click.echo(f"{name:60s} {str(shape):20s} {count:10d}")
        total += count
    click.echo(f"{'total':60s} {'':20s} {total:10d}")


def _plot_confusion(cm: np.ndarray, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(STAGE_NAMES)), STAGE_NAMES)
    ax.set_yticks(range(len(STAGE_NAMES)), STAGE_NAMES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("reference")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(int(cm[i, j])), ha="center", va="center",
                    fontsize=8,
                    color="white" if norm[i, j] > 0.5 else "black")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_accuracy_strip(per_recording: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    values = [per_recording[k] for k in sorted(per_recording)]
    fig, ax = plt.subplots(figsize=(3, 4))
    x = np.random.default_rng(0).uniform(-0.08, 0.08, len(values))
    ax.plot(x, values, "o", alpha=0.6)
    ax.set_xlim(-0.5, 0.5)
    ax.set_xticks([])
    ax.set_ylabel("per-recording accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_scaling(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for variant, marker in [("flat", "o"), ("folded", "s")]:
        sub = [r for r in rows if r.variant == variant]
        if sub:
            sub.sort(key=lambda r: r.L)
            ax.plot([r.L for r in sub], [r.wall_clock_s for r in sub],
                    marker=marker, label=variant)
    ax.set_xlabel("sequence length L (epochs)")
    ax.set_ylabel("wall-clock per benchmark (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main()
