"""File formats and dataset plumbing.

Versioned binary containers for per-recording feature archives and model
checkpoints, plus manifest parsing and the raw-signal -> feature pipeline.
All writers are byte-deterministic: same inputs, same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import frontend
from .frontend import Hypnogram, RawEpoch, RawLabelStream
from .synth import read_signal_file

FEATURE_MAGIC = b"SLPFEAT\x00"
CHECKPOINT_MAGIC = b"SLPCKPT\x00"
SCHEMA_VERSION = 1


class ArchiveError(ValueError):
    """Raised on malformed or incompatible container files."""


def _write_container(path, magic: bytes, header: dict,
                     buffers: list[bytes]) -> None:
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", SCHEMA_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for buf in buffers:
            fh.write(buf)


def _read_container(path, magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        got = fh.read(len(magic))
        if got != magic:
            raise ArchiveError(f"{path}: bad magic {got!r}")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version > SCHEMA_VERSION:
            raise ArchiveError(
                f"{path}: schema version {version} is newer than supported "
                f"{SCHEMA_VERSION}")
        header = json.loads(fh.read(header_len).decode())
        payload = fh.read()
    return header, payload


# ---------------------------------------------------------------------------
# Feature archives
# ---------------------------------------------------------------------------

@dataclass
class RecordingFeatures:
    """Spectrogram stack plus hypnogram for one recording."""

    recording_id: str
    subject_id: str
    images: np.ndarray      # (n_epochs, T, F) float32
    stages: np.ndarray      # (n_epochs,) int64
    valid_mask: np.ndarray  # (n_epochs,) bool

    @property
    def n_epochs(self) -> int:
        return self.images.shape[0]


def write_feature_archive(path, rec: RecordingFeatures) -> None:
    images = np.ascontiguousarray(rec.images, dtype="<f4")
    stages = np.ascontiguousarray(rec.stages, dtype="<i1")
    mask = np.ascontiguousarray(rec.valid_mask, dtype="<u1")
    header = {
        "recording_id": rec.recording_id,
        "subject_id": rec.subject_id,
        "n_epochs": int(images.shape[0]),
        "n_frames": int(images.shape[1]),
        "n_bins": int(images.shape[2]),
    }
    _write_container(path, FEATURE_MAGIC, header,
                     [images.tobytes(), stages.tobytes(), mask.tobytes()])


def read_feature_archive(path) -> RecordingFeatures:
    header, payload = _read_container(path, FEATURE_MAGIC)
    n, t, f = header["n_epochs"], header["n_frames"], header["n_bins"]
    img_bytes = n * t * f * 4
    images = np.frombuffer(payload[:img_bytes], dtype="<f4").reshape(n, t, f)
    stages = np.frombuffer(payload[img_bytes:img_bytes + n], dtype="<i1")
    mask = np.frombuffer(payload[img_bytes + n:img_bytes + 2 * n], dtype="<u1")
    if mask.size != n:
        raise ArchiveError(f"{path}: truncated feature archive")
    return RecordingFeatures(
        recording_id=header["recording_id"],
        subject_id=header["subject_id"],
        images=images.astype(np.float32),
        stages=stages.astype(np.int64),
        valid_mask=mask.astype(bool),
    )


# ---------------------------------------------------------------------------
# Manifest and the prepare pipeline
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ["recording_id", "signal_path", "label_path",
                   "in_bed_start", "in_bed_end", "subject_id"]


@dataclass
class ManifestRow:
    recording_id: str
    signal_path: Path
    label_path: Path
    in_bed_start: int
    in_bed_end: int
    subject_id: str


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ArchiveError(f"{path}: manifest missing columns {missing}")
        for raw in reader:
            rows.append(ManifestRow(
                recording_id=raw["recording_id"],
                signal_path=path.parent / raw["signal_path"],
                label_path=path.parent / raw["label_path"],
                in_bed_start=int(raw["in_bed_start"]),
                in_bed_end=int(raw["in_bed_end"]),
                subject_id=raw["subject_id"],
            ))
    if not rows:
        raise ArchiveError(f"{path}: no recordings in manifest")
    return rows


def prepare_recording(row: ManifestRow, margin_minutes: float = 30.0,
                      zscore: bool = False) -> RecordingFeatures:
    """Raw signal + labels -> trimmed, resampled, spectrogram features."""
    samples, sample_rate = read_signal_file(row.signal_path)
    with open(row.label_path) as fh:
        tokens = [line.strip() for line in fh if line.strip()]
    hyp = frontend.harmonize_labels(RawLabelStream(labels=tokens))
    samples_per_epoch = int(round(sample_rate * frontend.EPOCH_SECONDS))
    n_epochs = len(samples) // samples_per_epoch
    if n_epochs != len(hyp):
        raise ArchiveError(
            f"{row.recording_id}: {n_epochs} signal epochs vs "
            f"{len(hyp)} labels")
    hyp, start, end = frontend.trim_to_in_bed(
        hyp, row.in_bed_start, row.in_bed_end, margin_minutes)
    images = []
    for i in range(start, end + 1):
        epoch = RawEpoch(
            samples=samples[i * samples_per_epoch:(i + 1) * samples_per_epoch],
            sample_rate=sample_rate)
        epoch = frontend.resample_epoch(epoch)
        images.append(frontend.stft_epoch(epoch).values.astype(np.float32))
    images = np.stack(images)
    if zscore:
        mu, sd = images.mean(), images.std()
        images = (images - mu) / max(sd, 1e-8)
    return RecordingFeatures(
        recording_id=row.recording_id,
        subject_id=row.subject_id,
        images=images,
        stages=hyp.stages,
        valid_mask=hyp.valid_mask,
    )


def prepare_dataset(manifest_path, out_dir, margin_minutes: float = 30.0,
                    zscore: bool = False) -> dict:
    """Run the frontend over every manifest row.

    Per-recording failures are recorded without aborting the rest; the
    summary reports successes, failures, and masked-epoch counts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"prepared": [], "failed": {}, "epochs": 0, "masked": 0}
    for row in read_manifest(manifest_path):
        try:
            rec = prepare_recording(row, margin_minutes, zscore)
            write_feature_archive(out_dir / f"{row.recording_id}.feat", rec)
            summary["prepared"].append(row.recording_id)
            summary["epochs"] += rec.n_epochs
            summary["masked"] += int((~rec.valid_mask).sum())
        except (OSError, ValueError) as exc:
            summary["failed"][row.recording_id] = str(exc)
    return summary


def load_feature_dir(feat_dir) -> list[RecordingFeatures]:
    paths = sorted(Path(feat_dir).glob("*.feat"))
    if not paths:
        raise ArchiveError(f"no feature archives under {feat_dir}")
    return [read_feature_archive(p) for p in paths]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_DTYPE_CODES = {torch.float32: "<f4", torch.float64: "<f8",
                torch.int64: "<i8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def config_fingerprint(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _tensor_entries(tensors: dict) -> tuple[list[dict], list[bytes]]:
    index, buffers = [], []
    for name, tensor in tensors.items():
        t = tensor.detach().cpu().contiguous()
        code = _DTYPE_CODES[t.dtype]
        buf = t.numpy().astype(code).tobytes()
        index.append({"name": name, "dtype": code,
                      "shape": list(t.shape), "nbytes": len(buf)})
        buffers.append(buf)
    return index, buffers


def save_checkpoint(path, model, optimizer=None, step: int = 0,
                    best_metric: float | None = None) -> None:
    tensors = dict(model.state_dict())
    opt_index = []
    if optimizer is not None:
        param_names = [n for n, _ in model.named_parameters()]
        state = optimizer.state_dict()["state"]
        for i, name in enumerate(param_names):
            if i not in state:
                continue
            for key, value in sorted(state[i].items()):
                full = f"__opt__/{name}/{key}"
                if isinstance(value, torch.Tensor):
                    tensors[full] = value
                else:
                    opt_index.append({"name": full, "value": value})
    index, buffers = _tensor_entries(tensors)
    header = {
        "format": "sleepfold-checkpoint",
        "config": model.config.to_dict(),
        "config_fingerprint": config_fingerprint(model.config.to_dict()),
        "tensors": index,
        "optimizer_scalars": opt_index,
        "metadata": {"step": step, "best_metric": best_metric},
    }
    _write_container(path, CHECKPOINT_MAGIC, header, buffers)


@dataclass
class Checkpoint:
    config: dict
    fingerprint: str
    tensors: dict
    optimizer_scalars: list
    step: int
    best_metric: float | None

    def model_tensors(self) -> dict:
        return {k: v for k, v in self.tensors.items()
                if not k.startswith("__opt__/")}


def load_checkpoint(path) -> Checkpoint:
    header, payload = _read_container(path, CHECKPOINT_MAGIC)
    if header.get("format") != "sleepfold-checkpoint":
        raise ArchiveError(f"{path}: not a checkpoint file")
    tensors = {}
    offset = 0
    for entry in header["tensors"]:
        raw = payload[offset:offset + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ArchiveError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(
            _CODE_DTYPES[entry["dtype"]])
        offset += entry["nbytes"]
    meta = header["metadata"]
    return Checkpoint(
        config=header["config"],
        fingerprint=header["config_fingerprint"],
        tensors=tensors,
        optimizer_scalars=header["optimizer_scalars"],
        step=int(meta["step"]),
        best_metric=meta["best_metric"],
    )


def restore_model(model, ckpt: Checkpoint, strict_config: bool = True) -> None:
    if strict_config and ckpt.fingerprint != config_fingerprint(
            model.config.to_dict()):
        raise ArchiveError("checkpoint config fingerprint does not match "
                           "the model configuration")
    model.load_state_dict(ckpt.model_tensors())


def restore_optimizer(optimizer, model, ckpt: Checkpoint) -> None:
    param_names = [n for n, _ in model.named_parameters()]
    scalars = {e["name"]: e["value"] for e in ckpt.optimizer_scalars}
    state = {}
    for i, name in enumerate(param_names):
        entry = {}
        prefix = f"__opt__/{name}/"
        for full, tensor in ckpt.tensors.items():
            if full.startswith(prefix):
                entry[full[len(prefix):]] = tensor.clone()
        for full, value in scalars.items():
            if full.startswith(prefix):
                entry[full[len(prefix):]] = value
        if entry:
            state[i] = entry
    sd = optimizer.state_dict()
    sd["state"] = state
    optimizer.load_state_dict(sd)


def init_from_pretrained(model, ckpt: Checkpoint,
                         strictness: str = "all") -> list[str]:
    """Copy matching-shape tensors from a checkpoint into the model.

    In "all" mode any name/shape mismatch is an error; in "compatible" mode
    mismatched tensors keep their fresh initialization and their names are
    returned. Optimizer state never transfers.
    """
    if strictness not in ("all", "compatible"):
        raise ValueError(f"unknown strictness {strictness!r}")
    source = ckpt.model_tensors()
    target = model.state_dict()
    fresh, mismatches = [], []
    to_copy = {}
    for name, tensor in target.items():
        if name in source and tuple(source[name].shape) == tuple(tensor.shape):
            to_copy[name] = source[name]
        else:
            fresh.append(name)
            if name in source:
                mismatches.append(
                    f"{name}: checkpoint {tuple(source[name].shape)} vs "
                    f"model {tuple(tensor.shape)}")
            else:
                mismatches.append(f"{name}: missing from checkpoint")
    if strictness == "all" and fresh:
        raise ArchiveError(
            "pretrained checkpoint incompatible in 'all' mode:\n  "
            + "\n  ".join(mismatches))
    merged = dict(target)
    merged.update(to_copy)
    model.load_state_dict(merged)
    return fresh
