"""Deterministic synthetic sleep-data generator with a controllable
whole-cycle dependency.

Stage sequences come from a Markov chain whose transitions into a designated
confusable stage pair are modulated by position within a sleep cycle: the
first pair member dominates the first half of each cycle, the second member
the second half. The two members emit identically distributed signals, so an
epoch viewed in isolation carries no information about which member it is
(Bayes accuracy 0.5 by symmetry).

Cycle phase itself is readable only from the amplitude of a designated cue
stage, modulated as 1 + g*cos(2*pi*phase). Cosine is symmetric under
phase -> 1 - phase, which swaps the two half-cycles, so a single cue reading
is exactly uninformative about the half; resolving it requires combining
many cue readings across a substantial fraction of a cycle. Per-epoch
amplitude jitter controls how much context that takes.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .frontend import EPOCH_SECONDS, NUM_STAGES, STAGE_NAMES, Hypnogram

SIGNAL_MAGIC = b"SLPSIG1\x00"


@dataclass
class SynthConfig:
    n_subjects: int = 6
    recordings_per_subject: int = 2
    epochs_per_recording: int = 600
    sample_rate: int = 100
    cycle_period: int = 180           # epochs per sleep cycle
    cycle_modulation_depth: float = 1.0
    confusable_pair: tuple = (1, 4)   # N1 and REM
    cue_stage: int = 2                # N2 carries the phase cue
    cue_gain: float = 0.45
    amplitude_jitter: float = 0.5
    band_centers_hz: tuple = (8.0, 10.0, 13.0, 1.5, 10.0)
    band_amplitudes: tuple = (1.0, 1.0, 1.0, 1.2, 1.0)
    noise_level: float = 0.2
    stationary_target: tuple = (0.13, 0.17, 0.36, 0.17, 0.17)
    self_transition: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.cycle_period <= 0:
            raise ValueError("cycle_period must be positive")
        if not 0.0 <= self.cycle_modulation_depth <= 1.0:
            raise ValueError("cycle_modulation_depth must lie in [0, 1]")
        if len(self.band_centers_hz) != NUM_STAGES:
            raise ValueError("need one band center per stage")
        if len(self.band_amplitudes) != NUM_STAGES:
            raise ValueError("need one band amplitude per stage")
        a, b = self.confusable_pair
        if a == b or not (0 <= a < NUM_STAGES and 0 <= b < NUM_STAGES):
            raise ValueError("confusable_pair must be two distinct stages")
        if abs(sum(self.stationary_target) - 1.0) > 1e-9:
            raise ValueError("stationary_target must sum to 1")
        if (self.stationary_target[a] != self.stationary_target[b]
                or self.band_centers_hz[a] != self.band_centers_hz[b]
                or self.band_amplitudes[a] != self.band_amplitudes[b]):
            raise ValueError(
                "confusable pair members must be configured identically")

    def to_dict(self) -> dict:
        return asdict(self)


TINY_PRESET = dict(n_subjects=6, recordings_per_subject=2,
                   epochs_per_recording=600)
SMALL_PRESET = dict(n_subjects=20, recordings_per_subject=2,
                    epochs_per_recording=1000)


def base_transition_matrix(config: SynthConfig) -> np.ndarray:
    """Sticky chain whose stationary distribution equals the target."""
    pi = np.asarray(config.stationary_target, dtype=np.float64)
    p = (config.self_transition * np.eye(NUM_STAGES)
         + (1.0 - config.self_transition) * np.tile(pi, (NUM_STAGES, 1)))
    return p


def cycle_phase(epoch_index: np.ndarray | int, cycle_period: int) -> np.ndarray:
    return (np.asarray(epoch_index) % cycle_period) / cycle_period


def _modulated_row(row: np.ndarray, phase: float, config: SynthConfig
                   ) -> np.ndarray:
    """Reweight transitions into the pair stages by cycle phase."""
    a, b = config.confusable_pair
    d = config.cycle_modulation_depth
    first_half = phase < 0.5
    out = row.copy()
    out[a] *= (1.0 + d) if first_half else (1.0 - d)
    out[b] *= (1.0 - d) if first_half else (1.0 + d)
    s = out.sum()
    if s <= 0:
        # full-depth modulation can zero a degenerate row (e.g. a chain
        # frozen inside the disfavored pair member); keep the original row
        return row / row.sum()
    return out / s


def _rng(config: SynthConfig, subject: int, recording: int,
         substream: int) -> np.random.Generator:
    # named substreams: 0 = hypnogram, 1 = signal, 2 = noise
    return np.random.default_rng(
        [config.seed, subject, recording, substream])


def generate_hypnogram(config: SynthConfig, subject: int = 0,
                       recording: int = 0) -> Hypnogram:
    """Phase-modulated Markov stage sequence; every epoch is valid."""
    rng = _rng(config, subject, recording, 0)
    base = base_transition_matrix(config)
    n = config.epochs_per_recording
    stages = np.empty(n, dtype=np.int64)
    pi0 = _modulated_row(np.asarray(config.stationary_target), 0.0, config)
    stages[0] = rng.choice(NUM_STAGES, p=pi0)
    for t in range(1, n):
        phase = float(cycle_phase(t, config.cycle_period))
        row = _modulated_row(base[stages[t - 1]], phase, config)
        stages[t] = rng.choice(NUM_STAGES, p=row)
    return Hypnogram(stages=stages, valid_mask=np.ones(n, dtype=bool),
                     recording_id=f"s{subject:03d}r{recording:02d}")


def epoch_amplitude(stage: int, phase: float, jitter: float,
                    config: SynthConfig) -> float:
    """Realized sinusoid amplitude of one epoch (cue modulation + jitter)."""
    amp = config.band_amplitudes[stage]
    if stage == config.cue_stage:
        amp *= 1.0 + config.cue_gain * np.cos(2 * np.pi * phase)
    return max(amp * (1.0 + jitter), 0.05)


def generate_signal(hyp: Hypnogram, config: SynthConfig, subject: int = 0,
                    recording: int = 0) -> np.ndarray:
    """Per-epoch band-limited sinusoids plus white noise.

    Returns a float32 array of shape (n_epochs, sample_rate * 30).
    """
    sig_rng = _rng(config, subject, recording, 1)
    noise_rng = _rng(config, subject, recording, 2)
    n_samples = config.sample_rate * EPOCH_SECONDS
    t = np.arange(n_samples) / config.sample_rate
    out = np.empty((len(hyp), n_samples), dtype=np.float32)
    for i, stage in enumerate(hyp.stages):
        phase = float(cycle_phase(i, config.cycle_period))
        jitter = config.amplitude_jitter * sig_rng.standard_normal()
        amp = epoch_amplitude(int(stage), phase, jitter, config)
        carrier_phase = sig_rng.uniform(0, 2 * np.pi)
        freq = config.band_centers_hz[int(stage)]
        epoch = amp * np.sin(2 * np.pi * freq * t + carrier_phase)
        epoch += config.noise_level * noise_rng.standard_normal(n_samples)
        out[i] = epoch.astype(np.float32)
    return out


def write_signal_file(path, samples_flat: np.ndarray, sample_rate: int) -> None:
    """Binary layout: magic, sample_rate (u32 LE), n_samples (u64 LE), f32 LE."""
    data = np.ascontiguousarray(samples_flat, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(SIGNAL_MAGIC)
        fh.write(struct.pack("<IQ", sample_rate, data.size))
        fh.write(data.tobytes())


def read_signal_file(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(SIGNAL_MAGIC))
        if magic != SIGNAL_MAGIC:
            raise ValueError(f"{path}: bad signal file magic {magic!r}")
        sample_rate, n_samples = struct.unpack("<IQ", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n_samples:
        raise ValueError(f"{path}: truncated signal file")
    return data.astype(np.float64), sample_rate


def write_dataset(config: SynthConfig, out_dir) -> Path:
    """Generate all recordings and emit signal/label files plus a manifest.

    The whole recording counts as in-bed; the manifest binds each recording's
    files to its subject for fold construction downstream.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.csv"
    rows = []
    for subject in range(config.n_subjects):
        for recording in range(config.recordings_per_subject):
            hyp = generate_hypnogram(config, subject, recording)
            signal = generate_signal(hyp, config, subject, recording)
            rec_id = hyp.recording_id
            signal_path = out_dir / f"{rec_id}.sig"
            label_path = out_dir / f"{rec_id}.labels"
            write_signal_file(signal_path, signal.reshape(-1),
                              config.sample_rate)
            with open(label_path, "w") as fh:
                for stage in hyp.stages:
                    fh.write(STAGE_NAMES[stage] + "\n")
            rows.append([rec_id, signal_path.name, label_path.name,
                         0, len(hyp) - 1, f"subj{subject:03d}"])
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording_id", "signal_path", "label_path",
                         "in_bed_start", "in_bed_end", "subject_id"])
        writer.writerows(rows)
    return manifest_path


# ---------------------------------------------------------------------------
# Separability analysis: cheating classifiers that bound what epoch-local,
# short-context, and phase-aware models can achieve on the confusable pair.
# ---------------------------------------------------------------------------

def pair_identity_rule(phase: np.ndarray, config: SynthConfig) -> np.ndarray:
    """The pair member favored at each phase (stage code)."""
    a, b = config.confusable_pair
    return np.where(np.asarray(phase) < 0.5, a, b)


def phase_oracle_pair_accuracy(config: SynthConfig,
                               n_recordings: int = 4) -> float:
    """Accuracy on pair epochs of a cheater that knows the true phase."""
    correct = total = 0
    a, b = config.confusable_pair
    for rec in range(n_recordings):
        hyp = generate_hypnogram(config, subject=900, recording=rec)
        idx = np.where(np.isin(hyp.stages, (a, b)))[0]
        phase = cycle_phase(idx, config.cycle_period)
        pred = pair_identity_rule(phase, config)
        correct += int((pred == hyp.stages[idx]).sum())
        total += len(idx)
    return correct / max(total, 1)


def window_limited_pair_accuracy(config: SynthConfig, window: int = 20,
                                 n_recordings: int = 4) -> float:
    """Accuracy on pair epochs of the strongest short-context cheater.

    The cheater sees, for a window centered on the target epoch, the true
    stage of every epoch and the exact realized amplitude of every cue-stage
    epoch, and runs maximum-likelihood inference over the unknown cycle
    offset using the true generative parameters. Any model restricted to the
    same window can do no better than this posterior decision.
    """
    a, b = config.confusable_pair
    cyc = config.cycle_period
    base_amp = config.band_amplitudes[config.cue_stage]
    sigma = max(base_amp * config.amplitude_jitter, 1e-6)
    offsets = np.arange(cyc)
    half = window // 2

    correct = total = 0
    for rec in range(n_recordings):
        hyp = generate_hypnogram(config, subject=900, recording=rec)
        sig_rng = _rng(config, 900, rec, 1)
        n = len(hyp)
        # realized cue amplitudes, replayed with the signal substream
        amps = np.full(n, np.nan)
        for i, stage in enumerate(hyp.stages):
            phase = float(cycle_phase(i, cyc))
            jitter = config.amplitude_jitter * sig_rng.standard_normal()
            sig_rng.uniform(0, 2 * np.pi)  # consume the carrier phase draw
            if stage == config.cue_stage:
                amps[i] = epoch_amplitude(int(stage), phase, jitter, config)

        pair_idx = np.where(np.isin(hyp.stages, (a, b)))[0]
        for t in pair_idx:
            lo, hi = max(0, t - half), min(n, t - half + window)
            rel = np.arange(lo, hi) - t
            cue_mask = ~np.isnan(amps[lo:hi])
            if cue_mask.any():
                deltas = rel[cue_mask]
                observed = amps[lo:hi][cue_mask]
                pos = (offsets[:, None] + deltas[None, :]) % cyc
                mu = base_amp * (1.0 + config.cue_gain
                                 * np.cos(2 * np.pi * pos / cyc))
                loglik = -((observed[None, :] - mu) ** 2).sum(axis=1) / (2 * sigma ** 2)
                loglik -= loglik.max()
                post = np.exp(loglik)
                post /= post.sum()
            else:
                post = np.full(cyc, 1.0 / cyc)
            p_first_half = post[offsets < cyc / 2].sum()
            pred = a if p_first_half >= 0.5 else b
            correct += int(pred == hyp.stages[t])
            total += 1
    return correct / max(total, 1)
