"""Time-frequency frontend and label harmonization.

Raw 30-second EEG epochs become log-magnitude spectrogram images, and raw
label streams (8 tokens) become 5-class hypnograms with a validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

EPOCH_SECONDS = 30
CANONICAL_RATE = 100  # Hz; 200-sample / 2-s window gives exactly 29 frames
LOG_FLOOR = 1e-12

# Stage codes of the harmonized 5-class scheme.
STAGE_W, STAGE_N1, STAGE_N2, STAGE_N3, STAGE_REM = 0, 1, 2, 3, 4
NUM_STAGES = 5
STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")

# Raw scoring tokens -> harmonized code; None means "discard and mask out".
_RAW_TOKEN_MAP = {
    "W": STAGE_W,
    "N1": STAGE_N1,
    "N2": STAGE_N2,
    "N3": STAGE_N3,
    "N4": STAGE_N3,  # N4 merged into N3
    "REM": STAGE_REM,
    "MOVEMENT": None,
    "UNKNOWN": None,
}


class FrontendError(ValueError):
    """Raised on invalid signals or label streams."""


@dataclass
class RawEpoch:
    """One 30-second single-channel signal segment."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FrontendError("epoch samples must be a 1-D array")
        expected = int(round(self.sample_rate * EPOCH_SECONDS))
        if len(self.samples) != expected:
            raise FrontendError(
                f"epoch has {len(self.samples)} samples, expected "
                f"{expected} for {self.sample_rate} Hz x {EPOCH_SECONDS} s"
            )
        if not np.all(np.isfinite(self.samples)):
            raise FrontendError("epoch contains non-finite samples")


@dataclass
class TimeFreqImage:
    """Log-magnitude spectrogram of one epoch, frames x frequency bins."""

    values: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


@dataclass
class RawLabelStream:
    """Per-epoch scoring tokens as produced by a (simulated) scorer."""

    labels: list
    epoch_index_offset: int = 0


@dataclass
class Hypnogram:
    """Harmonized 5-class stage sequence with a validity mask."""

    stages: np.ndarray
    valid_mask: np.ndarray
    recording_id: str = ""

    def __post_init__(self):
        self.stages = np.asarray(self.stages, dtype=np.int64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.stages.shape != self.valid_mask.shape:
            raise FrontendError("stages and valid_mask lengths differ")

    def __len__(self) -> int:
        return len(self.stages)

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())


def resample_epoch(epoch: RawEpoch, target_rate: float = CANONICAL_RATE) -> RawEpoch:
    """Polyphase-resample an epoch to the canonical rate."""
    if epoch.sample_rate == target_rate:
        return epoch
    up = int(round(target_rate * EPOCH_SECONDS))
    down = len(epoch.samples)
    g = np.gcd(up, down)
    resampled = resample_poly(epoch.samples, up // g, down // g)
    # resample_poly preserves length * up/down exactly for integer ratios
    return RawEpoch(samples=resampled[: up], sample_rate=target_rate)


def stft_epoch(
    epoch: RawEpoch,
    window_seconds: float = 2.0,
    overlap_fraction: float = 0.5,
    fft_size: int = 256,
) -> TimeFreqImage:
    """Short-time Fourier transform of one epoch.

    Hamming-windowed frames, zero-padded to ``fft_size``, amplitude spectrum,
    then log with a small floor. The canonical 100 Hz / 2 s / 50% settings
    give a (29, 129) image.
    """
    signal = epoch.samples
    n_window = int(round(window_seconds * epoch.sample_rate))
    if n_window > fft_size:
        raise FrontendError(
            f"window of {n_window} samples exceeds fft_size={fft_size}"
        )
    if len(signal) < n_window:
        raise FrontendError("signal shorter than one analysis window")
    n_hop = int(round(n_window * (1.0 - overlap_fraction)))
    if n_hop < 1:
        raise FrontendError("overlap_fraction leaves a hop of zero samples")

    n_frames = (len(signal) - n_window) // n_hop + 1
    window = np.hamming(n_window)
    frames = np.empty((n_frames, n_window), dtype=np.float64)
    for t in range(n_frames):
        frames[t] = signal[t * n_hop : t * n_hop + n_window] * window
    spectrum = np.abs(np.fft.rfft(frames, n=fft_size, axis=1))
    return TimeFreqImage(values=np.log(spectrum + LOG_FLOOR))


def harmonize_labels(raw: RawLabelStream) -> Hypnogram:
    """Map raw 8-token labels to the 5-class scheme.

    N4 merges into N3; MOVEMENT/UNKNOWN positions are masked invalid and
    their stage entry is set to W as a placeholder (never scored).
    """
    stages = np.zeros(len(raw.labels), dtype=np.int64)
    valid = np.ones(len(raw.labels), dtype=bool)
    for i, token in enumerate(raw.labels):
        token = str(token).strip().upper()
        if token not in _RAW_TOKEN_MAP:
            raise FrontendError(
                f"unknown label token {token!r} at epoch "
                f"{raw.epoch_index_offset + i}"
            )
        code = _RAW_TOKEN_MAP[token]
        if code is None:
            valid[i] = False
        else:
            stages[i] = code
    return Hypnogram(stages=stages, valid_mask=valid)


def trim_to_in_bed(
    hyp: Hypnogram,
    in_bed_start: int,
    in_bed_end: int,
    margin_minutes: float = 30.0,
) -> tuple[Hypnogram, int, int]:
    """Trim a hypnogram to the in-bed part plus a margin on each side.

    Returns the trimmed hypnogram and the retained (start, end) epoch range
    (inclusive) so the caller can slice the matching signal epochs.
    """
    if in_bed_start > in_bed_end:
        raise FrontendError("in_bed_start must not exceed in_bed_end")
    n = len(hyp)
    if not (0 <= in_bed_start < n and 0 <= in_bed_end < n):
        raise FrontendError("in-bed range outside the recording")
    margin_epochs = int(round(margin_minutes * 60 / EPOCH_SECONDS))
    start = max(0, in_bed_start - margin_epochs)
    end = min(n - 1, in_bed_end + margin_epochs)
    if end < start:
        raise FrontendError("trimming produced an empty recording")
    trimmed = Hypnogram(
        stages=hyp.stages[start : end + 1],
        valid_mask=hyp.valid_mask[start : end + 1],
        recording_id=hyp.recording_id,
    )
    return trimmed, start, end
