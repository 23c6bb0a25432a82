"""Full sequence-to-sequence staging model and training objective.

The folded variant runs the long-context encoder (intra + inter); the flat
baseline shares the epoch encoder and classifier head but replaces the
long-context module with a single full-length recurrent pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .frontend import LOG_FLOOR, NUM_STAGES
from .layers import EpochEncoder
from .longcontext import FoldSpec, LongContextEncoder

VARIANTS = ("folded", "flat")


@dataclass
class ModelConfig:
    variant: str = "folded"
    sequence_length: int = 200
    n_subsequences: int = 20  # folded only; flat ignores the fold
    n_bins: int = 129
    n_filters: int = 32
    attention_size: int = 64
    epoch_hidden: int = 128       # H_e = 2 x per-direction size
    context_hidden: int = 128     # H_ss = H_ws
    head_units: int = 512
    n_classes: int = NUM_STAGES
    dropout: float = 0.1
    l2: float = 1e-4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.n_classes != NUM_STAGES:
            raise ValueError("five-stage scoring requires n_classes == 5")
        if self.l2 < 0:
            raise ValueError("l2 coefficient must be non-negative")
        if self.epoch_hidden % 2 or self.context_hidden % 2:
            raise ValueError("hidden widths must be even (bidirectional)")

    @property
    def fold_spec(self) -> FoldSpec:
        if self.variant == "flat":
            return FoldSpec(self.sequence_length, 1, self.sequence_length)
        if self.sequence_length % self.n_subsequences:
            raise ValueError(
                f"L={self.sequence_length} not divisible by "
                f"B={self.n_subsequences}"
            )
        return FoldSpec(self.sequence_length, self.n_subsequences,
                        self.sequence_length // self.n_subsequences)

    def to_dict(self) -> dict:
        return asdict(self)


class SleepStager(nn.Module):
    """Epoch encoder -> (folded or flat) sequence encoder -> shared head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.epoch_encoder = EpochEncoder(
            n_bins=config.n_bins,
            n_filters=config.n_filters,
            hidden_per_direction=config.epoch_hidden // 2,
            attention_size=config.attention_size,
            dropout=config.dropout,
        )
        # Dormant identity when H_e == H_ss; a real projection otherwise,
        # since the first residual requires matching widths.
        if config.epoch_hidden != config.context_hidden:
            self.input_proj = nn.Linear(config.epoch_hidden,
                                        config.context_hidden)
        else:
            self.input_proj = nn.Identity()
        self.context = LongContextEncoder(
            width=config.context_hidden,
            hidden_per_direction=config.context_hidden // 2,
            dropout=config.dropout,
            inter_enabled=(config.variant == "folded"),
        )
        self.head = nn.Sequential(
            nn.Linear(config.context_hidden, config.head_units),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.head_units, config.head_units),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.head_units, config.n_classes),
        )

    @property
    def last_sequential_steps(self) -> int:
        return self.context.last_sequential_steps

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        """images: (N, L, T, F) -> logits (N, L, C)."""
        n, length, t, f = images.shape
        spec = self.config.fold_spec
        if length != spec.L:
            raise ValueError(
                f"batch sequence length {length} does not match model "
                f"L={spec.L}"
            )
        embeddings = self.epoch_encoder(images.reshape(n * length, t, f))
        embeddings = self.input_proj(embeddings).reshape(n, length, -1)
        context = self.context(embeddings, spec)
        out = self.head(context)
        if not torch.all(torch.isfinite(out)):
            bad = (~torch.isfinite(out)).any(dim=2).nonzero()[0]
            raise RuntimeError(
                f"non-finite logits at batch {int(bad[0])}, "
                f"position {int(bad[1])}"
            )
        return out

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (N, L, T, F) -> per-epoch class posteriors (N, L, C)."""
        return torch.softmax(self.logits(images), dim=-1)

    def l2_penalty(self) -> torch.Tensor:
        total = sum((p * p).sum() for p in self.parameters())
        return self.config.l2 * total

    def loss(self, images: torch.Tensor, labels: torch.Tensor,
             valid_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Masked mean cross-entropy plus the L2 penalty.

        labels: (N, L) integer stages; valid_mask: (N, L) bool or None.
        Invalid epochs stay in the input but contribute zero loss.
        """
        log_probs = torch.log_softmax(self.logits(images), dim=-1)
        log_probs = torch.clamp(log_probs, min=torch.log(
            torch.tensor(LOG_FLOOR, dtype=log_probs.dtype)))
        picked = log_probs.gather(2, labels.unsqueeze(-1)).squeeze(-1)
        if valid_mask is None:
            ce = -picked.mean()
        else:
            m = valid_mask.to(picked.dtype)
            ce = -(picked * m).sum() / torch.clamp(m.sum(), min=1.0)
        return ce + self.l2_penalty()


def parameter_census(model: nn.Module) -> list[tuple[str, tuple, int]]:
    """(name, shape, count) for every trainable parameter."""
    return [(name, tuple(p.shape), p.numel())
            for name, p in model.named_parameters()]


def total_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def build_model(config: ModelConfig, dtype: torch.dtype = torch.float32,
                seed: int | None = None) -> SleepStager:
    """Construct a model, optionally with a fixed init seed and dtype."""
    if seed is not None:
        torch.manual_seed(seed)
    model = SleepStager(config)
    return model.to(dtype)
