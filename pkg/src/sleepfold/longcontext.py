"""Folded long-context sequence encoder.

An L-length sequence of epoch embeddings is folded into B non-overlapping
subsequences of length K (L = B*K), modelled along subsequences (intra) and
across them (inter), then unfolded back to length L. The sequential work per
sample is K + B recurrent steps instead of L.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import BiRecurrentEncoder


class FoldError(ValueError):
    """Raised when a sequence cannot be folded as requested."""


@dataclass(frozen=True)
class FoldSpec:
    """Fold geometry: sequence length L split as B subsequences of length K."""

    L: int
    B: int
    K: int

    def __post_init__(self):
        if self.B < 1 or self.K < 1 or self.L != self.B * self.K:
            raise FoldError(
                f"L={self.L} is not B*K with B={self.B}, K={self.K}"
            )


def fold_index(ell: int, K: int) -> tuple[int, int]:
    """1-based sequence position -> 1-based (subsequence, offset)."""
    return (ell - 1) // K + 1, (ell - 1) % K + 1


def unfold_index(b: int, k: int, K: int) -> int:
    """1-based (subsequence, offset) -> 1-based sequence position."""
    return (b - 1) * K + k


def fold(sequence: torch.Tensor, spec: FoldSpec) -> torch.Tensor:
    """(..., L, D) -> (..., B, K, D); element order follows fold_index."""
    if sequence.shape[-2] != spec.L:
        raise FoldError(
            f"sequence length {sequence.shape[-2]} does not match spec L={spec.L}"
        )
    return sequence.reshape(*sequence.shape[:-2], spec.B, spec.K,
                            sequence.shape[-1])


def unfold(grid: torch.Tensor) -> torch.Tensor:
    """(..., B, K, D) -> (..., B*K, D); inverse of fold."""
    return grid.reshape(*grid.shape[:-3], grid.shape[-3] * grid.shape[-2],
                        grid.shape[-1])


class _ResidualProjection(nn.Module):
    """x + LayerNorm(W x + b); layer norm applies inside the residual branch."""

    def __init__(self, width: int):
        super().__init__()
        self.linear = nn.Linear(width, width)
        self.norm = nn.LayerNorm(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.norm(self.linear(x))


class LongContextEncoder(nn.Module):
    """Fold -> intra-subsequence BLSTM -> inter-subsequence BLSTM -> unfold.

    With ``inter_enabled=False`` and B=1 this degenerates to the flat
    baseline: a single full-length recurrent pass with the same
    projection/normalization/residual block.

    ``last_sequential_steps`` records the recurrent steps per sample of the
    most recent forward pass (K + B folded, L flat).
    """

    def __init__(self, width: int, hidden_per_direction: int,
                 dropout: float = 0.0, inter_enabled: bool = True):
        super().__init__()
        if 2 * hidden_per_direction != width:
            raise FoldError(
                "residual connections require the recurrent output width "
                f"(2x{hidden_per_direction}) to equal the input width {width}"
            )
        self.width = width
        self.inter_enabled = inter_enabled
        self.intra = BiRecurrentEncoder(width, hidden_per_direction, dropout)
        self.intra_proj = _ResidualProjection(width)
        if inter_enabled:
            self.inter = BiRecurrentEncoder(width, hidden_per_direction, dropout)
            self.inter_proj = _ResidualProjection(width)
        self.last_sequential_steps = 0

    def intra_pass(self, grid: torch.Tensor) -> torch.Tensor:
        """(N, B, K, D) -> (N, B, K, D); rows never exchange information."""
        n, b, k, d = grid.shape
        rows = grid.reshape(n * b, k, d)
        out = self.intra_proj(self.intra(rows))
        return out.reshape(n, b, k, d)

    def inter_pass(self, grid: torch.Tensor) -> torch.Tensor:
        """(N, B, K, D) -> (N, B, K, D); columns never exchange information."""
        n, b, k, d = grid.shape
        cols = grid.transpose(1, 2).reshape(n * k, b, d)
        out = self.inter_proj(self.inter(cols))
        return out.reshape(n, k, b, d).transpose(1, 2)

    def forward(self, embeddings: torch.Tensor, spec: FoldSpec) -> torch.Tensor:
        """embeddings: (N, L, D) -> (N, L, D)."""
        grid = fold(embeddings, spec)
        grid = self.intra_pass(grid)
        steps = spec.K
        if self.inter_enabled:
            grid = self.inter_pass(grid)
            steps += spec.B
        self.last_sequential_steps = steps
        return unfold(grid)
