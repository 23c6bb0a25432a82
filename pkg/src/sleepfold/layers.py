"""Neural building blocks: learnable filterbank, batch-normalized LSTM,
bidirectional encoder, and gated attention pooling."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteActivationError(RuntimeError):
    """Raised when a recurrent pass produces NaN/Inf activations."""


def softplus_inverse(y: torch.Tensor) -> torch.Tensor:
    # log(expm1(y)); stable for small y via clamping
    return torch.log(torch.expm1(torch.clamp(y, min=1e-6)))


def triangular_filterbank(n_bins: int, n_filters: int) -> torch.Tensor:
    """Triangular filters with unit peaks linearly spaced over [0, Nyquist].

    Returns an (n_bins, n_filters) non-negative matrix.
    """
    peaks = torch.linspace(0, n_bins - 1, n_filters + 2)
    fb = torch.zeros(n_bins, n_filters)
    bins = torch.arange(n_bins, dtype=torch.float32)
    for m in range(n_filters):
        left, center, right = peaks[m], peaks[m + 1], peaks[m + 2]
        rising = (bins - left) / max(float(center - left), 1e-6)
        falling = (right - bins) / max(float(right - center), 1e-6)
        fb[:, m] = torch.clamp(torch.minimum(rising, falling), min=0.0)
    return fb


class LearnableFilterbank(nn.Module):
    """Non-negative filterbank that smooths and reduces the frequency axis.

    The effective filterbank is softplus of an unconstrained weight, so
    non-negativity survives any sequence of optimizer steps.
    """

    def __init__(self, n_bins: int, n_filters: int):
        super().__init__()
        if n_filters >= n_bins:
            raise ValueError("filter count must be smaller than bin count")
        self.n_bins = n_bins
        self.n_filters = n_filters
        init = triangular_filterbank(n_bins, n_filters)
        self.weight = nn.Parameter(softplus_inverse(torch.clamp(init, min=1e-4)))

    def effective_filters(self) -> torch.Tensor:
        return F.softplus(self.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_bins:
            raise ValueError(
                f"input has {x.shape[-1]} frequency bins, expected {self.n_bins}"
            )
        return x @ self.effective_filters()


class _SharedStatBatchNorm(nn.Module):
    """Batch normalization with one statistic set shared across timesteps.

    Train mode normalizes with the current batch's statistics and folds them
    into the running buffers; eval mode uses the running buffers.
    """

    def __init__(self, num_features: int, gamma_init: float = 0.1,
                 affine_shift: bool = True, eps: float = 1e-5,
                 momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = nn.Parameter(torch.full((num_features,), gamma_init))
        if affine_shift:
            self.beta = nn.Parameter(torch.zeros(num_features))
        else:
            self.register_parameter("beta", None)
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            mean = x.mean(dim=0)
            var = x.var(dim=0, unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(
                    self.momentum * mean.detach())
                self.running_var.mul_(1 - self.momentum).add_(
                    self.momentum * var.detach())
        else:
            mean, var = self.running_mean, self.running_var
        out = (x - mean) / torch.sqrt(var + self.eps) * self.gamma
        if self.beta is not None:
            out = out + self.beta
        return out


class BatchNormLSTM(nn.Module):
    """Unidirectional LSTM with batch normalization on gate pre-activations.

    Input-to-hidden and hidden-to-hidden projections are normalized
    separately; the cell state is normalized at the output nonlinearity.
    The forget-gate shift starts at +1.
    """

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.weight_ih = nn.Parameter(torch.empty(input_size, 4 * hidden_size))
        self.weight_hh = nn.Parameter(torch.empty(hidden_size, 4 * hidden_size))
        self.bn_ih = _SharedStatBatchNorm(4 * hidden_size, affine_shift=True)
        self.bn_hh = _SharedStatBatchNorm(4 * hidden_size, affine_shift=False)
        self.bn_c = _SharedStatBatchNorm(hidden_size, affine_shift=True)
        self.reset_parameters()

    def reset_parameters(self):
        for w in (self.weight_ih, self.weight_hh):
            bound = 1.0 / math.sqrt(w.shape[0])
            nn.init.uniform_(w, -bound, bound)
        with torch.no_grad():
            # gate order: input, forget, cell, output
            self.bn_ih.beta.zero_()
            self.bn_ih.beta[self.hidden_size : 2 * self.hidden_size].fill_(1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (N, T, input_size) -> hidden states (N, T, hidden_size)."""
        n, t_len, _ = x.shape
        h = x.new_zeros(n, self.hidden_size)
        c = x.new_zeros(n, self.hidden_size)
        # one matmul for all timesteps' input projections
        xw = x.reshape(n * t_len, -1) @ self.weight_ih
        xw = xw.reshape(n, t_len, -1)
        outputs = []
        hs = self.hidden_size
        for t in range(t_len):
            gates = self.bn_ih(xw[:, t]) + self.bn_hh(h @ self.weight_hh)
            i, f, g, o = gates.split(hs, dim=1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(self.bn_c(c))
            outputs.append(h)
        return torch.stack(outputs, dim=1)


class BiRecurrentEncoder(nn.Module):
    """Bidirectional batch-normalized LSTM; output is the forward/backward
    hidden-state concatenation, optionally dropout-regularized."""

    def __init__(self, input_size: int, hidden_size_per_direction: int,
                 dropout: float = 0.0):
        super().__init__()
        self.fw = BatchNormLSTM(input_size, hidden_size_per_direction)
        self.bw = BatchNormLSTM(input_size, hidden_size_per_direction)
        self.dropout = nn.Dropout(dropout)

    @property
    def output_size(self) -> int:
        return 2 * self.fw.hidden_size

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out_fw = self.fw(x)
        out_bw = self.bw(torch.flip(x, dims=[1])).flip(dims=[1])
        out = torch.cat([out_fw, out_bw], dim=2)
        if not torch.all(torch.isfinite(out)):
            bad = (~torch.isfinite(out)).any(dim=2).any(dim=0).nonzero()
            raise NonFiniteActivationError(
                f"non-finite recurrent activation at frame index "
                f"{int(bad[0])}"
            )
        return self.dropout(out)


class AttentionPool(nn.Module):
    """Gated attention pooling with a trainable context vector."""

    def __init__(self, input_size: int, attention_size: int):
        super().__init__()
        self.proj = nn.Linear(input_size, attention_size)
        self.context = nn.Parameter(torch.empty(attention_size))
        bound = 1.0 / math.sqrt(attention_size)
        nn.init.uniform_(self.context, -bound, bound)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (N, T, D) -> pooled (N, D), weights (N, T)."""
        u = torch.tanh(self.proj(x))
        scores = u @ self.context
        weights = torch.softmax(scores, dim=1)  # stable (max-subtracted)
        pooled = torch.einsum("nt,ntd->nd", weights, x)
        return pooled, weights


class EpochEncoder(nn.Module):
    """Maps a spectrogram image to a fixed-size epoch embedding."""

    def __init__(self, n_bins: int, n_filters: int,
                 hidden_per_direction: int, attention_size: int,
                 dropout: float = 0.0):
        super().__init__()
        self.filterbank = LearnableFilterbank(n_bins, n_filters)
        self.encoder = BiRecurrentEncoder(
            n_filters, hidden_per_direction, dropout=dropout)
        self.pool = AttentionPool(self.encoder.output_size, attention_size)

    @property
    def output_size(self) -> int:
        return self.encoder.output_size

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (N, T, F) -> embeddings (N, H_e)."""
        frames = self.filterbank(images)
        encoded = self.encoder(frames)
        pooled, _ = self.pool(encoded)
        return pooled
