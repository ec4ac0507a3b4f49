"""Gaussian entropy model and explicit-length variable-length coding.

The entropy model is a small conv autoencoder whose integer bottleneck
(``hyper_code``) is the side information and whose decoder predicts a
Gaussian scale per feature element. Elements are ranked by the entropy of
that Gaussian, so transmitter and receiver derive the same keep-mask from the
side information alone; no index list is ever sent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import FeatureDecomposition, FramingError, SymbolStream

SIGMA_MIN = 1e-3
_LOG2_2PI = math.log2(2 * math.pi)
_LOG2_2PIE = math.log2(2 * math.pi * math.e)

Features = Union[FeatureDecomposition, torch.Tensor]


class InvariantViolation(RuntimeError):
    pass


def _stacked(x: Features) -> torch.Tensor:
    return x.stacked() if isinstance(x, FeatureDecomposition) else x


def _halvings(size: int, stages: int) -> list[int]:
    sizes = [size]
    for _ in range(stages):
        sizes.append((sizes[-1] + 1) // 2)
    return sizes


class EntropyModel(nn.Module):
    """Three stride-2 convs down to the bottleneck, three stride-2 deconvs back up."""

    STAGES = 3

    def __init__(self, channels: int):
        super().__init__()
        self.analysis = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 2, 1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 2, 1),
        )
        self.synthesis = nn.ModuleList(
            [nn.ConvTranspose2d(channels, channels, 3, 2, 1) for _ in range(self.STAGES)]
        )

    def encode(self, stacked: torch.Tensor, training: bool = False,
               generator: torch.Generator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(hyper_code, scale)``.

        The input is divided by its RMS first; feature magnitude is irrelevant
        after power normalization, and this pins the entropy model to a fixed
        operating range. Gradients do not flow back into the features.
        """
        stacked = stacked.detach()
        scale = stacked.pow(2).mean().sqrt().clamp_min(1e-8)
        y = self.analysis(stacked / scale)
        if training:
            u = torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5
            return y + u.to(y.device), scale
        return quantize(y), scale

    def decode(self, hyper_code: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        """Per-element scale (in RMS-normalized units), strictly positive."""
        hs = _halvings(out_hw[0], self.STAGES)
        ws = _halvings(out_hw[1], self.STAGES)
        x = hyper_code
        for i, layer in enumerate(self.synthesis):
            target = (hs[self.STAGES - 1 - i], ws[self.STAGES - 1 - i])
            x = layer(x, output_size=target)
            if i < self.STAGES - 1:
                x = F.relu(x)
        return F.softplus(x) + SIGMA_MIN


def quantize(x: torch.Tensor) -> torch.Tensor:
    """Round half to even; idempotent on integer-valued input."""
    return torch.round(x)


@dataclass(frozen=True)
class SideInfo:
    """Quantized bottleneck plus its channel cost.

    ``cost_symbols`` counts the hyper-code elements and one power-normalization
    gain per transmitted vector. ``scale`` is the transmitter's RMS of the
    features and is never sent.
    """

    hyper_code: torch.Tensor
    cost_symbols: int
    scale: float = 1.0


def side_cost(hyper_code: torch.Tensor) -> int:
    return int(hyper_code.numel() + hyper_code.shape[0])


@dataclass(frozen=True)
class EntropyMap:
    scores: torch.Tensor

    def __post_init__(self):
        if not torch.isfinite(self.scores).all() or (self.scores < 0).any():
            raise InvariantViolation("entropy scores must be finite and non-negative")


@dataclass(frozen=True)
class KeepMask:
    bits: torch.Tensor
    kept_count: int

    def __post_init__(self):
        if self.bits.dtype != torch.bool:
            raise TypeError("mask bits must be boolean")
        if int(self.bits.sum()) != self.kept_count:
            raise InvariantViolation("kept_count disagrees with the mask")

    def per_map_counts(self) -> list[int]:
        return [int(c) for c in self.bits.reshape(self.bits.shape[0], -1).sum(dim=1)]


def entropy_analyze(model: EntropyModel, decomp: Features, training: bool = False,
                    generator: torch.Generator | None = None) -> tuple[SideInfo, torch.Tensor]:
    """Run the entropy model over a decomposition.

    Returns the side information and sigma in the features' own units,
    shaped like the stacked decomposition ``[N + 1, C, h, w]``.
    """
    stacked = _stacked(decomp)
    code, scale = model.encode(stacked, training=training, generator=generator)
    sigma = model.decode(code, stacked.shape[-2:]) * scale
    return SideInfo(code, side_cost(code), float(scale)), sigma


def gaussian_bits(w: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    """Elementwise ``-log2`` of the zero-mean Gaussian density with scale ``sigma``."""
    return 0.5 * _LOG2_2PI + torch.log2(sigma) + w.pow(2) / (2 * sigma.pow(2) * math.log(2))


def importance(decomp: Features, sigma: torch.Tensor) -> EntropyMap:
    """Per-element information content ``-log2 p(w)``, floored at zero.

    Uses the actual feature values, so only the transmitter can compute it;
    kept for analysis. Mask construction uses :func:`mask_scores`.
    """
    w = _stacked(decomp)
    if w.shape != sigma.shape:
        raise ValueError(f"feature shape {tuple(w.shape)} != sigma shape {tuple(sigma.shape)}")
    if not (sigma > 0).all():
        raise InvariantViolation("sigma must be strictly positive")
    return EntropyMap(gaussian_bits(w, sigma).clamp_min(0.0))


def mask_scores(sigma: torch.Tensor) -> torch.Tensor:
    """Differential entropy ``0.5 * log2(2 pi e sigma^2)`` of each element's Gaussian.

    Depends only on sigma, hence only on the side information. Not floored:
    flooring would create ties among low-entropy elements.
    """
    if not (sigma > 0).all():
        raise InvariantViolation("sigma must be strictly positive")
    return 0.5 * _LOG2_2PIE + torch.log2(sigma)


def build_mask(scores: EntropyMap | torch.Tensor, budget_symbols: int) -> KeepMask:
    """Keep the ``budget_symbols`` highest-scoring elements.

    Ranking is joint over every map; ties go to the lower flat index.
    """
    s = scores.scores if isinstance(scores, EntropyMap) else scores
    total = s.numel()
    if budget_symbols < 0 or budget_symbols > total:
        raise ValueError(f"budget {budget_symbols} outside [0, {total}]")
    flat = s.detach().reshape(-1).to(torch.float64)
    if not torch.isfinite(flat).all():
        raise InvariantViolation("mask scores must be finite")
    order = torch.sort(-flat, stable=True).indices
    bits = torch.zeros(total, dtype=torch.bool)
    bits[order[:budget_symbols]] = True
    return KeepMask(bits.reshape(s.shape).to(s.device), int(budget_symbols))


def pack(decomp: Features, mask: KeepMask) -> list[torch.Tensor]:
    """Emit the kept elements of each map in ascending flat-index order.

    Output order is the stacked order: one vector per frame (individual maps)
    then the common vector.
    """
    w = _stacked(decomp)
    if w.shape != mask.bits.shape:
        raise ValueError(f"mask shape {tuple(mask.bits.shape)} != feature shape {tuple(w.shape)}")
    return [w[i][mask.bits[i]] for i in range(w.shape[0])]


def unpack(stream: SymbolStream | Sequence[torch.Tensor], mask: KeepMask) -> FeatureDecomposition:
    """Scatter received symbols back to their kept positions; the rest are zero."""
    vectors = stream.feature_vectors() if isinstance(stream, SymbolStream) else list(stream)
    counts = mask.per_map_counts()
    if len(vectors) != len(counts):
        raise FramingError(f"expected {len(counts)} vectors, got {len(vectors)}")
    for i, (v, k) in enumerate(zip(vectors, counts)):
        if v.numel() != k:
            raise FramingError(f"vector {i} carries {v.numel()} symbols, mask keeps {k}")
    values = torch.cat([v.reshape(-1) for v in vectors])
    out = torch.zeros(mask.bits.shape, dtype=values.dtype, device=values.device)
    out = out.masked_scatter(mask.bits, values)
    return FeatureDecomposition.from_stacked(out)


def rate_loss(decomp: Features, sigma: torch.Tensor, training: bool = False,
              generator: torch.Generator | None = None) -> torch.Tensor:
    """Total bits ``sum(-log2 p(w + u))`` under the Gaussian model, floored at zero.

    ``u`` is uniform on [-1/2, 1/2] in training and zero otherwise.
    """
    w = _stacked(decomp)
    if training:
        u = torch.rand(w.shape, generator=generator, dtype=w.dtype) - 0.5
        w = w + u.to(w.device)
    return gaussian_bits(w, sigma).sum().clamp_min(0.0)
