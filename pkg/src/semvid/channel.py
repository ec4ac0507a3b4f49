"""Power normalization and the noisy channel ``s_hat = W(s; P)``.

Only AWGN and a noiseless identity channel are provided. Other channel
models plug in by adding a ``kind`` and a branch in :func:`transmit`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import torch

from .types import DegenerateInputError, SymbolStream

ChannelKind = Literal["awgn", "identity"]


@dataclass(frozen=True)
class ChannelConfig:
    kind: ChannelKind = "awgn"
    snr_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("awgn", "identity"):
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.kind == "awgn" and not math.isfinite(self.snr_db):
            raise ValueError(f"SNR must be finite for an AWGN channel, got {self.snr_db}")

    def generator(self) -> torch.Generator:
        """A fresh generator for one transmission; never share it."""
        return torch.Generator().manual_seed(int(self.seed))


def noise_variance(snr_db: float) -> float:
    """Noise power for unit signal power: ``10 ** (-snr_db / 10)``."""
    return 10.0 ** (-snr_db / 10.0)


def normalize_with_gain(s: torch.Tensor, strict: bool = True) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """Scale ``s`` to unit average power and return the gain needed to undo it.

    Returns ``(s_norm, gain, degenerate)`` where ``s == gain * s_norm``. An
    all-zero input has no unit-power scaling; with ``strict=False`` it is sent
    as silence (gain 0) and flagged instead of raising.
    """
    if s.ndim != 1 or s.numel() == 0:
        raise ValueError("power normalization needs a non-empty 1-D vector")
    k = s.numel()
    norm = torch.linalg.vector_norm(s)
    if float(norm.detach()) == 0.0:
        if strict:
            raise DegenerateInputError("cannot power-normalize an all-zero vector")
        return torch.zeros_like(s), norm, True
    gain = norm / math.sqrt(k)
    return s / gain, gain, False


def power_normalize(s: torch.Tensor) -> torch.Tensor:
    """``s * sqrt(k) / ||s||`` so that the mean symbol power is exactly one."""
    return normalize_with_gain(s, strict=True)[0]


def transmit(
    s_norm: torch.Tensor, cfg: ChannelConfig, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Pass symbols through the channel. Gradients flow straight through the additive noise."""
    if cfg.kind == "identity":
        return s_norm
    if generator is None:
        generator = cfg.generator()
    std = math.sqrt(noise_variance(cfg.snr_db))
    noise = torch.randn(s_norm.shape, generator=generator, dtype=s_norm.dtype, device="cpu")
    return s_norm + std * noise.to(s_norm.device)


def transmit_stream(
    stream: SymbolStream, cfg: ChannelConfig, generator: torch.Generator | None = None
) -> SymbolStream:
    """Send every feature vector of ``stream`` through the channel.

    The side-information prefix is delivered untouched (it is assumed to ride
    on a strong digital code). Noise is drawn vector by vector in stream
    order from a single generator.
    """
    if generator is None:
        generator = cfg.generator()
    received = [transmit(v, cfg, generator) if v.numel() else v for v in stream.feature_vectors()]
    return stream.replace_features(received)
