"""Shared vocabulary: GOPs, feature tensors, symbol streams and bandwidth accounting.

Tensors are torch tensors throughout. Frames are ``[N, 3, H, W]`` with
intensities in ``[0, 1]``; one channel use is one real-valued symbol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

# Net spatial downsampling of the transmit path (latent /2, encoder /8).
SPATIAL_FACTOR = 16


class SemvidError(Exception):
    """Base class for all errors raised by this package."""


class RangeError(SemvidError, ValueError):
    pass


class ShapeError(SemvidError, ValueError):
    pass


class InfeasibleBudgetError(SemvidError, ValueError):
    """The requested budget cannot even carry the side information."""

    def __init__(self, message: str, min_cbr: float | None = None):
        super().__init__(message)
        self.min_cbr = min_cbr


class FramingError(SemvidError, ValueError):
    pass


class DegenerateInputError(SemvidError, ValueError):
    pass


def source_dim(height: int, width: int) -> int:
    """Per-frame source dimension ``m = 3 * H * W``."""
    return 3 * height * width


@dataclass(frozen=True)
class VideoGop:
    frames: torch.Tensor

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ShapeError(f"expected [N, 3, H, W] frames, got {tuple(self.frames.shape)}")
        n, _, h, w = self.frames.shape
        if n < 1:
            raise ShapeError("a GOP needs at least one frame")
        if h % SPATIAL_FACTOR or w % SPATIAL_FACTOR:
            raise ShapeError(f"H and W must be divisible by {SPATIAL_FACTOR}, got {h}x{w}")

    @property
    def n(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n, self.height, self.width

    @property
    def m(self) -> int:
        return source_dim(self.height, self.width)


def validate_gop(raw) -> VideoGop:
    """Check a raw ``[N, 3, H, W]`` array and wrap it as a :class:`VideoGop`.

    Values must already be in ``[0, 1]``; 8-bit data is rejected rather than
    silently rescaled.
    """
    if isinstance(raw, np.ndarray):
        raw = torch.from_numpy(raw)
    if not isinstance(raw, torch.Tensor):
        raw = torch.as_tensor(raw)
    if not (raw.is_floating_point() or raw.dtype in (torch.uint8, torch.int32, torch.int64)):
        raise TypeError(f"non-numeric GOP dtype {raw.dtype}")
    if raw.ndim != 4:
        raise ShapeError(f"GOP must be 4-dimensional, got {raw.ndim} dims")
    frames = raw.to(torch.float32) if not raw.is_floating_point() else raw
    if not torch.isfinite(frames).all():
        raise RangeError("GOP contains NaN or Inf")
    lo, hi = float(frames.min()), float(frames.max())
    if lo < 0.0 or hi > 1.0:
        raise RangeError(f"intensities must lie in [0, 1], got [{lo:g}, {hi:g}]")
    return VideoGop(frames)


@dataclass(frozen=True)
class FeatureTensor:
    """Per-frame feature maps ``[N, C, h, w]`` (latents or JSCC features)."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"expected [N, C, h, w], got {tuple(self.data.shape)}")

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.data).all())


@dataclass(frozen=True)
class FeatureDecomposition:
    """One common map ``[1, C, h, w]`` plus ``N`` individual maps ``[N, C, h, w]``.

    The stacked layout used for ranking and packing puts the individual maps
    first and the common map last, matching the symbol-stream order.
    """

    common: torch.Tensor
    individual: torch.Tensor

    def __post_init__(self):
        if self.common.ndim != 4 or self.common.shape[0] != 1:
            raise ShapeError(f"common map must be [1, C, h, w], got {tuple(self.common.shape)}")
        if self.individual.ndim != 4 or self.individual.shape[1:] != self.common.shape[1:]:
            raise ShapeError(
                f"individual maps {tuple(self.individual.shape)} do not match "
                f"common map {tuple(self.common.shape)}"
            )

    @property
    def n(self) -> int:
        return self.individual.shape[0]

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return tuple(self.common.shape[1:])

    def numel(self) -> int:
        return self.common.numel() + self.individual.numel()

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.individual, self.common], dim=0)

    @classmethod
    def from_stacked(cls, stacked: torch.Tensor) -> FeatureDecomposition:
        return cls(common=stacked[-1:], individual=stacked[:-1])


@dataclass(frozen=True)
class MaskDescriptor:
    """Everything the receiver needs to rebuild the keep-mask."""

    budget_symbols: int
    hyper_code: torch.Tensor


@dataclass(frozen=True)
class SymbolStream:
    """``N + 1`` real channel-input vectors.

    ``vectors[:N]`` carry the kept individual elements of each frame;
    ``vectors[N]`` starts with ``side_len`` error-free side-information
    symbols followed by the kept common elements.
    """

    vectors: tuple[torch.Tensor, ...]
    lengths: tuple[int, ...]
    side_len: int = 0
    mask_meta: MaskDescriptor | None = None

    def __post_init__(self):
        if len(self.vectors) != len(self.lengths):
            raise FramingError("vector count and length count differ")
        for i, (v, k) in enumerate(zip(self.vectors, self.lengths)):
            if v.ndim != 1 or v.numel() != k:
                raise FramingError(f"vector {i} has {v.numel()} symbols, header says {k}")
        if self.vectors and self.side_len > self.lengths[-1]:
            raise FramingError("side information longer than the last vector")

    @classmethod
    def build(
        cls,
        vectors: Sequence[torch.Tensor],
        side: torch.Tensor | None = None,
        mask_meta: MaskDescriptor | None = None,
    ) -> SymbolStream:
        """Assemble a stream, prefixing ``side`` onto the last vector."""
        vectors = [v.reshape(-1) for v in vectors]
        side_len = 0
        if side is not None:
            side = side.reshape(-1).to(vectors[-1].dtype)
            side_len = side.numel()
            vectors[-1] = torch.cat([side, vectors[-1]])
        return cls(
            vectors=tuple(vectors),
            lengths=tuple(int(v.numel()) for v in vectors),
            side_len=side_len,
            mask_meta=mask_meta,
        )

    @property
    def total(self) -> int:
        return sum(self.lengths)

    def side_symbols(self) -> torch.Tensor:
        return self.vectors[-1][: self.side_len]

    def feature_vectors(self) -> list[torch.Tensor]:
        """The vectors with the side-information prefix stripped."""
        return list(self.vectors[:-1]) + [self.vectors[-1][self.side_len:]]

    def replace_features(self, features: Sequence[torch.Tensor]) -> SymbolStream:
        return SymbolStream.build(features, side=self.side_symbols(), mask_meta=self.mask_meta)


def compute_cbr(stream: SymbolStream | Sequence[int], gop_dims: tuple[int, int, int]) -> float:
    """Channel bandwidth ratio: transmitted symbols over total source dimension ``N * 3HW``."""
    n, h, w = gop_dims
    if n <= 0 or h <= 0 or w <= 0:
        raise ValueError(f"GOP dimensions must be positive, got {gop_dims}")
    lengths = stream.lengths if isinstance(stream, SymbolStream) else stream
    return sum(int(k) for k in lengths) / (n * source_dim(h, w))


@dataclass(frozen=True)
class BandwidthBudget:
    target_cbr: float
    total_symbols: int

    @classmethod
    def from_cbr(
        cls, target_cbr: float, gop_dims: tuple[int, int, int], max_cbr: float | None = None
    ) -> BandwidthBudget:
        n, h, w = gop_dims
        if not target_cbr > 0 or not math.isfinite(target_cbr):
            raise ValueError(f"target CBR must be positive, got {target_cbr}")
        if max_cbr is not None and target_cbr > max_cbr:
            raise ValueError(f"target CBR {target_cbr} exceeds full-rate CBR {max_cbr:.6f}")
        total = n * source_dim(h, w)
        # epsilon guards grid values like 0.01 * 36864 landing just under an integer
        return cls(target_cbr=float(target_cbr), total_symbols=math.floor(target_cbr * total + 1e-9))
