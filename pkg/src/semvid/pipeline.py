"""End-to-end transmission of a GOP.

latent transform -> JSCC encode -> common/individual split -> entropy model
-> keep-mask -> pack -> power norm -> channel -> (receiver) mask rebuild from
side info -> unpack -> recombine -> JSCC decode -> latent inversion.

The same code path serves training (gradients on, noisy hyper code) and
inference (hard rounding, no grad).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .channel import ChannelConfig, normalize_with_gain, transmit_stream
from .entropy import (
    EntropyModel,
    KeepMask,
    _halvings,
    build_mask,
    entropy_analyze,
    mask_scores,
    pack,
    rate_loss,
    unpack,
)
from .metrics import QualityReport, evaluate_quality
from .model import SemanticVideoCodec, recombine
from .types import (
    BandwidthBudget,
    FeatureDecomposition,
    InfeasibleBudgetError,
    MaskDescriptor,
    SymbolStream,
    VideoGop,
    compute_cbr,
    source_dim,
)

CHANNEL_USE = "real"


def hyper_code_shape(n_frames: int, channels: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Shape of the side-information code for a GOP of the given pixel size."""
    h, w = height // 16, width // 16
    stages = EntropyModel.STAGES
    return (n_frames + 1, channels, _halvings(h, stages)[-1], _halvings(w, stages)[-1])


def side_cost_symbols(n_frames: int, channels: int, height: int, width: int) -> int:
    shape = hyper_code_shape(n_frames, channels, height, width)
    return math.prod(shape) + shape[0]


def feature_count(n_frames: int, channels: int, height: int, width: int) -> int:
    return (n_frames + 1) * channels * (height // 16) * (width // 16)


def min_cbr(n_frames: int, channels: int, height: int, width: int) -> float:
    return side_cost_symbols(n_frames, channels, height, width) / (n_frames * source_dim(height, width))


def full_rate_cbr(n_frames: int, channels: int, height: int, width: int) -> float:
    total = feature_count(n_frames, channels, height, width) + side_cost_symbols(
        n_frames, channels, height, width)
    return total / (n_frames * source_dim(height, width))


def mask_from_side(entropy: EntropyModel, hyper_code: torch.Tensor, map_hw: tuple[int, int],
                   kept: int) -> KeepMask:
    """Keep-mask as a pure function of the side information; used by both ends."""
    sigma = entropy.decode(hyper_code, map_hw)
    return build_mask(mask_scores(sigma), kept)


@dataclass
class LinkResult:
    decomp_hat: FeatureDecomposition
    stream: SymbolStream
    mask: KeepMask
    side_cost: int
    rate_bits: torch.Tensor
    degenerate: list[int] = field(default_factory=list)


def transmit_features(
    model: SemanticVideoCodec,
    decomp: FeatureDecomposition,
    budget_symbols: int,
    channel: ChannelConfig,
    generator: torch.Generator | None = None,
    training: bool = False,
) -> LinkResult:
    """Everything between the common feature extractor and recombination."""
    if generator is None:
        generator = channel.generator()
    side, sigma = entropy_analyze(model.entropy, decomp, training=training, generator=generator)
    kept = budget_symbols - side.cost_symbols
    if kept < 0:
        raise InfeasibleBudgetError(
            f"budget of {budget_symbols} symbols cannot carry {side.cost_symbols} side-information symbols",
        )
    if kept > decomp.numel():
        raise ValueError(
            f"budget of {budget_symbols} symbols exceeds full rate "
            f"({decomp.numel() + side.cost_symbols} symbols)"
        )
    map_hw = tuple(decomp.common.shape[-2:])
    code = side.hyper_code
    mask = mask_from_side(model.entropy, code, map_hw, kept)

    normalized, gains, degenerate = [], [], []
    for i, v in enumerate(pack(decomp, mask)):
        if v.numel() == 0:
            normalized.append(v)
            gains.append(v.new_zeros(()))
            continue
        s, g, flat = normalize_with_gain(v, strict=False)
        if flat:
            degenerate.append(i)
        normalized.append(s)
        gains.append(g)
    side_payload = torch.cat([code.reshape(-1).to(decomp.common.dtype), torch.stack(gains)])
    stream = SymbolStream.build(normalized, side=side_payload,
                                mask_meta=MaskDescriptor(budget_symbols, code.detach()))
    received = transmit_stream(stream, channel, generator)

    # receiver: rebuild the mask from side info only
    rx_side = received.side_symbols()
    rx_code = rx_side[: code.numel()].reshape(code.shape)
    rx_gains = rx_side[code.numel():]
    rx_mask = mask if training else mask_from_side(model.entropy, rx_code, map_hw, kept)
    restored = [v * rx_gains[i] for i, v in enumerate(received.feature_vectors())]
    decomp_hat = unpack(restored, rx_mask)

    rate = (rate_loss(decomp.stacked().detach() / side.scale, sigma / side.scale,
                      training=training, generator=generator)
            if training else sigma.new_zeros(()))
    return LinkResult(decomp_hat, stream, mask, side.cost_symbols, rate, degenerate)


@dataclass(frozen=True)
class ChannelReport:
    target_cbr: float
    achieved_cbr: float
    snr_db: float
    channel_kind: str
    total_symbols: int
    side_symbols: int
    lengths: tuple[int, ...]
    kept_per_map: tuple[int, ...]
    degenerate_vectors: tuple[int, ...]
    channel_use: str
    quality: QualityReport | None = None


def channel_for(snr_db: float, seed: int) -> ChannelConfig:
    """AWGN at ``snr_db``; an infinite SNR means a noiseless channel."""
    if math.isinf(snr_db) and snr_db > 0:
        return ChannelConfig(kind="identity", snr_db=snr_db, seed=seed)
    return ChannelConfig(kind="awgn", snr_db=snr_db, seed=seed)


def forward_pipeline(
    model: SemanticVideoCodec,
    gop: VideoGop,
    budget: BandwidthBudget | float,
    snr_db: float,
    rng_seed: int = 0,
    with_quality: bool = True,
) -> tuple[VideoGop, ChannelReport]:
    """Send one GOP end to end and report the bandwidth accounting and quality."""
    n, h, w = gop.dims
    c = model.config.channel_dim
    if not isinstance(budget, BandwidthBudget):
        budget = BandwidthBudget.from_cbr(budget, gop.dims)
    side = side_cost_symbols(n, c, h, w)
    if budget.total_symbols < side:
        lo = min_cbr(n, c, h, w)
        raise InfeasibleBudgetError(
            f"CBR {budget.target_cbr:g} gives {budget.total_symbols} symbols but side information "
            f"needs {side}; minimum feasible CBR is {lo:.6g}",
            min_cbr=lo,
        )
    full = full_rate_cbr(n, c, h, w)
    if budget.total_symbols > feature_count(n, c, h, w) + side:
        raise ValueError(f"CBR {budget.target_cbr:g} exceeds full-rate CBR {full:.6g}")

    channel = channel_for(snr_db, rng_seed)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            frames = gop.frames.to(next(model.parameters()).dtype)
            decomp = model.encode_gop(frames)
            link = transmit_features(model, decomp, budget.total_symbols, channel)
            gop_hat = model.decode_features(recombine(link.decomp_hat), clamp=True)
    finally:
        model.train(was_training)

    achieved = compute_cbr(link.stream, gop.dims)
    quality = evaluate_quality(gop.frames, gop_hat, cbr=achieved, snr_db=snr_db) if with_quality else None
    report = ChannelReport(
        target_cbr=budget.target_cbr,
        achieved_cbr=achieved,
        snr_db=snr_db,
        channel_kind=channel.kind,
        total_symbols=link.stream.total,
        side_symbols=link.side_cost,
        lengths=link.stream.lengths,
        kept_per_map=tuple(link.mask.per_map_counts()),
        degenerate_vectors=tuple(link.degenerate),
        channel_use=CHANNEL_USE,
        quality=quality,
    )
    return VideoGop(gop_hat.to(gop.frames.dtype)), report


def run_batch(
    model: SemanticVideoCodec,
    frames: torch.Tensor,
    budget_symbols: int,
    channel: ChannelConfig,
    generator: torch.Generator,
    training: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable pass over a batch ``[B, N, 3, H, W]`` of GOPs.

    Convolutional stages run on all frames at once; the per-GOP link (mask,
    packing, channel) runs GOP by GOP. Returns reconstructions (unclamped
    when training) and the summed rate surrogate in bits.
    """
    b, n = frames.shape[:2]
    flat = frames.reshape(b * n, *frames.shape[2:])
    features = model.jscc_encode(model.latent_transform(flat))
    features = features.reshape(b, n, *features.shape[1:])
    recovered, rate = [], frames.new_zeros(())
    for i in range(b):
        decomp = model.extract_common(features[i])
        link = transmit_features(model, decomp, budget_symbols, channel, generator, training=training)
        recovered.append(recombine(link.decomp_hat))
        rate = rate + link.rate_bits
    out = model.decode_features(torch.cat(recovered), clamp=not training)
    return out.reshape(frames.shape), rate
