"""End-to-end training with in-loop channel noise and a cosine-annealed learning rate.

Every source of randomness in a step (batch, budget, channel noise, hyper-code
relaxation) is seeded from ``(seed, step)``, so a run resumed from a
checkpoint reproduces the uninterrupted loss trajectory exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .channel import ChannelConfig
from .data import ClipManifest, load_clip, sample_batch, usable_clips
from .metrics import psnr
from .model import ModelConfig, SemanticVideoCodec, read_checkpoint, save_checkpoint
from .pipeline import forward_pipeline, run_batch
from .types import BandwidthBudget, VideoGop, source_dim

log = logging.getLogger(__name__)

DEFAULT_CBR_GRID = (0.005, 0.010, 0.015, 0.020, 0.025)
LOG_COLUMNS = ("step", "lr", "loss", "mse", "rate_bits", "cbr")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: Path):
        super().__init__(f"loss became non-finite at step {step}; diagnostic checkpoint at {checkpoint}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    lambda_rd: float = 8192.0
    beta_rate: float = 0.01
    lr_init: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    crop: int = 64
    gop_size: int = 3
    channel_dim: int = 32
    snr_train_db: float = 10.0
    seed: int = 0
    cbr_grid: tuple[float, ...] = DEFAULT_CBR_GRID
    checkpoint_every: int = 500
    eval_every: int = 100
    eval_cbr: float = 0.015

    def __post_init__(self):
        for name in ("lambda_rd", "lr_init", "batch_size", "steps", "crop", "gop_size", "channel_dim"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.beta_rate < 0:
            raise ValueError("beta_rate must be non-negative")
        if self.crop % 16:
            raise ValueError(f"crop must be divisible by 16, got {self.crop}")
        if not self.cbr_grid or any(c <= 0 for c in self.cbr_grid):
            raise ValueError("cbr_grid must be a non-empty list of positive ratios")

    def model_config(self) -> ModelConfig:
        return ModelConfig(channel_dim=self.channel_dim, gop_size=self.gop_size,
                           snr_train_db=self.snr_train_db)

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        values = dict(values)
        if "cbr_grid" in values:
            values["cbr_grid"] = tuple(float(c) for c in values["cbr_grid"])
        return cls(**values)


def lr_schedule(step: int, total_steps: int, lr_init: float) -> float:
    """Cosine annealing from ``lr_init`` at step 0 down to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def loss(gop: torch.Tensor, gop_hat: torch.Tensor, realized_cbr: float, rate_bits,
         lambda_rd: float = 8192.0, beta: float = 0.01) -> tuple[torch.Tensor, dict]:
    """``lambda * K + D`` for one GOP or a batch of GOPs.

    ``D`` is the MSE. ``K`` is the realized CBR (a constant under an explicit
    budget) plus ``beta * rate_bits / (N m)``, a differentiable surrogate that
    gives the entropy model a training signal. ``rate_bits`` is per GOP.
    """
    if gop.shape != gop_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(gop.shape)} vs {tuple(gop_hat.shape)}")
    n = gop.shape[-4]
    total_dim = n * source_dim(gop.shape[-2], gop.shape[-1])
    distortion = (gop - gop_hat).pow(2).mean()
    rate_bits = torch.as_tensor(rate_bits, dtype=distortion.dtype)
    k = realized_cbr + beta * rate_bits / total_dim
    total = lambda_rd * k + distortion
    return total, {"mse": float(distortion.detach()), "rate_bits": float(rate_bits.detach()),
                   "k": float(k.detach())}


def _step_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(step)])


def holdout_psnr(model: SemanticVideoCodec, frames: torch.Tensor, cbr: float, snr_db: float,
                 seed: int = 0) -> float:
    """PSNR of one GOP sent through the full pipeline."""
    gop = VideoGop(frames)
    gop_hat, _ = forward_pipeline(model, gop, cbr, snr_db, seed, with_quality=False)
    return psnr(gop.frames, gop_hat.frames)


def holdout_gop(clip_dir, gop_size: int, crop: int) -> torch.Tensor:
    """First ``gop_size`` frames of a clip, centre-cropped to ``crop`` pixels."""
    clip = load_clip(clip_dir)
    _, _, h, w = clip.shape
    top, left = (h - crop) // 2, (w - crop) // 2
    return clip[:gop_size, :, top:top + crop, left:left + crop]


@dataclass
class TrainResult:
    model: SemanticVideoCodec
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def _append_csv(path: Path, columns, rows):
    new = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])


def train(manifest: ClipManifest, cfg: TrainConfig, out_dir, holdout_clip=None,
          resume_from=None, stop_after: int | None = None) -> TrainResult:
    """Optimize every module jointly.

    Each step draws a batch, a budget from ``cfg.cbr_grid`` and AWGN noise at
    ``cfg.snr_train_db``. Checkpoints carry the optimizer state and step.
    ``stop_after`` ends the run early (for resume tests) without changing the
    learning-rate schedule.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = SemanticVideoCodec(cfg.model_config())
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init)
    start = 0
    if resume_from is not None:
        payload = read_checkpoint(resume_from)
        saved = TrainConfig.from_dict(payload["train_config"])
        if saved != cfg:
            raise ValueError("cannot resume: training config differs from the checkpoint's")
        model.load_state_dict(payload["state_dict"])
        optimizer.load_state_dict(payload["optimizer"])
        start = int(payload["step"])
        log.info("resumed from %s at step %d", resume_from, start)

    clips = usable_clips(manifest, cfg.gop_size, cfg.crop)
    if not clips:
        raise ValueError("no usable clips in the manifest")
    held = holdout_gop(holdout_clip, cfg.gop_size, cfg.crop) if holdout_clip else None
    n, m = cfg.gop_size, source_dim(cfg.crop, cfg.crop)
    log_path, eval_path = out_dir / "train_log.csv", out_dir / "eval_log.csv"
    result = TrainResult(model)

    def checkpoint(step: int, name: str) -> Path:
        return save_checkpoint(out_dir / name, model, extra={
            "optimizer": optimizer.state_dict(),
            "step": step,
            "train_config": asdict(cfg),
        })

    def evaluate(step: int):
        if held is None:
            return
        row = {"step": step, "holdout_psnr": holdout_psnr(model, held, cfg.eval_cbr, cfg.snr_train_db)}
        result.evals.append(row)
        _append_csv(eval_path, ("step", "holdout_psnr"), [row])
        log.info("step %d holdout PSNR %.2f dB", step, row["holdout_psnr"])

    if start == 0:
        evaluate(0)
    end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
    model.train()
    for step in range(start, end):
        seq = _step_seed(cfg.seed, step)
        batch_seed, noise_seed = (int(s) for s in seq.generate_state(2))
        rng = np.random.default_rng(seq)
        cbr = float(cfg.cbr_grid[int(rng.integers(len(cfg.cbr_grid)))])
        budget = BandwidthBudget.from_cbr(cbr, (n, cfg.crop, cfg.crop))
        batch = sample_batch(manifest, cfg.batch_size, n, cfg.crop, batch_seed, clips=clips)

        lr = lr_schedule(step, cfg.steps, cfg.lr_init)
        for group in optimizer.param_groups:
            group["lr"] = lr
        channel = ChannelConfig("awgn", cfg.snr_train_db, noise_seed)
        gen = channel.generator()
        recon, rate = run_batch(model, batch.frames, budget.total_symbols, channel, gen, training=True)
        total, parts = loss(batch.frames, recon, budget.total_symbols / (n * m),
                            rate / cfg.batch_size, cfg.lambda_rd, cfg.beta_rate)
        if not torch.isfinite(total):
            raise TrainingDiverged(step, checkpoint(step, "diverged.pt"))
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()

        row = {"step": step, "lr": lr, "loss": float(total.detach()), "mse": parts["mse"],
               "rate_bits": parts["rate_bits"], "cbr": budget.total_symbols / (n * m)}
        result.log.append(row)
        _append_csv(log_path, LOG_COLUMNS, [row])
        done = step + 1
        if done % cfg.checkpoint_every == 0 or done == end:
            result.checkpoint = checkpoint(done, "checkpoint.pt")
        if done % cfg.eval_every == 0 or done == cfg.steps:
            evaluate(done)
    model.eval()
    if result.checkpoint is None:
        result.checkpoint = checkpoint(start, "checkpoint.pt")
    return result
