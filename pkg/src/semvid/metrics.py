"""Distortion and quality measures on [0, 1] intensity frames.

GOP-level PSNR and MS-SSIM are means of per-frame values; the GOP's MS-SSIM
in dB is converted from the mean MS-SSIM. MS-SSIM uses an 11x11
Gaussian window (sigma 1.5), K1=0.01, K2=0.03 and the usual five scale
weights; frames too small for five scales use fewer (see
:func:`ms_ssim_scales`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable

import torch
import torch.nn.functional as F

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def mse(x: torch.Tensor, y: torch.Tensor) -> float:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return float((x.to(torch.float64) - y.to(torch.float64)).pow(2).mean())


def psnr_from_mse(err: float) -> float:
    return math.inf if err == 0 else 10.0 * math.log10(1.0 / err)


def psnr(x: torch.Tensor, y: torch.Tensor) -> float:
    """``10 log10(1 / MSE)``; identical inputs give ``inf``."""
    return psnr_from_mse(mse(x, y))


def ms_ssim_db(d: float) -> float:
    """Express an MS-SSIM value in dB as ``-10 log10(1 - d)``."""
    if d >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - d)


def ms_ssim_scales(height: int, width: int) -> int:
    """Largest scale count (at most 5) whose coarsest image is still >= 11 px."""
    size = min(height, width)
    m = 0
    while m < len(MS_SSIM_WEIGHTS) and size >= WIN_SIZE:
        m += 1
        size //= 2
    if m == 0:
        raise ValueError(f"{height}x{width} is smaller than the {WIN_SIZE}x{WIN_SIZE} window")
    return m


def _scale_weights(m: int) -> torch.Tensor:
    w = torch.tensor(MS_SSIM_WEIGHTS[:m], dtype=torch.float64)
    return w if m == len(MS_SSIM_WEIGHTS) else w / w.sum()


def _gauss_window() -> torch.Tensor:
    coords = torch.arange(WIN_SIZE, dtype=torch.float64) - WIN_SIZE // 2
    g = torch.exp(-(coords ** 2) / (2 * WIN_SIGMA ** 2))
    return g / g.sum()


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # separable valid-mode blur over [B, 1, H, W]
    x = F.conv2d(x, win.view(1, 1, 1, -1))
    return F.conv2d(x, win.view(1, 1, -1, 1))


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, win: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x ** 2
    syy = _filter(y * y, win) - mu_y ** 2
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + C2) / (sxx + syy + C2)
    lum = (2 * mu_x * mu_y + C1) / (mu_x ** 2 + mu_y ** 2 + C1)
    return (lum * cs).mean(dim=(-2, -1)), cs.mean(dim=(-2, -1))


def ms_ssim_per_image(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """MS-SSIM of every 2-D image in ``[..., H, W]``, returned with the leading shape."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    m = ms_ssim_scales(h, w)
    weights = _scale_weights(m)
    win = _gauss_window()
    x = x.reshape(-1, 1, h, w).to(torch.float64)
    y = y.reshape(-1, 1, h, w).to(torch.float64)
    levels = []
    for j in range(m):
        ssim, cs = _ssim_terms(x, y, win)
        levels.append(ssim if j == m - 1 else cs)
        if j < m - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    stack = torch.stack(levels, dim=-1).reshape(x.shape[0], m).clamp_min(0.0)
    return torch.prod(stack ** weights, dim=-1).reshape(lead)


def ms_ssim(x: torch.Tensor, y: torch.Tensor) -> float:
    """Mean MS-SSIM over all images (colour channels, frames) in the input."""
    return float(ms_ssim_per_image(x, y).mean())


@dataclass(frozen=True)
class FrameQuality:
    psnr_db: float
    ms_ssim: float
    ms_ssim_db: float


@dataclass(frozen=True)
class QualityReport:
    psnr_db: float
    ms_ssim: float
    ms_ssim_db: float
    cbr: float
    snr_db: float
    scales: int
    per_frame: tuple[FrameQuality, ...] = field(default_factory=tuple)


def evaluate_quality(gop: torch.Tensor, gop_hat: torch.Tensor, cbr: float = math.nan,
                     snr_db: float = math.nan) -> QualityReport:
    """Per-frame PSNR / MS-SSIM on ``[N, 3, H, W]`` and their GOP means."""
    if gop.shape != gop_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(gop.shape)} vs {tuple(gop_hat.shape)}")
    per_img = ms_ssim_per_image(gop, gop_hat).mean(dim=1)
    frames = []
    for n in range(gop.shape[0]):
        d = float(per_img[n])
        frames.append(FrameQuality(psnr(gop[n], gop_hat[n]), d, ms_ssim_db(d)))
    mean_ms = sum(f.ms_ssim for f in frames) / len(frames)
    return QualityReport(
        psnr_db=sum(f.psnr_db for f in frames) / len(frames),
        ms_ssim=mean_ms,
        ms_ssim_db=ms_ssim_db(mean_ms),
        cbr=cbr,
        snr_db=snr_db,
        scales=ms_ssim_scales(*gop.shape[-2:]),
        per_frame=tuple(frames),
    )


# --- CSV ----------------------------------------------------------------------

RESULT_COLUMNS = ("clip_id", "gop_index", "cbr", "snr_db", "psnr_db", "ms_ssim", "ms_ssim_db")


@dataclass(frozen=True)
class ResultRow:
    clip_id: str
    gop_index: int
    cbr: float
    snr_db: float
    psnr_db: float
    ms_ssim: float
    ms_ssim_db: float
    seed: int | None = None

    @classmethod
    def from_report(cls, clip_id: str, gop_index: int, report: QualityReport,
                    seed: int | None = None) -> ResultRow:
        return cls(clip_id, gop_index, report.cbr, report.snr_db, report.psnr_db,
                   report.ms_ssim, report.ms_ssim_db, seed)


def _fmt(value) -> str:
    if isinstance(value, float):
        return "inf" if value == math.inf else repr(value)
    return "" if value is None else str(value)


def write_results(path, rows: Iterable[ResultRow], with_seed: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = RESULT_COLUMNS + (("seed",) if with_seed else ())
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(getattr(row, c)) for c in columns])
    return path


def read_results(path) -> list[ResultRow]:
    types = {f.name: f.type for f in fields(ResultRow)}
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in RESULT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for rec in reader:
            kw = {}
            for name in types:
                raw = rec.get(name)
                if name == "clip_id":
                    kw[name] = raw
                elif name in ("gop_index", "seed"):
                    kw[name] = int(raw) if raw not in (None, "") else None
                else:
                    kw[name] = float(raw)
            out.append(ResultRow(**kw))
    return out


def report_as_dict(report: QualityReport) -> dict:
    return asdict(report)
