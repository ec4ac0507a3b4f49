"""Transmit, sweep and baseline bookkeeping behind the command line."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import ClipManifest, load_clip, write_frames
from .metrics import ResultRow, read_results, write_results
from .model import SemanticVideoCodec
from .pipeline import ChannelReport, forward_pipeline
from .types import SPATIAL_FACTOR, ShapeError, VideoGop

log = logging.getLogger(__name__)

BASELINE_COLUMNS = ("label", "cbr", "snr_db", "psnr_db", "ms_ssim")
SUMMARY_COLUMNS = ("label", "cbr", "snr_db", "psnr_db", "ms_ssim", "ms_ssim_db")
MODEL_LABEL = "model"


class SchemaError(ValueError):
    pass


def split_gops(frames: torch.Tensor, gop_size: int) -> list[torch.Tensor]:
    """Consecutive GOPs; the last one may be shorter."""
    return [frames[i:i + gop_size] for i in range(0, frames.shape[0], gop_size)]


def check_dims(frames: torch.Tensor, where) -> None:
    h, w = frames.shape[-2:]
    if h % SPATIAL_FACTOR or w % SPATIAL_FACTOR:
        raise ShapeError(f"{where}: {h}x{w} frames are not divisible by {SPATIAL_FACTOR}")


def gop_seed(seed: int, clip_index: int, gop_index: int) -> int:
    return int(np.random.SeedSequence([seed, clip_index, gop_index]).generate_state(1)[0])


@dataclass(frozen=True)
class TransmitOutcome:
    frames: torch.Tensor
    reports: tuple[ChannelReport, ...]
    rows: tuple[ResultRow, ...]


def transmit_clip(model: SemanticVideoCodec, clip_dir, cbr: float, snr_db: float, seed: int,
                  clip_index: int = 0) -> TransmitOutcome:
    """Send a whole clip GOP by GOP; returns the reconstruction and per-GOP reports."""
    frames = load_clip(clip_dir)
    check_dims(frames, clip_dir)
    clip_id = Path(clip_dir).name
    outs, reports, rows = [], [], []
    for g, chunk in enumerate(split_gops(frames, model.config.gop_size)):
        gop_hat, report = forward_pipeline(model, VideoGop(chunk), cbr, snr_db,
                                           gop_seed(seed, clip_index, g))
        outs.append(gop_hat.frames)
        reports.append(report)
        rows.append(ResultRow.from_report(clip_id, g, report.quality, seed))
    return TransmitOutcome(torch.cat(outs), tuple(reports), tuple(rows))


def report_to_json(report: ChannelReport) -> dict:
    d = asdict(report)
    q = d.get("quality") or {}
    for k, v in list(q.items()):
        if isinstance(v, float) and math.isinf(v):
            q[k] = "inf"
    for f in q.get("per_frame", []):
        for k, v in list(f.items()):
            if isinstance(v, float) and math.isinf(v):
                f[k] = "inf"
    return d


def write_transmit_outputs(outcome: TransmitOutcome, out_dir) -> dict:
    out_dir = Path(out_dir)
    paths = write_frames(outcome.frames, out_dir / "frames")
    write_results(out_dir / "transmit.csv", outcome.rows)
    (out_dir / "transmit_report.json").write_text(
        json.dumps([report_to_json(r) for r in outcome.reports], indent=2) + "\n")
    return {"frames": paths, "csv": out_dir / "transmit.csv"}


def describe_accounting(report: ChannelReport, n_frames: int, m: int) -> str:
    k = ", ".join(str(x) for x in report.lengths)
    return (
        f"target CBR {report.target_cbr:g}, achieved CBR {report.achieved_cbr:.8f} "
        f"({report.total_symbols} / {n_frames * m} {report.channel_use} channel uses); "
        f"k_n = [{k}]; side info {report.side_symbols} symbols; "
        f"kept per map {list(report.kept_per_map)}"
    )


# --- sweeps -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    checkpoint: Path
    manifest: Path
    output: Path
    cbr_grid: tuple[float, ...] = (0.005, 0.010, 0.015, 0.020, 0.025)
    snr_grid: tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    seeds: tuple[int, ...] = (0,)
    baselines: tuple[Path, ...] = ()

    def __post_init__(self):
        for name in ("cbr_grid", "snr_grid", "seeds"):
            grid = getattr(self, name)
            if not grid:
                raise ValueError(f"{name} must not be empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {list(grid)}")


def _sort_key(row: ResultRow) -> tuple:
    return (row.cbr, row.snr_db, row.seed, row.clip_id, row.gop_index)


def run_sweep(model: SemanticVideoCodec, spec: ExperimentSpec) -> dict:
    """Evaluate every (cbr, snr, seed) cell over every GOP of every clip.

    Cells already present in ``results.csv`` are not recomputed, so a re-run
    with the same grid leaves the file unchanged. Failing cells are logged to
    ``failures.csv`` and the sweep carries on.
    """
    out = Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    results_path = out / "results.csv"
    existing = read_results(results_path) if results_path.exists() else []
    done_cells = {(r.cbr, r.snr_db, r.seed) for r in existing}
    manifest = ClipManifest.from_file(spec.manifest)
    clips = []
    for i, clip in enumerate(manifest.clips):
        frames = load_clip(clip)
        clips.append((i, clip, frames))

    rows, failures = list(existing), []
    for cbr in spec.cbr_grid:
        for snr in spec.snr_grid:
            for seed in spec.seeds:
                if (cbr, float(snr), seed) in done_cells:
                    continue
                try:
                    cell = []
                    for ci, clip, frames in clips:
                        check_dims(frames, clip)
                        for g, chunk in enumerate(split_gops(frames, model.config.gop_size)):
                            gop_hat, report = forward_pipeline(model, VideoGop(chunk), cbr, snr,
                                                               gop_seed(seed, ci, g))
                            cell.append(ResultRow(Path(clip).name, g, cbr, float(snr),
                                                  report.quality.psnr_db, report.quality.ms_ssim,
                                                  report.quality.ms_ssim_db, seed))
                    rows.extend(cell)
                except Exception as exc:  # noqa: BLE001 - record and continue
                    log.warning("cell cbr=%g snr=%g seed=%d failed: %s", cbr, snr, seed, exc)
                    failures.append({"cbr": cbr, "snr_db": snr, "seed": seed, "error": str(exc)})

    rows.sort(key=_sort_key)
    write_results(results_path, rows, with_seed=True)
    if failures:
        with (out / "failures.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["cbr", "snr_db", "seed", "error"])
            writer.writeheader()
            writer.writerows(failures)
    baselines = [load_baseline(p) for p in spec.baselines]
    for b in baselines:
        store_baseline(b, out)
    summary = summarize(rows)
    write_summary(out / "summary.csv", summary)
    plots = make_plots(summary, load_stored_baselines(out), out)
    return {"results": results_path, "rows": rows, "failures": failures, "plots": plots}


def summarize(rows: Iterable[ResultRow]) -> list[dict]:
    """Mean metrics per (cbr, snr) cell across clips, GOPs and seeds."""
    cells: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        cells.setdefault((r.cbr, r.snr_db), []).append(r)
    out = []
    for (cbr, snr), rs in sorted(cells.items()):
        ms = sum(r.ms_ssim for r in rs) / len(rs)
        out.append({
            "label": MODEL_LABEL, "cbr": cbr, "snr_db": snr,
            "psnr_db": sum(r.psnr_db for r in rs) / len(rs),
            "ms_ssim": ms,
            "ms_ssim_db": math.inf if ms >= 1 else -10 * math.log10(1 - ms),
        })
    return out


def write_summary(path, summary: Sequence[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for s in summary:
            writer.writerow([s["label"]] + [repr(float(s[c])) if not math.isinf(s[c]) else "inf"
                                             for c in SUMMARY_COLUMNS[1:]])
    return path


# --- baselines ----------------------------------------------------------------

@dataclass(frozen=True)
class BaselinePoint:
    label: str
    cbr: float
    snr_db: float
    psnr_db: float
    ms_ssim: float

    @property
    def ms_ssim_db(self) -> float:
        return math.inf if self.ms_ssim >= 1 else -10 * math.log10(1 - self.ms_ssim)


@dataclass(frozen=True)
class BaselineSeries:
    name: str
    points: tuple[BaselinePoint, ...]

    def labels(self) -> list[str]:
        return sorted({p.label for p in self.points})


def load_baseline(path, name: str | None = None) -> BaselineSeries:
    """Read and validate externally computed results (label, cbr, snr_db, psnr_db, ms_ssim)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in BASELINE_COLUMNS if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing} (expected {list(BASELINE_COLUMNS)})")
        points, errors = [], []
        for i, rec in enumerate(reader, start=1):
            try:
                p = BaselinePoint(
                    label=(rec["label"] or "").strip(),
                    cbr=float(rec["cbr"]),
                    snr_db=float(rec["snr_db"]),
                    psnr_db=float(rec["psnr_db"]),
                    ms_ssim=float(rec["ms_ssim"]),
                )
            except (TypeError, ValueError) as exc:
                errors.append(f"row {i}: {exc}")
                continue
            if not p.label:
                errors.append(f"row {i}: empty label")
            if not p.cbr > 0:
                errors.append(f"row {i}: cbr must be > 0, got {p.cbr}")
            if not 0.0 <= p.ms_ssim <= 1.0:
                errors.append(f"row {i}: ms_ssim must be in [0, 1], got {p.ms_ssim}")
            points.append(p)
    if errors:
        raise ValueError(f"{path}: " + "; ".join(errors))
    return BaselineSeries(name or path.stem, tuple(points))


def store_baseline(series: BaselineSeries, out_dir) -> Path:
    target = Path(out_dir) / "baselines" / f"{series.name}.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BASELINE_COLUMNS)
        for p in series.points:
            writer.writerow([p.label, repr(p.cbr), repr(p.snr_db), repr(p.psnr_db), repr(p.ms_ssim)])
    return target


def load_stored_baselines(out_dir) -> list[BaselineSeries]:
    folder = Path(out_dir) / "baselines"
    if not folder.is_dir():
        return []
    return [load_baseline(p) for p in sorted(folder.glob("*.csv"))]


# --- plots --------------------------------------------------------------------

def _series(points: Iterable[dict | BaselinePoint], x: str, fixed: str, value: float):
    pts = []
    for p in points:
        get = p.get if isinstance(p, dict) else (lambda k, p=p: getattr(p, k))
        if math.isclose(get(fixed), value, rel_tol=1e-9, abs_tol=1e-12):
            pts.append((get(x), get("psnr_db"), get("ms_ssim_db")))
    return sorted(pts)


def make_plots(summary: Sequence[dict], baselines: Sequence[BaselineSeries], out_dir) -> list[Path]:
    """Metric-vs-CBR at each SNR and metric-vs-SNR at each CBR, baselines overlaid."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir) / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    base_points = [p for b in baselines for p in b.points]
    for x, fixed, unit in (("cbr", "snr_db", "dB"), ("snr_db", "cbr", "")):
        for value in sorted({s[fixed] for s in summary}):
            fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
            model_pts = _series(summary, x, fixed, value)
            labels = sorted({p.label for p in base_points})
            for ax, idx, ylabel in ((axes[0], 1, "PSNR (dB)"), (axes[1], 2, "MS-SSIM (dB)")):
                ax.plot([p[0] for p in model_pts], [p[idx] for p in model_pts], "r*-", label=MODEL_LABEL)
                for label in labels:
                    pts = _series([p for p in base_points if p.label == label], x, fixed, value)
                    if pts:
                        ax.plot([p[0] for p in pts], [p[idx] for p in pts], "o--", label=label)
                ax.set_xlabel("CBR" if x == "cbr" else "SNR (dB)")
                ax.set_ylabel(ylabel)
                ax.grid(True, alpha=0.3)
            axes[0].legend(fontsize=7)
            title = f"SNR = {value:g} dB" if fixed == "snr_db" else f"CBR = {value:g}"
            fig.suptitle(title)
            fig.tight_layout()
            name = f"vs_{'cbr' if x == 'cbr' else 'snr'}_{fixed}_{value:g}{unit}.png"
            path = out_dir / name
            fig.savefig(path, dpi=100)
            plt.close(fig)
            paths.append(path)
    return paths


def rebuild_report(out_dir) -> dict:
    """Regenerate the summary and plots from an existing ``results.csv``."""
    out_dir = Path(out_dir)
    rows = read_results(out_dir / "results.csv")
    summary = summarize(rows)
    write_summary(out_dir / "summary.csv", summary)
    return {"summary": out_dir / "summary.csv",
            "plots": make_plots(summary, load_stored_baselines(out_dir), out_dir)}

