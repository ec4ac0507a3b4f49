"""Clip manifests, frame I/O, batch sampling and a synthetic toy-clip generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png",)


def list_frames(clip_dir) -> list[Path]:
    """Frame files of a clip; lexicographic name order is temporal order."""
    clip_dir = Path(clip_dir)
    if not clip_dir.is_dir():
        raise FileNotFoundError(f"clip directory {clip_dir} does not exist")
    return sorted(p for p in clip_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def read_frame(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_clip(clip_dir) -> torch.Tensor:
    """All frames of a clip as ``[T, 3, H, W]`` floats in [0, 1]."""
    frames = [read_frame(p) for p in list_frames(clip_dir)]
    if not frames:
        raise ValueError(f"no frames in {clip_dir}")
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ValueError(f"frames in {clip_dir} differ in size: {sorted(shapes)}")
    arr = np.stack(frames).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def to_uint8(frames: torch.Tensor) -> np.ndarray:
    """``[N, 3, H, W]`` in [0, 1] to ``[N, H, W, 3]`` uint8 (round half to even)."""
    arr = frames.detach().cpu().clamp(0, 1).permute(0, 2, 3, 1).numpy()
    return np.rint(arr * 255.0).astype(np.uint8)


def write_frames(frames: torch.Tensor, out_dir, prefix: str = "frame", start: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(to_uint8(frames), start=start):
        path = out_dir / f"{prefix}_{i:05d}.png"
        Image.fromarray(img).save(path, format="PNG", optimize=False)
        paths.append(path)
    return paths


@dataclass(frozen=True)
class ClipManifest:
    clips: tuple[Path, ...]

    @classmethod
    def from_file(cls, path) -> ClipManifest:
        """One clip directory per line; relative paths resolve against the manifest's folder."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest {path} does not exist")
        clips = []
        for line in path.read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            p = Path(line)
            clips.append(p if p.is_absolute() else (path.parent / p).resolve())
        return cls(tuple(clips))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{c}\n" for c in self.clips))
        return path


@lru_cache(maxsize=256)
def _cached_clip(clip_dir: str) -> torch.Tensor:
    return load_clip(clip_dir)


def usable_clips(manifest: ClipManifest, gop_size: int, crop: int) -> list[Path]:
    """Clips long and large enough for sampling; the rest are skipped with a warning."""
    keep = []
    for clip in manifest.clips:
        n = len(list_frames(clip))
        if n < gop_size:
            log.warning("skipping %s: %d frames < gop_size %d", clip, n, gop_size)
            continue
        _, _, h, w = _cached_clip(str(clip)).shape
        if h < crop or w < crop:
            log.warning("skipping %s: %dx%d smaller than crop %d", clip, h, w, crop)
            continue
        keep.append(clip)
    return keep


@dataclass(frozen=True)
class Batch:
    frames: torch.Tensor  # [B, N, 3, crop, crop]
    picks: tuple[tuple[int, int, int, int], ...]  # (clip index, first frame, top, left)


def sample_batch(manifest: ClipManifest, batch_size: int, gop_size: int, crop: int,
                 seed: int, clips: Sequence[Path] | None = None) -> Batch:
    """Uniformly pick clips, take ``gop_size`` consecutive frames and one shared crop per GOP."""
    if not manifest.clips:
        raise ValueError("manifest is empty")
    if clips is None:
        clips = usable_clips(manifest, gop_size, crop)
    if not clips:
        raise ValueError("no clip in the manifest has enough frames for one GOP")
    rng = np.random.default_rng(seed)
    gops, picks = [], []
    for _ in range(batch_size):
        ci = int(rng.integers(len(clips)))
        clip = _cached_clip(str(clips[ci]))
        t, _, h, w = clip.shape
        start = int(rng.integers(t - gop_size + 1))
        top = int(rng.integers(h - crop + 1))
        left = int(rng.integers(w - crop + 1))
        gops.append(clip[start:start + gop_size, :, top:top + crop, left:left + crop])
        picks.append((ci, start, top, left))
    return Batch(torch.stack(gops), tuple(picks))


# --- synthetic clips ----------------------------------------------------------

def synthetic_clip(seed: int, frames: int = 7, size: int = 96) -> np.ndarray:
    """A toy clip ``[T, H, W, 3]`` uint8: smooth drifting background, moving
    blobs and a static corner logo shared by every frame."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = rng.uniform(0.2, 0.8, size=3)
    waves = [(rng.uniform(0.5, 3.0, 2), rng.uniform(0, 2 * np.pi), rng.uniform(0.05, 0.2, 3))
             for _ in range(3)]
    drift = rng.uniform(-0.03, 0.03, 2)
    blobs = [(rng.uniform(0.2, 0.8, 2), rng.uniform(-0.04, 0.04, 2), rng.uniform(0.06, 0.15),
              rng.uniform(0, 1, 3)) for _ in range(int(rng.integers(2, 5)))]
    logo = rng.uniform(0, 1, 3)
    out = np.empty((frames, size, size, 3))
    for t in range(frames):
        img = np.broadcast_to(base, (size, size, 3)).copy()
        for freq, phase, amp in waves:
            arg = 2 * np.pi * (freq[0] * (xx + drift[0] * t) + freq[1] * (yy + drift[1] * t)) + phase
            img += np.sin(arg)[..., None] * amp
        for pos, vel, radius, colour in blobs:
            cy, cx = pos + vel * t
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            alpha = 1.0 / (1.0 + np.exp((np.sqrt(d2) - radius) * 60))
            img = img * (1 - alpha[..., None]) + colour * alpha[..., None]
        s = size // 8
        img[-s - 2:-2, -s - 2:-2] = logo
        out[t] = img
    return np.rint(np.clip(out, 0, 1) * 255).astype(np.uint8)


def write_synthetic_dataset(root, n_clips: int, seed: int = 0, frames: int = 7,
                            size: int = 96) -> ClipManifest:
    """Write ``n_clips`` toy clips under ``root`` and a ``manifest.txt`` listing them."""
    root = Path(root)
    clips = []
    for i in range(n_clips):
        clip_dir = root / f"clip_{i:04d}"
        clip_dir.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(synthetic_clip(seed * 100003 + i, frames, size)):
            Image.fromarray(img).save(clip_dir / f"im{t + 1:03d}.png")
        clips.append(clip_dir)
    manifest = ClipManifest(tuple(clips))
    manifest.write(root / "manifest.txt")
    return manifest
