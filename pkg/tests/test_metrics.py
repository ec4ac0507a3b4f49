import math

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter
from scipy.signal import convolve2d
from skimage import color, data

from semvid.metrics import (
    MS_SSIM_WEIGHTS,
    ResultRow,
    evaluate_quality,
    ms_ssim,
    ms_ssim_db,
    ms_ssim_scales,
    mse,
    psnr,
    psnr_from_mse,
    read_results,
    write_results,
)


def reference_ms_ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Straightforward 2-D numpy evaluation of the multiscale product."""
    k1, k2 = 0.01, 0.03
    c1, c2 = k1 ** 2, k2 ** 2
    ax = np.arange(11) - 5
    g = np.exp(-(ax ** 2) / (2 * 1.5 ** 2))
    window = np.outer(g, g)
    window /= window.sum()
    size = min(x.shape)
    m = 0
    while m < 5 and size >= 11:
        m, size = m + 1, size // 2
    weights = np.array(MS_SSIM_WEIGHTS[:m])
    weights = weights / weights.sum() if m < 5 else weights
    values = []
    for j in range(m):
        blur = lambda a: convolve2d(a, window, mode="valid")  # noqa: E731
        mx, my = blur(x), blur(y)
        vx, vy, cxy = blur(x * x) - mx ** 2, blur(y * y) - my ** 2, blur(x * y) - mx * my
        cs = (2 * cxy + c2) / (vx + vy + c2)
        if j == m - 1:
            values.append(np.mean((2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1) * cs))
        else:
            values.append(np.mean(cs))
            h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
            x = x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            y = y[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return float(np.prod(np.maximum(values, 0) ** weights))


def _test_images():
    out = []
    for loader in (data.camera, data.astronaut, data.coffee, data.chelsea, data.rocket):
        img = loader()
        if img.ndim == 3:
            img = color.rgb2gray(img)
        else:
            img = img / 255.0
        out.append(np.ascontiguousarray(img[:256, :256], dtype=np.float64))
    return out


def test_mse_examples():
    x = torch.zeros(1, 2, 2)
    y = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]])
    assert mse(x, y) == 0.25
    assert mse(x, x) == 0.0
    assert mse(torch.zeros(3, 4, 4), torch.ones(3, 4, 4)) == 1.0
    with pytest.raises(ValueError):
        mse(torch.zeros(2), torch.zeros(3))


def test_psnr_examples():
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-12)
    assert psnr_from_mse(1.0) == 0.0
    x = torch.rand(3, 8, 8)
    assert psnr(x, x) == math.inf


@pytest.mark.parametrize("d,expected", [(0.9, 10.0), (0.99, 20.0), (0.0, 0.0)])
def test_ms_ssim_db_examples(d, expected):
    assert ms_ssim_db(d) == pytest.approx(expected, abs=1e-9)


def test_ms_ssim_db_of_one_is_inf():
    assert ms_ssim_db(1.0) == math.inf


def test_ms_ssim_identity_and_noise():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(2, 3, 64, 64, generator=g)
    assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    y = torch.rand(2, 3, 64, 64, generator=g)
    assert ms_ssim(x, y) < 1.0


def test_scale_fallback():
    assert ms_ssim_scales(256, 256) == 5
    assert ms_ssim_scales(176, 176) == 5
    assert ms_ssim_scales(160, 160) == 4
    assert ms_ssim_scales(64, 64) == 3
    assert ms_ssim_scales(11, 11) == 1
    with pytest.raises(ValueError):
        ms_ssim_scales(10, 64)


def test_ms_ssim_matches_independent_oracle():
    for img in _test_images():
        blurred = gaussian_filter(img, 1.5)
        ours = ms_ssim(torch.from_numpy(img)[None], torch.from_numpy(blurred)[None])
        assert ours == pytest.approx(reference_ms_ssim(img, blurred), abs=1e-4)
        assert 0.0 <= ours <= 1.0


def test_metrics_are_symmetric():
    g = torch.Generator().manual_seed(1)
    x, y = torch.rand(3, 64, 64, generator=g), torch.rand(3, 64, 64, generator=g)
    assert psnr(x, y) == psnr(y, x)
    assert ms_ssim(x, y) == pytest.approx(ms_ssim(y, x), abs=1e-12)


def test_psnr_falls_with_noise_amplitude():
    g = torch.Generator().manual_seed(2)
    x = torch.rand(3, 32, 32, generator=g)
    noise = torch.randn(3, 32, 32, generator=g)
    values = [psnr(x, x + a * noise) for a in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_quality_report_invariants():
    g = torch.Generator().manual_seed(3)
    gop = torch.rand(3, 3, 64, 64, generator=g)
    noisy = (gop + 0.05 * torch.randn(3, 3, 64, 64, generator=g)).clamp(0, 1)
    report = evaluate_quality(gop, noisy, cbr=0.01, snr_db=10.0)
    assert report.ms_ssim_db == pytest.approx(-10 * math.log10(1 - report.ms_ssim), rel=1e-12)
    assert report.psnr_db == pytest.approx(np.mean([f.psnr_db for f in report.per_frame]), rel=1e-12)
    assert report.ms_ssim == pytest.approx(np.mean([f.ms_ssim for f in report.per_frame]), rel=1e-12)
    assert report.scales == 3


def test_results_csv_round_trip(tmp_path):
    rows = [
        ResultRow("clip_a", 0, 0.01, 10.0, math.inf, 1.0, math.inf),
        ResultRow("clip_a", 1, 0.005, 0.0, 21.123456789012345, 0.87654321, 9.08),
    ]
    path = write_results(tmp_path / "r.csv", rows)
    assert "inf" in path.read_text()
    assert read_results(path) == rows
