import logging
import math

import numpy as np
import pytest
import torch

import semvid.training as training
from semvid.channel import ChannelConfig
from semvid.data import ClipManifest, load_clip, sample_batch, write_synthetic_dataset
from semvid.model import SemanticVideoCodec, read_checkpoint
from semvid.pipeline import run_batch
from semvid.training import TrainConfig, TrainingDiverged, loss, lr_schedule, train


def test_lr_schedule_examples():
    assert lr_schedule(0, 100, 1e-4) == 1e-4
    assert lr_schedule(100, 100, 1e-4) == pytest.approx(0.0, abs=1e-20)
    assert lr_schedule(50, 100, 1e-4) == pytest.approx(5e-5, rel=1e-12)
    with pytest.raises(ValueError):
        lr_schedule(101, 100, 1e-4)


def test_loss_perfect_reconstruction_is_rate_term_only():
    gop = torch.rand(3, 3, 16, 16)
    total, parts = loss(gop, gop.clone(), 0.0, 0.0)
    assert float(total) == 0.0
    total, parts = loss(gop, gop.clone(), 0.01, 0.0, lambda_rd=8192)
    assert float(total) == pytest.approx(81.92, rel=1e-6)
    assert parts["mse"] == 0.0


def test_loss_without_lambda_is_mse():
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(2, 3, 16, 16, generator=g), torch.rand(2, 3, 16, 16, generator=g)
    total, _ = loss(a, b, 0.02, 500.0, lambda_rd=0.0)
    assert float(total) == pytest.approx(float((a - b).pow(2).mean()), rel=1e-6)


def test_loss_matches_formula_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 3, 16, 16)), rng.random((2, 3, 16, 16))
    cbr, bits, lam, beta = 0.015, 1234.5, 100.0, 0.05
    expected = lam * (cbr + beta * bits / (2 * 3 * 16 * 16)) + np.mean((a - b) ** 2)
    total, _ = loss(torch.from_numpy(a), torch.from_numpy(b), cbr, bits, lam, beta)
    assert float(total) == pytest.approx(expected, rel=1e-12)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(crop=60)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3})


def test_sample_batch_deterministic_and_shared_crop(toy_data):
    a = sample_batch(toy_data["manifest"], 4, 3, 64, seed=5)
    b = sample_batch(toy_data["manifest"], 4, 3, 64, seed=5)
    assert torch.equal(a.frames, b.frames) and a.picks == b.picks
    assert tuple(a.frames.shape) == (4, 3, 3, 64, 64)
    for gop, (ci, start, top, left) in zip(a.frames, a.picks):
        clip = load_clip(toy_data["manifest"].clips[ci])
        # every frame is cut with the same window
        assert torch.equal(gop, clip[start:start + 3, :, top:top + 64, left:left + 64])


def test_crop_stays_in_bounds(toy_data):
    for seed in range(100):
        batch = sample_batch(toy_data["manifest"], 1, 3, 64, seed=seed)
        ci, start, top, left = batch.picks[0]
        assert 0 <= top <= 96 - 64 and 0 <= left <= 96 - 64
        assert 0 <= start <= 7 - 3


def test_empty_manifest_is_an_error():
    with pytest.raises(ValueError):
        sample_batch(ClipManifest(()), 2, 3, 64, seed=0)


def test_short_clip_is_skipped_with_warning(tmp_path, caplog):
    long = write_synthetic_dataset(tmp_path / "long", 1, seed=0, frames=4, size=64)
    short = write_synthetic_dataset(tmp_path / "short", 1, seed=1, frames=2, size=64)
    manifest = ClipManifest(long.clips + short.clips)
    with caplog.at_level(logging.WARNING):
        batch = sample_batch(manifest, 5, 3, 64, seed=0)
    assert "skipping" in caplog.text
    assert all(p[0] == 0 for p in batch.picks)


def test_every_module_receives_gradient(toy_data):
    torch.manual_seed(0)
    model = SemanticVideoCodec(TrainConfig().model_config()).train()
    batch = sample_batch(toy_data["manifest"], 2, 3, 64, seed=0)
    channel = ChannelConfig("awgn", 10.0, 0)
    recon, rate = run_batch(model, batch.frames, 368, channel, channel.generator())
    total, _ = loss(batch.frames, recon, 368 / (3 * 12288), rate / 2)
    total.backward()
    for part in model.TRANSMITTER + model.RECEIVER:
        grads = [p.grad for p in getattr(model, part).parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in grads), part


def test_short_training_run_learns(toy_data, tmp_path):
    cfg = TrainConfig(steps=200, batch_size=2, eval_every=1000, checkpoint_every=1000)
    result = train(toy_data["manifest"], cfg, tmp_path)
    mse = np.array([r["mse"] for r in result.log])
    # loss net of the sampled-budget constant, smoothed over 50 steps
    net = np.array([r["loss"] - cfg.lambda_rd * r["cbr"] for r in result.log])
    assert mse[-50:].mean() < mse[:50].mean()
    assert net[-50:].mean() < net[:50].mean()
    assert (tmp_path / "train_log.csv").read_text().splitlines()[0] == ",".join(training.LOG_COLUMNS)
    payload = read_checkpoint(result.checkpoint)
    assert payload["step"] == 200


def test_resume_reproduces_trajectory(toy_data, tmp_path):
    cfg = TrainConfig(steps=6, batch_size=2, eval_every=1000, checkpoint_every=3)
    straight = train(toy_data["manifest"], cfg, tmp_path / "a")
    first = train(toy_data["manifest"], cfg, tmp_path / "b", stop_after=3)
    second = train(toy_data["manifest"], cfg, tmp_path / "b", resume_from=first.checkpoint)
    resumed = [r["loss"] for r in first.log + second.log]
    assert resumed == [r["loss"] for r in straight.log]
    assert torch.equal(
        torch.cat([p.flatten() for p in straight.model.parameters()]),
        torch.cat([p.flatten() for p in second.model.parameters()]),
    )
    with pytest.raises(ValueError):
        train(toy_data["manifest"], TrainConfig(steps=7, batch_size=2), tmp_path / "c",
              resume_from=first.checkpoint)


def test_holdout_is_logged(toy_data, tmp_path):
    cfg = TrainConfig(steps=2, batch_size=1, eval_every=1)
    result = train(toy_data["manifest"], cfg, tmp_path, holdout_clip=toy_data["held"].clips[0])
    assert [e["step"] for e in result.evals] == [0, 1, 2]
    assert all(math.isfinite(e["holdout_psnr"]) for e in result.evals)


def test_divergence_writes_diagnostic_checkpoint(toy_data, tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        return torch.tensor(math.nan, requires_grad=True), {"mse": math.nan, "rate_bits": 0.0, "k": 0.0}

    monkeypatch.setattr(training, "loss", broken)
    with pytest.raises(TrainingDiverged) as info:
        train(toy_data["manifest"], TrainConfig(steps=3, batch_size=1), tmp_path)
    assert info.value.step == 0
    assert (tmp_path / "diverged.pt").exists()
