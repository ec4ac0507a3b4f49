import os
from pathlib import Path

import pytest
import torch

from semvid.data import write_synthetic_dataset
from semvid.model import ModelConfig, SemanticVideoCodec, load_checkpoint
from semvid.training import TrainConfig, train

# Desk-scale run shared by the acceptance criteria that need a trained model.
ACCEPTANCE_TRAIN = TrainConfig(steps=2000, eval_every=250, checkpoint_every=500)


@pytest.fixture
def small_model():
    torch.manual_seed(0)
    return SemanticVideoCodec(ModelConfig(channel_dim=32, gop_size=3)).eval()


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """Ten 7-frame 96x96 toy clips plus one held-out clip."""
    root = tmp_path_factory.mktemp("toy")
    manifest = write_synthetic_dataset(root / "train", 10, seed=0)
    held = write_synthetic_dataset(root / "held", 4, seed=99)
    return {"root": root, "manifest": manifest, "manifest_path": root / "train" / "manifest.txt",
            "held": held, "held_path": root / "held" / "manifest.txt"}


@pytest.fixture(scope="session")
def trained(tmp_path_factory, toy_data):
    """A desk-scale checkpoint (2000 steps). Set SEMVID_ACCEPTANCE_RUN to a
    folder from an earlier run of this fixture to reuse it."""
    reuse = os.environ.get("SEMVID_ACCEPTANCE_RUN")
    if reuse:
        run_dir = Path(reuse)
        return {"dir": run_dir, "model": load_checkpoint(run_dir / "checkpoint.pt"),
                "config": ACCEPTANCE_TRAIN}
    run_dir = tmp_path_factory.mktemp("acceptance_run")
    result = train(toy_data["manifest"], ACCEPTANCE_TRAIN, run_dir,
                   holdout_clip=toy_data["held"].clips[0])
    return {"dir": run_dir, "model": result.model.eval(), "config": ACCEPTANCE_TRAIN}
