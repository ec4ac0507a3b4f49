"""Neural transforms: latent transformer, JSCC encoder/decoder, common feature
extractor and latent inversion.

The transmit path downsamples by 16 overall (2 in the latent transformer, 8 in
the JSCC encoder); the receive path mirrors it. Most of the parameters sit on
the transmitter side.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn

from .entropy import EntropyModel
from .types import FeatureDecomposition, FeatureTensor, ShapeError, VideoGop

CHECKPOINT_FORMAT = "semvid-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    channel_dim: int = 32
    gop_size: int = 3
    resblock_depth: int = 3
    snr_train_db: float = 10.0

    def __post_init__(self):
        if self.channel_dim <= 0:
            raise ValueError("channel_dim must be positive")
        if self.gop_size < 1:
            raise ValueError("gop_size must be at least 1")
        if self.resblock_depth < 0:
            raise ValueError("resblock_depth must be non-negative")

    @classmethod
    def full_scale(cls) -> ModelConfig:
        """Dimensions used for the large-scale setup: 128 channels, 6-frame GOPs."""
        return cls(channel_dim=128, gop_size=6)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.act = nn.ReLU()

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


def _down_block(cin: int, cout: int, kernel: int, depth: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=2, padding=kernel // 2),
        *[ResBlock(cout) for _ in range(depth)],
    )


def _up_block(cin: int, cout: int, kernel: int, depth: int) -> nn.Sequential:
    # output_padding=1 makes each stage exactly double the spatial size
    return nn.Sequential(
        nn.ConvTranspose2d(cin, cout, kernel, stride=2, padding=kernel // 2, output_padding=1),
        *[ResBlock(cout) for _ in range(depth)],
    )


class CommonFeatureExtractor(nn.Module):
    """Two conv+ReLU layers applied to the frame-mean of the GOP features.

    The individual maps are the residual ``features[n] - common`` so that
    adding the common map back reproduces the encoder output exactly.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, 1, 1),
            nn.ReLU(),
        )

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        common = self.net(features.mean(dim=0, keepdim=True))
        return common, features - common


class SemanticVideoCodec(nn.Module):
    """All trainable parts of the transmitter and receiver.

    Tensors handed to the individual stages are plain ``[N, C, h, w]`` torch
    tensors so the training loop can run several GOPs through the shared
    convolutional stages in one call.
    """

    TRANSMITTER = ("latent", "encoder", "extractor", "entropy")
    RECEIVER = ("decoder", "inversion")

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        c, d = self.config.channel_dim, self.config.resblock_depth
        self.latent = _down_block(3, c, 5, d)
        self.encoder = nn.Sequential(*[_down_block(c, c, 3, d) for _ in range(3)])
        self.extractor = CommonFeatureExtractor(c)
        self.entropy = EntropyModel(c)
        self.decoder = nn.Sequential(*[_up_block(c, c, 3, d) for _ in range(3)])
        self.inversion = _up_block(c, 3, 5, d)

    # --- transmitter -------------------------------------------------------

    def latent_transform(self, frames: torch.Tensor) -> torch.Tensor:
        return self.latent(frames)

    def jscc_encode(self, latent: torch.Tensor) -> torch.Tensor:
        return self.encoder(latent)

    def extract_common(self, features: torch.Tensor) -> FeatureDecomposition:
        if features.ndim != 4 or features.shape[0] < 1:
            raise ShapeError(f"expected [N>=1, C, h, w] features, got {tuple(features.shape)}")
        common, individual = self.extractor(features)
        return FeatureDecomposition(common=common, individual=individual)

    # --- receiver ----------------------------------------------------------

    def jscc_decode(self, features_hat: torch.Tensor) -> torch.Tensor:
        return self.decoder(features_hat)

    def latent_invert(self, latent_hat: torch.Tensor, clamp: bool | None = None) -> torch.Tensor:
        """Map latents back to RGB. Hard-clipped to [0, 1] unless training."""
        out = self.inversion(latent_hat)
        if clamp is None:
            clamp = not self.training
        return out.clamp(0.0, 1.0) if clamp else out

    # --- bookkeeping -------------------------------------------------------

    def parameter_count(self, parts: tuple[str, ...]) -> int:
        return sum(p.numel() for name in parts for p in getattr(self, name).parameters())

    def encode_gop(self, frames: torch.Tensor) -> FeatureDecomposition:
        return self.extract_common(self.jscc_encode(self.latent_transform(frames)))

    def decode_features(self, features_hat: torch.Tensor, clamp: bool | None = None) -> torch.Tensor:
        return self.latent_invert(self.jscc_decode(features_hat), clamp=clamp)

    def autoencode(self, frames: torch.Tensor) -> torch.Tensor:
        """Encoder straight into decoder: no masking, no channel."""
        return self.decode_features(recombine(self.encode_gop(frames)))


def recombine(decomp: FeatureDecomposition) -> torch.Tensor:
    """Broadcast-add the common map onto every individual map."""
    if decomp.common.shape[1:] != decomp.individual.shape[1:]:
        raise ShapeError("common and individual maps disagree in shape")
    return decomp.individual + decomp.common


# Typed wrappers around the model stages.

def latent_transform(model: SemanticVideoCodec, gop: VideoGop) -> FeatureTensor:
    return FeatureTensor(model.latent_transform(gop.frames))


def jscc_encode(model: SemanticVideoCodec, latent: FeatureTensor) -> FeatureTensor:
    return FeatureTensor(model.jscc_encode(latent.data))


def extract_common(model: SemanticVideoCodec, features: FeatureTensor) -> FeatureDecomposition:
    return model.extract_common(features.data)


def jscc_decode(model: SemanticVideoCodec, features_hat: FeatureTensor) -> FeatureTensor:
    return FeatureTensor(model.jscc_decode(features_hat.data))


def latent_invert(model: SemanticVideoCodec, latent_hat: FeatureTensor, clamp: bool = True) -> VideoGop:
    return VideoGop(model.latent_invert(latent_hat.data, clamp=clamp))


# --- checkpoints -----------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SemanticVideoCodec, extra: dict | None = None) -> Path:
    """Write config echo + named parameter arrays (+ optional training state)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload.update(extra)
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    return payload


def load_checkpoint(path, expected: ModelConfig | None = None) -> SemanticVideoCodec:
    payload = read_checkpoint(path)
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in payload["config"].items() if k in known})
    if expected is not None and config != expected:
        raise CheckpointError(f"checkpoint config {config} does not match expected {expected}")
    model = SemanticVideoCodec(config)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return model


def state_digest(model: SemanticVideoCodec) -> str:
    """SHA-256 over the config and every parameter buffer, in name order."""
    h = hashlib.sha256(repr(sorted(asdict(model.config).items())).encode())
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
