"""Video semantic communication over noisy analog channels.

A GOP is encoded into one common and N individual feature maps, ranked by a
Gaussian entropy model, cut to an exact symbol budget and sent over an AWGN
channel.
"""

from .channel import ChannelConfig, noise_variance, power_normalize, transmit
from .model import ModelConfig, SemanticVideoCodec, load_checkpoint, recombine, save_checkpoint
from .pipeline import ChannelReport, forward_pipeline
from .types import BandwidthBudget, FeatureDecomposition, SymbolStream, VideoGop, compute_cbr, validate_gop

__version__ = "0.1.0"

__all__ = [
    "BandwidthBudget",
    "ChannelConfig",
    "ChannelReport",
    "FeatureDecomposition",
    "ModelConfig",
    "SemanticVideoCodec",
    "SymbolStream",
    "VideoGop",
    "compute_cbr",
    "forward_pipeline",
    "load_checkpoint",
    "noise_variance",
    "power_normalize",
    "recombine",
    "save_checkpoint",
    "transmit",
    "validate_gop",
]
