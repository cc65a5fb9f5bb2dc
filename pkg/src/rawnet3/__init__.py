"""RawNet3 raw-waveform speaker embeddings with supervised and DINO training."""

from .checkpoint import Checkpoint
from .config import RunConfig
from .model import DinoNetwork, RawNet3

__version__ = "0.1.0"

__all__ = ["Checkpoint", "DinoNetwork", "RawNet3", "RunConfig", "__version__"]
