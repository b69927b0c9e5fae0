"""Speech enhancement with a U-Net spiking neural network trained by surrogate-gradient BPTT."""

from .dsp import StftConfig, Waveform
from .model import Model, ModelConfig, NormalizationStats, build_unet, forward_utterance, load_checkpoint, save_checkpoint

__all__ = [
    "Model",
    "ModelConfig",
    "NormalizationStats",
    "StftConfig",
    "Waveform",
    "build_unet",
    "forward_utterance",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
