"""Octave-convolution GAN for T1-to-FA and FA-to-tractography slice synthesis."""
from .errors import Macro2MicroError
from .networks import ModelBundle, ModelConfig, build_bundle
from .objectives import LossWeights
from .trainer import TrainConfig, fit, synthesize

__version__ = "0.1.0"

__all__ = ["Macro2MicroError", "ModelBundle", "ModelConfig", "build_bundle", "LossWeights",
           "TrainConfig", "fit", "synthesize", "__version__"]
