"""Hadamard-domain bias-field correction with a conditional VAE, in pure NumPy."""

from .errors import (BadMagicError, CheckpointError, ContractError, DimensionError,
                     NumericError, PhunetError, TruncatedFileError, UndefinedMetricError,
                     UnsupportedDatatypeError, VolumeFormatError)
from .model import ModelConfig, PHUNet
from .phantom import Phantom, gen_bias, gen_phantom, make_dataset
from .train import TrainConfig, train
from .wht import Spectrum, fwht, ht_2d, iht_2d

__version__ = "0.1.0"

__all__ = [
    "BadMagicError", "CheckpointError", "ContractError", "DimensionError", "ModelConfig",
    "NumericError", "PHUNet", "Phantom", "PhunetError", "Spectrum", "TrainConfig",
    "TruncatedFileError", "UndefinedMetricError", "UnsupportedDatatypeError",
    "VolumeFormatError", "fwht", "gen_bias", "gen_phantom", "ht_2d", "iht_2d",
    "make_dataset", "train",
]
