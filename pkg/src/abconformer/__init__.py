"""Antibody-antigen interface prediction with a sliding-attention Conformer."""

from .core import Batch, ChainArrays, ChainRole, Config, DataError, NumericsError, pad_batch, parse_config
from .model import ABConformer, Prediction, predict, predict_pan_epitope

__version__ = "0.1.0"

__all__ = [
    "ABConformer",
    "Batch",
    "ChainArrays",
    "ChainRole",
    "Config",
    "DataError",
    "NumericsError",
    "Prediction",
    "pad_batch",
    "parse_config",
    "predict",
    "predict_pan_epitope",
    "__version__",
]
