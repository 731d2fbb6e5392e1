"""Density and score estimation with an equivariant transformer, KDE
baselines, plug-in information estimators and a Landau particle solver."""

from .gmm import GmmSpec, BatchConfig, make_training_batch, sample_laplace, laplace_target
from .model import (
    DensityScoreEstimate,
    ModelConfig,
    ModelWeights,
    WhiteningError,
    forward,
    init_weights,
    predict,
    whiten,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
