"""Stable probabilistic coarse-grained dynamics for particle systems.

Bin counts of a particle system are explained by a few complex
Ornstein-Uhlenbeck processes pushed through a neural decoder; the model is
trained by structured variational inference and used for long-horizon
probabilistic forecasts.
"""
from __future__ import annotations

from .baselines import predict_baseline, spectral_radius, train_baseline
from .cnormal import ComplexGaussian, RealGaussian, cn_logpdf, cn_sample, cn_to_real
from .errors import NumericalError, SlowgenError, TrainingError, ValidationError
from .evaluation import density_stats, latent_sweep, two_point
from .forecast import ForecastEnsemble, infer_z0, predict, predict_from_new_ic
from .io import load_checkpoint, load_forecast, save_checkpoint, save_forecast
from .latent_prior import LatentPrior
from .particle_sim import (
    CountTensor,
    SimConfig,
    bin_positions,
    fd_oracle_ad,
    fd_oracle_burgers,
    sample_initial_conditions,
    simulate_ad,
    simulate_burgers,
)
from .vi_engine import Model, TrainConfig, train

__version__ = "0.1.0"
