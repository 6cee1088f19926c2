"""Blind estimation and inversion of memoryless audio distortions with a diffusion prior."""

__version__ = "0.1.0"

from .distortions import (
    DistortionSpec,
    apply_distortion,
    input_sdr,
    solve_threshold_for_sdr,
)
from .dsp import (
    Signal,
    SpectralCost,
    Spectrogram,
    StftConfig,
    compress_spectrogram,
    cost_adjoint,
    istft,
    spectral_cost,
    stft,
)
from .metrics import RampSpec, lsd, lsd_db, rr_mse, waveform_sdr
from .optim import Adam, AdamState, adam_step
from .prior import Denoiser, GaussianPrior, sinusoid_mixture_prior, tweedie_score
from .sampler import (
    DivergenceError,
    GuidanceConfig,
    NoiseSchedule,
    RestorationReport,
    blind_restore,
    informed_restore,
    karras_schedule,
    likelihood_score,
    restore_segments,
    sample_prior,
)
from .toy_denoiser import FrameDenoiser, TrainConfig, train_toy_denoiser
from .waveshapers import MLP, CCRSpline, SumTanh, init_shaper, load_shaper, save_shaper

__all__ = [
    "MLP",
    "Adam",
    "AdamState",
    "CCRSpline",
    "Denoiser",
    "DistortionSpec",
    "DivergenceError",
    "FrameDenoiser",
    "GaussianPrior",
    "GuidanceConfig",
    "NoiseSchedule",
    "RampSpec",
    "RestorationReport",
    "Signal",
    "SpectralCost",
    "Spectrogram",
    "StftConfig",
    "SumTanh",
    "TrainConfig",
    "adam_step",
    "apply_distortion",
    "blind_restore",
    "compress_spectrogram",
    "cost_adjoint",
    "informed_restore",
    "init_shaper",
    "input_sdr",
    "istft",
    "karras_schedule",
    "likelihood_score",
    "load_shaper",
    "lsd",
    "lsd_db",
    "restore_segments",
    "rr_mse",
    "sample_prior",
    "save_shaper",
    "sinusoid_mixture_prior",
    "solve_threshold_for_sdr",
    "spectral_cost",
    "stft",
    "train_toy_denoiser",
    "tweedie_score",
    "waveform_sdr",
]
