"""Coarse-to-fine residual diffusion toolkit for low-dose volume reconstruction.

A deterministic coarse predictor produces an initial estimate from a
degraded slice; a small diffusion model then samples the residual to the
clean target over a handful of steps. Neighboring-slice and spectrum
guidance condition both networks at the input level, and a contrastive
term sharpens input-output correspondence at the output level. A
synthetic phantom pipeline makes the whole system trainable and
verifiable without clinical data.
"""

from .config import RunConfig, load_config
from .diffusion import (
    NoiseSchedule,
    forward_sample,
    make_inference_schedule,
    make_schedule,
    posterior_params,
    predict_x0_from_eps,
    reverse_step,
    sample_gamma_train,
)
from .guidance import GuidanceBundle, GuidanceConfig, make_guidance
from .losses import LossWeights, NegativeSet
from .metrics import MetricReport, evaluate_volume, nmse, psnr, sd_summary, ssim
from .networks import ModelSpec, ReconstructionModel
from .pipeline import (
    build_model,
    load_checkpoint,
    reconstruct_volume,
    run_training,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_config",
    "NoiseSchedule",
    "forward_sample",
    "make_inference_schedule",
    "make_schedule",
    "posterior_params",
    "predict_x0_from_eps",
    "reverse_step",
    "sample_gamma_train",
    "GuidanceBundle",
    "GuidanceConfig",
    "make_guidance",
    "LossWeights",
    "NegativeSet",
    "MetricReport",
    "evaluate_volume",
    "nmse",
    "psnr",
    "sd_summary",
    "ssim",
    "ModelSpec",
    "ReconstructionModel",
    "build_model",
    "load_checkpoint",
    "reconstruct_volume",
    "run_training",
    "save_checkpoint",
    "__version__",
]
