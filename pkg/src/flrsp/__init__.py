"""Federated learning with randomly selected shared parameters, baseline
defenses, and gradient-inversion attacks at desk scale."""

from .params import ParamSet
from .autodiff import Graph, grad_check, loss_and_grad
from .models import MlpSpec, VitSpec, build_mlp, build_vit
from .fl import (
    ClientUpdate, Mask, aggregate_fedavg, aggregate_fedsgd, effective_lr,
    frozen_weights_ratio, mask_update, run_training, sample_mask, update_ratio,
)
from .privacy import DpConfig, dp_noise, dp_sigma, fixed_position_filter
from .attacks import (
    AttackConfig, InterceptedRound, april_reconstruct, cosine_similarity, intercept,
    optimization_attack,
)
from .metrics import SsimParams, accuracy, ssim
from .config import ExperimentConfig
from .harness import analyze_update_ratio, run_experiment

__all__ = [
    "ParamSet", "Graph", "grad_check", "loss_and_grad", "MlpSpec", "VitSpec", "build_mlp",
    "build_vit", "ClientUpdate", "Mask", "aggregate_fedavg", "aggregate_fedsgd", "effective_lr",
    "frozen_weights_ratio", "mask_update", "run_training", "sample_mask", "update_ratio",
    "DpConfig", "dp_noise", "dp_sigma", "fixed_position_filter", "AttackConfig",
    "InterceptedRound", "april_reconstruct", "cosine_similarity", "intercept",
    "optimization_attack", "SsimParams", "accuracy", "ssim", "ExperimentConfig",
    "analyze_update_ratio", "run_experiment",
]

__version__ = "0.1.0"
