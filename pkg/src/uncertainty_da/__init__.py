"""Unsupervised domain adaptation by matching features and MC-dropout prediction uncertainty."""
from .adaptation import TrainConfig, evaluate, lambda_schedule, train_step
from .data import DomainDataset, ShiftSpec, apply_shift, gen_blobs, gen_two_moons, load_idx
from .estimator import UncertaintyDomainAdapter
from .models import ModelBundle, NetworkSpec
from .uncertainty import adaptive_weights, entropy_of, mc_predict, variance_of

__all__ = [
    "DomainDataset",
    "ModelBundle",
    "NetworkSpec",
    "ShiftSpec",
    "TrainConfig",
    "UncertaintyDomainAdapter",
    "adaptive_weights",
    "apply_shift",
    "entropy_of",
    "evaluate",
    "gen_blobs",
    "gen_two_moons",
    "lambda_schedule",
    "load_idx",
    "mc_predict",
    "train_step",
    "variance_of",
]
