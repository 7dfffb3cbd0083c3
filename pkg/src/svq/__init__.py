"""Stochastic vector quantiser: training, synthetic experiments and diagnostics."""

from .core import (
    Codebook,
    ConfigurationError,
    DegenerateResponseError,
    LeakageKernel,
    ResponseModel,
    SVQError,
    Topology,
    apply_leakage,
    build_gaussian_leakage,
    encode,
    load_model,
    mean_reconstruction,
    posterior,
    posterior_finite,
    posterior_infinite,
    reconstruct,
    response,
    save_model,
)
from .objective import Batch, ObjectiveValue, eval_objective, grad_recon, grad_response
from .trainer import ChainSpec, Stage, TrainConfig, TrainingDiverged, init_model, train, train_chain

__version__ = "0.1.0"

__all__ = [
    "Batch", "ChainSpec", "Codebook", "ConfigurationError", "DegenerateResponseError",
    "LeakageKernel", "ObjectiveValue", "ResponseModel", "SVQError", "Stage", "Topology",
    "TrainConfig", "TrainingDiverged", "apply_leakage", "build_gaussian_leakage", "encode",
    "eval_objective", "grad_recon", "grad_response", "init_model", "load_model",
    "mean_reconstruction", "posterior", "posterior_finite", "posterior_infinite",
    "reconstruct", "response", "save_model", "train", "train_chain",
]
