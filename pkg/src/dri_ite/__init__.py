"""Disentangled representations for individual treatment effect estimation,
built on a small numpy reverse-mode autodiff engine."""

from .autodiff import NonFiniteError, ShapeError, backward, forward, grad_check
from .data import (Dataset, DataError, SyntheticSpec, add_artificial_contrasts,
                   generate_synthetic, load_csv, split)
from .evaluation import (EvaluationReport, PolicyConfig, evaluate, identification_report, pehe,
                         permutation_importance, policy_risk)
from .losses import LossWeights, SinkhornConfig
from .networks import Architecture, FactorNetworks, init_networks, weight_contribution
from .trainer import TrainConfig, TrainedModel, TrainingDiverged, pehe_nn, predict_ite, train

__all__ = [
    "Architecture", "DataError", "Dataset", "EvaluationReport", "FactorNetworks", "LossWeights",
    "NonFiniteError", "PolicyConfig", "ShapeError", "SinkhornConfig", "SyntheticSpec",
    "TrainConfig", "TrainedModel", "TrainingDiverged", "add_artificial_contrasts", "backward",
    "evaluate", "forward", "generate_synthetic", "grad_check", "identification_report",
    "init_networks", "load_csv", "pehe", "pehe_nn", "permutation_importance", "policy_risk",
    "predict_ite", "split", "train", "weight_contribution",
]
