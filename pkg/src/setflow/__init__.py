"""Permutation-invariant continuous normalizing flows for point sets."""
from .autodiff import ContractError, EvaluationError
from .dynamics import Aggregation, ConfigError, DynamicsConfig, EquivariantDynamics, TraceMode
from .flow import Domain, DomainError, FlowModel, SolverConfig, SolverError, integrate
from .ihp import CouplingLayer, build_ihp
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .point_process import PointProcessModel
from .training import TrainConfig, train

__all__ = [
    "Aggregation", "ConfigError", "ContractError", "CouplingLayer", "Domain", "DomainError", "DynamicsConfig",
    "EquivariantDynamics", "EvaluationError", "FlowModel", "ModelConfig", "PointProcessModel", "SolverConfig",
    "SolverError", "TraceMode", "TrainConfig", "build_ihp", "build_model", "integrate", "load_checkpoint",
    "save_checkpoint", "train",
]
