"""Residual thermophysical property prediction for fluorinated refrigerants:
a neural-network extended corresponding-states engine with Huber-Ely and
Peng-Robinson baselines, truth-surface generation, training, and evaluation.
"""

from .core import (CriticalParameters, Fluid, Phase, R_GAS, ResidualSet, StatePoint,
                   classify_phase, load_registry, builtin_registry_path, reduce_state)
from .helmholtz import HelmholtzEos, HelmholtzModel, TermBank, load_builtin_eos, load_eos
from .cubic import PrModel, PrPropertyModel, pr_critical_compressibility, pr_residual_set
from .ecs import EcsModel, Reference, ScalingFactors
from .shapefactor import (HuberElyParams, HuberElyShapeModel, IdentityShapeModel,
                          NeuralShapeModel, ShapeFactorEval, load_checkpoint,
                          save_checkpoint)
from .equilibrium import SaturationState, density_solve, initial_psat_guess, saturation_solve
from .dataset import Corpus, FluidDataset, generate_grid, ingest_csv, near_critical_filter
from .training import TrainConfig, finalize_full_model, loocv, pretrain, train
from .evaluation import aad, critical_sensitivity, property_report, vapor_pressure_report

__version__ = "0.1.0"

__all__ = [
    "CriticalParameters", "Fluid", "Phase", "R_GAS", "ResidualSet", "StatePoint",
    "classify_phase", "load_registry", "builtin_registry_path", "reduce_state",
    "HelmholtzEos", "HelmholtzModel", "TermBank", "load_builtin_eos", "load_eos",
    "PrModel", "PrPropertyModel", "pr_critical_compressibility", "pr_residual_set",
    "EcsModel", "Reference", "ScalingFactors",
    "HuberElyParams", "HuberElyShapeModel", "IdentityShapeModel", "NeuralShapeModel",
    "ShapeFactorEval", "load_checkpoint", "save_checkpoint",
    "SaturationState", "density_solve", "initial_psat_guess", "saturation_solve",
    "Corpus", "FluidDataset", "generate_grid", "ingest_csv", "near_critical_filter",
    "TrainConfig", "finalize_full_model", "loocv", "pretrain", "train",
    "aad", "critical_sensitivity", "property_report", "vapor_pressure_report",
]
