"""Benchmark problem instances."""

from .continual import (
    CLStageProblem,
    ContinualLearningSeq,
    MLPSpec,
    StageData,
    cl_stage_problem,
    load_idx,
    mlp_backprop,
    mlp_error_rate,
    mlp_loss,
)
from .logreg import LabeledData, LogRegBilevel, logreg_load_csv, synth_logreg
from .quadratic import QuadraticBilevel

__all__ = [
    "CLStageProblem",
    "ContinualLearningSeq",
    "LabeledData",
    "LogRegBilevel",
    "MLPSpec",
    "QuadraticBilevel",
    "StageData",
    "cl_stage_problem",
    "load_idx",
    "logreg_load_csv",
    "mlp_backprop",
    "mlp_error_rate",
    "mlp_loss",
    "synth_logreg",
]
