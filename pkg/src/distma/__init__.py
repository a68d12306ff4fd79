"""Distributional regression models for meta-analysis."""
from .data_model import (DataError, DesignMatrix, EffectRow, EffectTable, Formula, ModelInput,
                         ModelSpec, build_design, load_csv, validate, write_csv)
from .fit import FitResult, fit, lrt, q_statistic, wald_table
from .likelihood import NaturalParams, loglik

__version__ = "0.1.0"

__all__ = [
    "DataError", "DesignMatrix", "EffectRow", "EffectTable", "Formula", "ModelInput",
    "ModelSpec", "build_design", "load_csv", "validate", "write_csv", "FitResult", "fit",
    "lrt", "q_statistic", "wald_table", "NaturalParams", "loglik",
]
