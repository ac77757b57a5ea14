"""Semiparametric modulated renewal processes.

Boundary-corrected kernel estimators for multistate renewal models whose
transition intensities are ``alpha_h(duration, mark) exp(beta' Z)``, with
simulation, Monte Carlo validation and a command-line interface.
"""

from __future__ import annotations

from .duration import DataError, DurationDataset, EpochRecord, from_arrays, martingale_residual, to_duration
from .estimate import (
    AalenNelsonCurve,
    BandwidthError,
    ConvergenceError,
    EstimationError,
    FitResult,
    HazardSurface,
    NoContrastError,
    aalen_nelson,
    default_bandwidth,
    hazard_surface,
    info_m,
    info_pl,
    naive_cox_score,
    score_m,
    score_pl,
    solve,
)
from .kernels import KernelDomainError, KernelSpec, kernel_l2, kernel_moment, kernel_pq, kernel_weights
from .model import (
    CensoringLaw,
    ConstantHazard,
    CovariateLaw,
    Dist,
    ModelSpec,
    PiecewiseConstantHazard,
    SeparableHazard,
    StateGraph,
    WeibullHazard,
    illness_death_graph,
    renewal_graph,
    simulate_cohort,
    simulate_spells,
)
from .multistate import MultiFitConfig, TransitionConfig, baseline_surfaces, fit_multistate

__version__ = "0.1.0"

__all__ = [
    "AalenNelsonCurve", "BandwidthError", "CensoringLaw", "ConstantHazard", "ConvergenceError", "CovariateLaw",
    "DataError", "Dist", "DurationDataset", "EpochRecord", "EstimationError", "FitResult", "HazardSurface",
    "KernelDomainError", "KernelSpec", "ModelSpec", "MultiFitConfig", "NoContrastError",
    "PiecewiseConstantHazard", "SeparableHazard", "StateGraph", "TransitionConfig", "WeibullHazard",
    "aalen_nelson", "baseline_surfaces", "default_bandwidth", "fit_multistate", "from_arrays", "hazard_surface",
    "illness_death_graph", "info_m", "info_pl", "kernel_l2", "kernel_moment", "kernel_pq", "kernel_weights",
    "martingale_residual", "naive_cox_score", "renewal_graph", "score_m", "score_pl", "simulate_cohort",
    "simulate_spells", "solve", "to_duration",
]
