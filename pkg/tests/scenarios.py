"""Simulation models shared by the unit and acceptance suites."""

from __future__ import annotations

import math

import numpy as np

from modrenew.config import KinkFactor
from modrenew.model import (
    CensoringLaw,
    ConstantHazard,
    CovariateLaw,
    Dist,
    ModelSpec,
    SeparableHazard,
    StateGraph,
    WeibullHazard,
    illness_death_graph,
    renewal_graph,
)

BETA0 = 0.5


def renewal_weibull(beta=BETA0, slope=2.0, horizon=(2.0, 4.0), x_loading=1.0) -> ModelSpec:
    """Single-type renewal process with a duration-dependent, mark-modulated Weibull baseline."""
    return ModelSpec(
        renewal_graph(), np.array([beta]), {(0, 0): WeibullHazard(1.0, 2.0, slope)},
        {(0, 0): 4.0 * math.exp(slope)},
        CovariateLaw((Dist("normal", (0.0, 1.0)),), x_loading=(x_loading,)),
        tau0=2.0, tau=1.0, censoring=CensoringLaw("horizon", Dist("uniform", horizon)),
    )


class WaveFactor:
    """``1 + amplitude sin(2 pi cycles x)``: infinitely differentiable in the mark."""

    def __init__(self, amplitude: float, cycles: float):
        self.amplitude, self.cycles = amplitude, cycles

    def __call__(self, x):
        return 1.0 + self.amplitude * np.sin(2.0 * np.pi * self.cycles * np.asarray(x, dtype=float))


def single_spell(baseline, bound, beta=BETA0, tau0=1.0, horizon=(0.5, 2.0)) -> ModelSpec:
    """One spell per subject (transition 0->1), simulated with the fast spell sampler."""
    return ModelSpec(
        StateGraph(("0", "1"), ((0, 1),)), np.array([beta]), {(0, 1): baseline}, {(0, 1): bound},
        CovariateLaw((Dist("normal", (0.0, 1.0)),)),
        tau0=tau0, tau=1.0, censoring=CensoringLaw("horizon", Dist("uniform", horizon)),
    )


def smooth_spell(amplitude=0.5, cycles=2.0) -> ModelSpec:
    haz = SeparableHazard(1.0, 2.0, WaveFactor(amplitude, cycles))
    return single_spell(haz, 2.0 * (1.0 + amplitude))


def kink_spell(slope=4.0) -> ModelSpec:
    haz = SeparableHazard(1.0, 2.0, KinkFactor(slope, 0.5))
    return single_spell(haz, 2.0 * (1.0 + slope * 0.5))


def illness_death(beta=(0.5, -0.5, 1.0), disjoint=True, horizon=(1.0, 3.0)) -> ModelSpec:
    """Illness-death model with three independent standard normal covariates.

    With ``disjoint`` each transition uses its own covariate column and
    coefficient; otherwise all transitions share the first coefficient.
    """
    graph = illness_death_graph()
    haz = {(0, 1): ConstantHazard(1.0), (0, 2): WeibullHazard(0.5, 1.5, 0.5), (1, 2): ConstantHazard(1.5)}
    if disjoint:
        maps = {(0, 1): (0, -1, -1), (0, 2): (-1, 1, -1), (1, 2): (-1, -1, 2)}
        beta = np.asarray(beta, dtype=float)
        zs = tuple(Dist("normal", (0.0, 1.0)) for _ in range(3))
    else:
        maps = {}
        beta = np.array([beta[0]])
        zs = (Dist("normal", (0.0, 1.0)),)
    bounds = {(0, 1): 1.0, (0, 2): 0.75 * math.sqrt(3.0) * math.exp(0.5), (1, 2): 1.5}
    return ModelSpec(graph, beta, haz, bounds, CovariateLaw(zs),
                     tau0=3.0, tau=1.0, censoring=CensoringLaw("horizon", Dist("uniform", horizon)),
                     index_maps=maps)
