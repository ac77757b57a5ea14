"""Shared-coefficient fits over several transition types.

Each transition ``h`` contributes its own kernel-smoothed score and
information, built from the records at risk in ``h``'s origin state with
``h``'s bandwidth. The scores are summed at a common ``beta``. Covariates that
only matter for some transitions are handled with per-transition index maps
into the global coefficient vector.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .duration import DurationDataset
from .estimate import (
    KINDS,
    NAIVE_COX,
    PARTIAL_LIKELIHOOD,
    EstimationError,
    FitResult,
    HazardSurface,
    NaiveCoxSystem,
    ScoreSystem,
    TransitionTerm,
    default_bandwidth,
    default_tau,
    fit_system,
    hazard_surface,
)
from .kernels import KernelSpec, region_l2

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransitionConfig:
    """One transition of a multi-type fit.

    ``kernel=None`` applies the default bandwidth rule to the records at risk
    for ``h``. ``index_map`` sends data column ``c`` to coefficient
    ``index_map[c]``; ``-1`` drops the column for this transition.
    """

    h: tuple
    kernel: KernelSpec | None = None
    index_map: tuple | None = None


@dataclass
class MultiFitConfig:
    transitions: Sequence[TransitionConfig]
    kind: str = PARTIAL_LIKELIHOOD
    d: int | None = None
    mu: int = 2
    c: float = 1.0
    tau: float | None = None
    tol: float = 1e-8
    max_iter: int = 50
    influence: bool = True
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.transitions = [t if isinstance(t, TransitionConfig) else TransitionConfig(tuple(t))
                            for t in self.transitions]
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")

    def dimension(self, data: DurationDataset) -> int:
        if self.d is not None:
            return self.d
        maps = [t.index_map for t in self.transitions if t.index_map is not None]
        return max([max(m) + 1 for m in maps] + [data.d if len(maps) < len(self.transitions) else 0])

    def violations(self, data: DurationDataset) -> list:
        """Index-map problems: non-injective maps, bad indices, unused coefficients."""
        d = self.dimension(data)
        out, used = [], set()
        seen = set()
        for t in self.transitions:
            if t.h in seen:
                out.append(f"transition {t.h} listed twice")
            seen.add(t.h)
            imap = tuple(range(data.d)) if t.index_map is None else tuple(t.index_map)
            if len(imap) != data.d:
                out.append(f"transition {t.h}: index map has {len(imap)} entries for {data.d} covariate columns")
            targets = [j for j in imap if j >= 0]
            if len(set(targets)) != len(targets):
                out.append(f"transition {t.h}: index map is not injective")
            if any(j >= d for j in targets):
                out.append(f"transition {t.h}: index map points outside 0..{d - 1}")
            used.update(targets)
        missing = sorted(set(range(d)) - used)
        if missing:
            out.append(f"coefficients {missing} are not used by any transition")
        return out


def _resolve_terms(data: DurationDataset, config: MultiFitConfig, drop_empty: bool = True):
    tau = default_tau(data) if config.tau is None else config.tau
    present = set(data.transitions)
    terms, empty = [], []
    for t in config.transitions:
        if t.h not in present:
            empty.append(t.h)
            if drop_empty:
                continue
        kernel = t.kernel
        if kernel is None:
            a = default_bandwidth(data, t.h, config.kind, config.c, tau)
            kernel = KernelSpec(config.mu, a, tau)
        terms.append(TransitionTerm(t.h, kernel, t.index_map))
    return terms, empty


def fit_multistate(data: DurationDataset, config: MultiFitConfig, beta_init=None) -> FitResult:
    """Solve ``sum_h score_h(beta) = 0`` with Jacobian ``sum_h info_h(beta)``.

    Transitions with no observed events are dropped with a warning. The
    covariance is ``[sum_h info_h]^-1 / n`` for partial likelihood and the
    sandwich with summed per-subject contributions for the M-estimator.
    """
    problems = config.violations(data)
    if problems:
        raise ValueError("; ".join(problems))
    d = config.dimension(data)
    terms, empty = _resolve_terms(data, config)
    notes = []
    for h in empty:
        msg = f"transition {h} has no events and is excluded from the fit"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    if not terms:
        raise EstimationError("no configured transition has events")
    if config.kind == NAIVE_COX:
        system = NaiveCoxSystem(data, [t.h for t in terms],
                                {t.h: t.index_map for t in terms if t.index_map is not None}, d=d)
    else:
        system = ScoreSystem(data, terms, config.kind, d=d)
    fit = fit_system(system, config.kind, beta_init, config.tol, config.max_iter, True, config.influence)
    fit.warnings.extend(notes)
    if config.kind == NAIVE_COX:
        fit.terms = terms
        fit.bandwidth_used = {}
    return fit


def transition_contributions(data: DurationDataset, config: MultiFitConfig, beta) -> dict:
    """Per-subject martingale-residual score contributions, one ``n x d`` array per transition."""
    d = config.dimension(data)
    terms, _ = _resolve_terms(data, config)
    system = ScoreSystem(data, terms, config.kind, d=d)
    parts = system.influence(np.atleast_1d(np.asarray(beta, dtype=float)), by_term=True)
    return {t.h: p for t, p in zip(terms, parts)}


def baseline_surfaces(data: DurationDataset, config: MultiFitConfig, beta_hat, grid_v, grid_x,
                      strict: bool = True) -> list:
    """One :class:`HazardSurface` per configured transition at ``beta_hat``.

    Each transition uses its own bandwidth (the same one the fit used). A
    transition with no events gets a zero surface and a warning.
    """
    beta_hat = np.atleast_1d(np.asarray(beta_hat, dtype=float))
    terms, empty = _resolve_terms(data, config, drop_empty=False)
    grid_v = np.asarray(grid_v, dtype=float)
    grid_x = np.asarray(grid_x, dtype=float)
    out = []
    for t in terms:
        if t.h in empty:
            warnings.warn(f"transition {t.h} has no events; its surface is identically zero",
                          RuntimeWarning, stacklevel=2)
            shape = (len(grid_v), len(grid_x))
            d_pq = np.array([region_l2(x, t.kernel) for x in grid_x])
            zero = np.zeros(shape)
            out.append(HazardSurface(t.h, grid_v, grid_x, zero, zero.copy(),
                                     np.broadcast_to(d_pq, shape).copy(), zero.copy(),
                                     np.zeros(len(grid_x), dtype=int), np.zeros(len(grid_x), dtype=int)))
            continue
        out.append(hazard_surface(data, t.h, beta_hat, t.kernel, grid_v, grid_x, t.index_map, strict))
    return out
