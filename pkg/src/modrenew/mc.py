"""Monte Carlo experiments: simulate, fit, summarise and check.

Every replicate's data are generated from ``SeedSequence(master_seed,
spawn_key=(n, rep))``. A replicate therefore depends only on its sample
size and index, never on which other cells are run, in what order, or in how
many processes.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import estimate as est
from .duration import CENSORED, DurationDataset, from_arrays, to_duration
from .estimate import KINDS, M_ESTIMATOR, NAIVE_COX, PARTIAL_LIKELIHOOD
from .io import fmt, rows_to_csv, write_csv, atomic_write_text
from .kernels import KernelSpec
from .model import ModelSpec, simulate_cohort, simulate_spells, validate

log = logging.getLogger(__name__)

TARGETS = ("coverage", "inconsistency", "hazard-band", "bias-rate", "lemma21")


def replicate_seed(master_seed: int, *key: int) -> int:
    """Integer seed for the work unit identified by ``key`` (e.g. ``(n, rep)``)."""
    state = np.random.SeedSequence(master_seed, spawn_key=tuple(int(k) for k in key)).generate_state(2, np.uint64)
    return (int(state[0]) << 64) | int(state[1])


def simulate_dataset(model: ModelSpec, n: int, seed: int, tau0: float | None = None,
                     sampler: str = "cohort") -> DurationDataset:
    """Simulate ``n`` subjects and transform to duration-scale records.

    ``sampler="spells"`` uses the vectorised one-spell sampler (models whose
    transitions all end in absorbing states); ``"cohort"`` the general
    sequential sampler.
    """
    tau0 = model.tau0 if tau0 is None else tau0
    states = model.graph.states
    if sampler == "spells":
        sp = simulate_spells(model, n, seed)
        keep = sp["gap"] > 0
        idx = np.flatnonzero(keep)
        return from_arrays(idx, np.zeros(len(idx), dtype=int), np.full(len(idx), sp["from_state"]),
                           sp["to_state"][keep], sp["gap"][keep], sp["x"][keep], sp["z"][keep], states,
                           start=np.zeros(len(idx)), n=n, tau0=tau0)
    return to_duration(simulate_cohort(model, n, seed), tau0=tau0, states=states)


# ---------------------------------------------------------------------------
# experiment specification and report


@dataclass
class ExperimentSpec:
    """What to simulate, which estimators to fit and which checks to apply.

    ``bandwidth_grid`` entries are ``None`` (the default rule with the
    per-estimator constant from ``bandwidth_c``) or a fixed bandwidth used for
    every transition. ``checks`` holds acceptance thresholds; see
    :func:`evaluate_checks` for the recognised keys.
    """

    model: ModelSpec
    n_grid: Sequence[int]
    replicates: int
    estimators: Sequence[str] = (PARTIAL_LIKELIHOOD, M_ESTIMATOR)
    bandwidth_grid: Sequence = (None,)
    bandwidth_c: Mapping = field(default_factory=dict)
    mu: int = 2
    targets: Sequence[str] = ("coverage",)
    master_seed: int = 0
    tau0: float | None = None
    level: float = 0.95
    hazard_points: Sequence = ()
    hazard_estimator: str = PARTIAL_LIKELIHOOD
    sampler: str = "cohort"
    n_jobs: int = 1
    checks: Mapping = field(default_factory=dict)
    sweep: Mapping = field(default_factory=dict)
    lemma21: Mapping = field(default_factory=dict)
    name: str = "experiment"

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("replicates must be at least 2")
        if not self.n_grid:
            raise ValueError("n_grid must not be empty")
        bad = [e for e in self.estimators if e not in KINDS]
        if bad:
            raise ValueError(f"unknown estimators {bad}")
        bad = [t for t in self.targets if t not in TARGETS]
        if bad:
            raise ValueError(f"unknown targets {bad}")
        if self.sampler not in ("cohort", "spells"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        self.n_grid = tuple(int(n) for n in self.n_grid)
        self.estimators = tuple(self.estimators)
        self.bandwidth_grid = tuple(self.bandwidth_grid)
        self.targets = tuple(self.targets)

    @property
    def analysis_tau0(self) -> float:
        return self.model.tau0 if self.tau0 is None else self.tau0


@dataclass
class CellSummary:
    estimator: str
    n: int
    bandwidth: str
    replicates: int
    converged: int
    failures: int
    mean_bias: np.ndarray
    bias_mcse: np.ndarray
    emp_sd: np.ndarray
    mean_se: np.ndarray
    coverage: np.ndarray
    coverage_se: np.ndarray
    mean_skip_rate: float
    mean_bandwidth: float

    @property
    def invalid(self) -> bool:
        return self.converged == 0


@dataclass
class HazardSummary:
    n: int
    v: float
    x: float
    truth: float
    mean: float
    emp_sd: float
    mean_stderr: float
    count: int

    @property
    def sd_ratio(self) -> float:
        return self.emp_sd / self.mean_stderr if self.mean_stderr > 0 else math.inf


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: str
    detail: str


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    cells: list
    rows: list
    hazard_rows: list = field(default_factory=list)
    hazard: list = field(default_factory=list)
    sweep: object = None
    lemma21: object = None
    checks: list = field(default_factory=list)

    def cell(self, estimator, n, bandwidth="default") -> CellSummary:
        for c in self.cells:
            if c.estimator == estimator and c.n == n and c.bandwidth == bandwidth:
                return c
        raise KeyError((estimator, n, bandwidth))

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary_text(self) -> str:
        lines = [f"experiment {self.spec.name}: master_seed={self.spec.master_seed}, "
                 f"replicates={self.spec.replicates}, beta0={list(map(float, self.spec.model.beta))}"]
        for c in self.cells:
            lines.append(
                f"  {c.estimator:>5} n={c.n:<6} a={c.bandwidth:<8} ok={c.converged}/{c.replicates} "
                f"bias={_vec(c.mean_bias)} (mcse {_vec(c.bias_mcse)}) sd={_vec(c.emp_sd)} "
                f"se={_vec(c.mean_se)} cover={_vec(c.coverage)}"
            )
        for h in self.hazard:
            lines.append(f"  hazard n={h.n} v={h.v:g} x={h.x:g}: mean={h.mean:.4f} truth={h.truth:.4f} "
                         f"sd={h.emp_sd:.4f} stderr={h.mean_stderr:.4f} ratio={h.sd_ratio:.3f}")
        if self.sweep is not None:
            lines.append("  " + self.sweep.describe().replace("\n", "\n  "))
        if self.lemma21 is not None:
            lines.append("  " + self.lemma21.describe().replace("\n", "\n  "))
        for ch in self.checks:
            lines.append(f"  [{'PASS' if ch.passed else 'FAIL'}] {ch.name}: {ch.value} ({ch.detail})")
        return "\n".join(lines) + "\n"


def _vec(a) -> str:
    return "[" + ", ".join(f"{float(v):.4f}" for v in np.atleast_1d(a)) + "]"


# ---------------------------------------------------------------------------
# replicate work unit


def _bandwidth_label(a) -> str:
    return "default" if a is None else fmt(a)


def _fit_one(spec: ExperimentSpec, data: DurationDataset, kind: str, a):
    tau = spec.model.tau
    c = float(spec.bandwidth_c.get(kind, 1.0))
    kernel = None if a is None else KernelSpec(spec.mu, float(a), tau)
    return est.solve(data, kind, kernel, mu=spec.mu, c=c, tau=tau, d=spec.model.d,
                     index_maps={h: spec.model.index_map(h) for h in spec.model.graph.transitions},
                     influence=False)


def _replicate(args):
    spec, n, rep = args
    seed = replicate_seed(spec.master_seed, n, rep)
    data = simulate_dataset(spec.model, n, seed, spec.analysis_tau0, spec.sampler)
    beta0 = np.asarray(spec.model.beta, dtype=float)
    zq = stats.norm.ppf(0.5 + spec.level / 2)
    rows, hazard_rows = [], []
    fits = {}
    for kind in spec.estimators:
        for a in spec.bandwidth_grid if kind != NAIVE_COX else (None,):
            row = {"n": n, "rep": rep, "estimator": kind, "bandwidth": _bandwidth_label(a)}
            try:
                fit = _fit_one(spec, data, kind, a)
            except est.EstimationError as exc:
                row.update(converged=False, error=f"{type(exc).__name__}: {exc}")
                rows.append(row)
                continue
            se = fit.stderr
            row.update(
                converged=True, error="", beta_hat=fit.beta_hat, se=se,
                covered=np.abs(fit.beta_hat - beta0) <= zq * se, iterations=fit.iterations,
                skip_rate=fit.skipped / fit.considered if fit.considered else 0.0,
                bandwidth_used=float(np.mean(list(fit.bandwidth_used.values()))) if fit.bandwidth_used else np.nan,
            )
            rows.append(row)
            fits[(kind, row["bandwidth"])] = fit
    if "hazard-band" in spec.targets and spec.hazard_points:
        fit = fits.get((spec.hazard_estimator, _bandwidth_label(spec.bandwidth_grid[0])))
        if fit is not None:
            for (h, v, x) in _hazard_points(spec):
                term = next(t for t in fit.terms if t.h == h)
                curve = est.aalen_nelson(data, h, fit.beta_hat, x, term.kernel, [v], term.index_map, strict=False)
                hazard_rows.append({"n": n, "rep": rep, "h": h, "v": v, "x": x,
                                    "A_hat": float(curve.raw[0]), "stderr": float(curve.stderr[0])})
    return rows, hazard_rows


def _hazard_points(spec: ExperimentSpec):
    default_h = spec.model.graph.transitions[0]
    for p in spec.hazard_points:
        if len(p) == 2:
            yield (tuple(default_h), float(p[0]), float(p[1]))
        else:
            yield (tuple(p[0]), float(p[1]), float(p[2]))


def _nanmean(values) -> float:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if len(v) else float("nan")


def _summarise(spec: ExperimentSpec, rows) -> list:
    beta0 = np.asarray(spec.model.beta, dtype=float)
    cells = []
    keys = []
    for r in rows:
        k = (r["estimator"], r["n"], r["bandwidth"])
        if k not in keys:
            keys.append(k)
    for kind, n, bw in keys:
        sel = [r for r in rows if (r["estimator"], r["n"], r["bandwidth"]) == (kind, n, bw)]
        ok = [r for r in sel if r["converged"]]
        d = len(beta0)
        if ok:
            b = np.array([r["beta_hat"] for r in ok])
            se = np.array([r["se"] for r in ok])
            cov = np.array([r["covered"] for r in ok], dtype=float)
            m = len(ok)
            sd = b.std(axis=0, ddof=1) if m > 1 else np.full(d, np.nan)
            p = cov.mean(axis=0)
            cells.append(CellSummary(
                kind, n, bw, len(sel), m, len(sel) - m, b.mean(axis=0) - beta0, sd / math.sqrt(m), sd,
                se.mean(axis=0), p, np.sqrt(p * (1 - p) / m),
                float(np.mean([r["skip_rate"] for r in ok])), _nanmean([r["bandwidth_used"] for r in ok]),
            ))
        else:
            nan = np.full(d, np.nan)
            cells.append(CellSummary(kind, n, bw, len(sel), 0, len(sel), nan, nan, nan, nan, nan, nan,
                                     np.nan, np.nan))
    return cells


def _summarise_hazard(spec: ExperimentSpec, hazard_rows) -> list:
    out = []
    seen = []
    for r in hazard_rows:
        k = (r["n"], r["h"], r["v"], r["x"])
        if k not in seen:
            seen.append(k)
    for n, h, v, x in seen:
        sel = [r for r in hazard_rows if (r["n"], r["h"], r["v"], r["x"]) == (n, h, v, x)]
        a = np.array([r["A_hat"] for r in sel])
        s = np.array([r["stderr"] for r in sel])
        truth = float(spec.model.baselines[h].cumulative(v, x))
        out.append(HazardSummary(n, v, x, truth, float(a.mean()), float(a.std(ddof=1)), float(s.mean()), len(sel)))
    return out


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """Run every (n, replicate) work unit, summarise, and evaluate checks.

    Failed fits are recorded in the per-replicate table and never abort the
    run; a cell whose replicates all fail is marked invalid.
    """
    validate(spec.model)
    units = [(spec, n, rep) for n in spec.n_grid for rep in range(spec.replicates)]
    rows, hazard_rows = [], []
    if spec.n_jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=spec.n_jobs) as pool:
            results = list(pool.map(_replicate, units, chunksize=max(1, len(units) // (4 * spec.n_jobs))))
    else:
        results = [_replicate(u) for u in units]
    for r, hz in results:
        rows.extend(r)
        hazard_rows.extend(hz)
    report = ExperimentReport(spec, _summarise(spec, rows), rows, hazard_rows, _summarise_hazard(spec, hazard_rows))
    if "bias-rate" in spec.targets:
        report.sweep = bias_rate_sweep(spec.model, seed=spec.master_seed, mu=spec.mu, **dict(spec.sweep))
    if "lemma21" in spec.targets:
        report.lemma21 = lemma21_check(spec.model, seed=spec.master_seed, tau0=spec.analysis_tau0,
                                       **dict(spec.lemma21))
    report.checks = evaluate_checks(report)
    return report


# ---------------------------------------------------------------------------
# acceptance-style checks


def evaluate_checks(report: ExperimentReport) -> list:
    """Evaluate the thresholds in ``report.spec.checks``.

    Recognised keys: ``coverage_band`` (lo, hi) with optional ``coverage_n``;
    ``shrink_factor`` with optional ``shrink_n`` (n_small, n_large);
    ``naive_se_multiple`` and ``naive_ratio`` with optional
    ``naive_reference``; ``hazard_sd_tolerance``; ``bias_slope_band``;
    ``lemma21_z``.
    """
    spec, ch = report.spec, report.spec.checks
    out = []
    smoothed = [e for e in spec.estimators if e != NAIVE_COX]
    big, small = max(spec.n_grid), min(spec.n_grid)
    bw0 = _bandwidth_label(spec.bandwidth_grid[0])
    if "coverage_band" in ch:
        lo, hi = ch["coverage_band"]
        n = int(ch.get("coverage_n", big))
        for e in smoothed:
            c = report.cell(e, n, bw0)
            ok = not c.invalid and bool(np.all((c.coverage >= lo) & (c.coverage <= hi)))
            out.append(CheckResult(f"coverage[{e}, n={n}]", ok, _vec(c.coverage),
                                   f"band [{lo}, {hi}], {c.converged} converged"))
    if "shrink_factor" in ch:
        factor = float(ch["shrink_factor"])
        n1, n2 = ch.get("shrink_n", (small, big))
        for e in smoothed:
            b1, b2 = np.abs(report.cell(e, n1, bw0).mean_bias), np.abs(report.cell(e, n2, bw0).mean_bias)
            ratio = b1 / np.where(b2 > 0, b2, np.finfo(float).tiny)
            ok = bool(np.all(ratio >= factor))
            out.append(CheckResult(f"bias shrink[{e}, n={n1}->{n2}]", ok, _vec(ratio),
                                   f"|bias| {_vec(b1)} -> {_vec(b2)}, need >= {factor}"))
    if "naive_se_multiple" in ch or "naive_ratio" in ch:
        n = int(ch.get("naive_n", big))
        naive = report.cell(NAIVE_COX, n, "default")
        ref_kind = ch.get("naive_reference", PARTIAL_LIKELIHOOD)
        ref = report.cell(ref_kind, n, bw0)
        z = np.abs(naive.mean_bias) / naive.bias_mcse
        if "naive_se_multiple" in ch:
            k = float(ch["naive_se_multiple"])
            out.append(CheckResult(f"naive bias significance[n={n}]", bool(np.all(z > k)), _vec(z),
                                   f"|bias|/mcse, need > {k}"))
        if "naive_ratio" in ch:
            k = float(ch["naive_ratio"])
            ratio = np.abs(naive.mean_bias) / np.abs(ref.mean_bias)
            out.append(CheckResult(f"naive/{ref_kind} bias ratio[n={n}]", bool(np.all(ratio >= k)), _vec(ratio),
                                   f"naive {_vec(naive.mean_bias)} vs {ref_kind} {_vec(ref.mean_bias)}, need >= {k}"))
    if "hazard_sd_tolerance" in ch:
        tol = float(ch["hazard_sd_tolerance"])
        for h in report.hazard:
            ok = abs(h.sd_ratio - 1.0) <= tol
            out.append(CheckResult(f"hazard band[n={h.n}, v={h.v:g}, x={h.x:g}]", ok, f"{h.sd_ratio:.4f}",
                                   f"empirical sd / mean stderr, need within {tol} of 1"))
    if "bias_slope_band" in ch and report.sweep is not None:
        lo, hi = ch["bias_slope_band"]
        s = report.sweep
        ok = bool(np.isfinite(s.slope) and lo <= s.slope <= hi)
        out.append(CheckResult("bias rate slope", ok, f"{s.slope:.4f}", f"band [{lo}, {hi}], "
                               f"{int(np.sum(s.used))} usable bandwidths"))
    if "lemma21_z" in ch and report.lemma21 is not None:
        k = float(ch["lemma21_z"])
        for name, zval in report.lemma21.statistics():
            out.append(CheckResult(f"lemma21 {name}", abs(zval) <= k, f"{zval:.3f}", f"|z| <= {k}"))
    return out


# ---------------------------------------------------------------------------
# bias-rate sweep


@dataclass
class SweepResult:
    bandwidths: np.ndarray
    sup_bias: np.ndarray
    se_at_sup: np.ndarray
    argmax: list
    used: np.ndarray
    slope: float
    slope_se: float
    intercept: float
    n: int
    replicates: int

    def describe(self) -> str:
        lines = [f"bias-rate sweep (n={self.n}, replicates={self.replicates}): slope={self.slope:.4f} "
                 f"(se {self.slope_se:.4f})"]
        for a, b, s, u, am in zip(self.bandwidths, self.sup_bias, self.se_at_sup, self.used, self.argmax):
            lines.append(f"  a={a:.4g}: sup|bias|={b:.5f} se={s:.5f} at (v={am[0]:g}, x={am[1]:g})"
                         f"{'' if u else ' [not used: se >= 20% of bias]'}")
        return "\n".join(lines)


def bias_rate_sweep(model: ModelSpec, bandwidths: Sequence[float], n: int, replicates: int, grid_v, grid_x,
                    seed: int = 0, h=None, mu: int = 2, max_rel_se: float = 0.2, sampler: str | None = None,
                    tau0: float | None = None) -> SweepResult:
    """Log-log slope of ``sup_grid |mean A_hat - A|`` against the bandwidth.

    ``A_hat`` is the raw conditional Aalen-Nelson estimator at the true
    coefficient, averaged over ``replicates`` datasets of size ``n``. A
    bandwidth enters the regression only if the replicate standard error at
    the maximising grid point is below ``max_rel_se`` times the bias there.
    """
    bandwidths = np.asarray(sorted(bandwidths, reverse=True), dtype=float)
    if len(bandwidths) < 3:
        raise ValueError("the bias-rate sweep needs at least 3 bandwidths")
    h = tuple(model.graph.transitions[0]) if h is None else tuple(h)
    grid_v = np.asarray(grid_v, dtype=float)
    grid_x = np.asarray(grid_x, dtype=float)
    if sampler is None:
        try:
            simulate_spells(model, 1, 0)
            sampler = "spells"
        except Exception:
            sampler = "cohort"
    tau0 = model.tau0 if tau0 is None else tau0
    truth = np.asarray(model.baselines[h].cumulative(grid_v[:, None], grid_x[None, :]), dtype=float)
    specs = [KernelSpec(mu, a, model.tau) for a in bandwidths]
    shape = (len(bandwidths), len(grid_v), len(grid_x))
    total, total_sq = np.zeros(shape), np.zeros(shape)
    beta = np.asarray(model.beta, dtype=float)
    imap = model.index_map(h)
    for rep in range(replicates):
        data = simulate_dataset(model, n, replicate_seed(seed, n, rep, 1), tau0, sampler)
        term = est._HazardTerm(data, h, beta, imap)
        for k, ks in enumerate(specs):
            for j, x in enumerate(grid_x):
                val = est._curve(term, x, ks, grid_v, strict=False).raw
                total[k, :, j] += val
                total_sq[k, :, j] += val * val
    mean = total / replicates
    var = np.maximum(total_sq / replicates - mean**2, 0.0) * replicates / (replicates - 1)
    se = np.sqrt(var / replicates)
    bias = np.abs(mean - truth[None])
    sup, se_sup, argmax = [], [], []
    for k in range(len(bandwidths)):
        i = np.unravel_index(np.argmax(bias[k]), bias[k].shape)
        sup.append(bias[k][i])
        se_sup.append(se[k][i])
        argmax.append((float(grid_v[i[0]]), float(grid_x[i[1]])))
    sup, se_sup = np.array(sup), np.array(se_sup)
    used = (sup > 0) & (se_sup < max_rel_se * sup)
    slope = slope_se = intercept = np.nan
    if used.sum() >= 2:
        la, lb = np.log(bandwidths[used]), np.log(sup[used])
        res = stats.linregress(la, lb)
        slope, intercept = float(res.slope), float(res.intercept)
        slope_se = float(res.stderr) if used.sum() > 2 else np.nan
    return SweepResult(bandwidths, sup, se_sup, argmax, used, slope, slope_se, intercept, n, replicates)


# ---------------------------------------------------------------------------
# martingale moment identities


@dataclass
class Lemma21Result:
    n_subjects: int
    n_epochs: int
    first: dict
    second: dict
    cross: dict

    def statistics(self):
        for h, (m, se) in self.first.items():
            yield f"first moment {h}", m / se if se > 0 else 0.0
        for h, (m, se) in self.second.items():
            yield f"second moment {h}", m / se if se > 0 else 0.0
        for pair, (m, se) in self.cross.items():
            yield f"cross {pair[0]}x{pair[1]}", m / se if se > 0 else 0.0

    def describe(self) -> str:
        parts = [f"martingale identity checks on {self.n_epochs} epochs ({self.n_subjects} subjects):"]
        parts += [f"  {name}: z={z:.3f}" for name, z in self.statistics()]
        return "\n".join(parts)


def _phi_integral(cum_fn, gap, x, breaks, values, power):
    """``int_0^gap phi(u)^power alpha(u, x) du`` for piecewise-constant ``phi``."""
    total = np.zeros(len(gap))
    edges = list(breaks) + [np.inf]
    for k, c in enumerate(values):
        lo = np.minimum(gap, edges[k])
        hi = np.minimum(gap, edges[k + 1])
        total += c**power * (cum_fn(hi, x) - cum_fn(lo, x))
    return total


def lemma21_check(model: ModelSpec, n: int | None = None, seed: int = 0, tau0: float | None = None,
                  min_epochs: int = 100_000, phi_breaks=None, phi_values=None, mark_weight: bool = True,
                  data: DurationDataset | None = None) -> Lemma21Result:
    """Monte Carlo check of the martingale moment identities at the true parameters.

    For a predictable test function ``phi_m(v) = c(v) (1 + X_m)`` with
    ``c`` piecewise constant, and per-subject sums over epochs, this reports
    standardised means of

    * ``int phi dN_h - int Y phi exp(beta'Z) alpha_h du`` (first moment),
    * ``(int phi dM_h)^2 - int Y phi^2 exp(beta'Z) alpha_h du`` (second moment),
    * ``(int phi dM_h)(int phi dM_k)`` for distinct ``h, k`` (orthogonality).

    ``n`` defaults to enough subjects for ``min_epochs`` duration records.
    """
    tau0 = model.tau0 if tau0 is None else tau0
    phi_breaks = np.asarray([0.0, tau0 / 2] if phi_breaks is None else phi_breaks, dtype=float)
    phi_values = np.asarray([1.0, 2.0] if phi_values is None else phi_values, dtype=float)
    if data is None:
        if n is None:
            probe = simulate_dataset(model, 200, replicate_seed(seed, 0, 0, 2), tau0)
            n = int(math.ceil(min_epochs / (len(probe) / 200) * 1.05))
        data = simulate_dataset(model, n, replicate_seed(seed, n, 0, 2), tau0)
    beta = np.asarray(model.beta, dtype=float)
    weight = 1.0 + data.x if mark_weight else np.ones(len(data))
    martingale, compensator2 = {}, {}
    for h in model.graph.transitions:
        h = tuple(h)
        mask = data.from_state == h[0]
        z = model.design(h, data.z[mask])
        eta = np.exp(z @ beta)
        gap, x = data.gap[mask], data.x[mask]
        event = data.to_state[mask] == h[1]
        ci = np.clip(np.searchsorted(phi_breaks, gap, side="left") - 1, 0, len(phi_values) - 1)
        phi_at_gap = phi_values[ci] * weight[mask]
        cum = model.baselines[h].cumulative
        comp1 = eta * weight[mask] * _phi_integral(cum, gap, x, phi_breaks, phi_values, 1)
        comp2 = eta * weight[mask] ** 2 * _phi_integral(cum, gap, x, phi_breaks, phi_values, 2)
        dm = np.where(event, phi_at_gap, 0.0) - comp1
        martingale[h] = np.bincount(data.subject[mask], weights=dm, minlength=data.n)
        compensator2[h] = np.bincount(data.subject[mask], weights=comp2, minlength=data.n)

    def mean_se(v):
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))

    first = {h: mean_se(m) for h, m in martingale.items()}
    second = {h: mean_se(martingale[h] ** 2 - compensator2[h]) for h in martingale}
    hs = list(martingale)
    cross = {(hs[i], hs[j]): mean_se(martingale[hs[i]] * martingale[hs[j]])
             for i in range(len(hs)) for j in range(i + 1, len(hs))}
    return Lemma21Result(data.n, len(data), first, second, cross)


# ---------------------------------------------------------------------------
# report emission


def write_report(report: ExperimentReport, out_dir) -> list:
    """Write CSV tables and a text summary; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = report.spec.model.d
    paths = []

    def emit(name, header, rows):
        write_csv(out / name, header, rows)
        paths.append(out / name)

    comp = [f"{stat}{k + 1}" for stat in ("bias", "bias_mcse", "sd", "se", "coverage", "coverage_se")
            for k in range(d)]
    emit("cells.csv", ["estimator", "n", "bandwidth", "replicates", "converged", "failures", *comp,
                       "mean_skip_rate", "mean_bandwidth"],
         [[c.estimator, c.n, c.bandwidth, c.replicates, c.converged, c.failures,
           *np.concatenate([c.mean_bias, c.bias_mcse, c.emp_sd, c.mean_se, c.coverage, c.coverage_se]),
           c.mean_skip_rate, c.mean_bandwidth] for c in report.cells])
    rep_rows = []
    for r in report.rows:
        if r["converged"]:
            vals = [*r["beta_hat"], *r["se"], *np.asarray(r["covered"], dtype=int), r["iterations"], r["skip_rate"],
                    r["bandwidth_used"]]
        else:
            vals = [np.nan] * (3 * d + 3)
        rep_rows.append([r["estimator"], r["n"], r["rep"], r["bandwidth"], int(r["converged"]), *vals, r["error"]])
    emit("replicates.csv", ["estimator", "n", "rep", "bandwidth", "converged",
                            *[f"beta{k + 1}" for k in range(d)], *[f"se{k + 1}" for k in range(d)],
                            *[f"covered{k + 1}" for k in range(d)], "iterations", "skip_rate", "bandwidth_used",
                            "error"], rep_rows)
    if report.hazard_rows:
        emit("hazard_replicates.csv", ["n", "rep", "transition", "v", "x", "A_hat", "stderr"],
             [[r["n"], r["rep"], f"{r['h'][0]}->{r['h'][1]}", r["v"], r["x"], r["A_hat"], r["stderr"]]
              for r in report.hazard_rows])
        emit("hazard.csv", ["n", "v", "x", "truth", "mean", "emp_sd", "mean_stderr", "sd_ratio", "count"],
             [[h.n, h.v, h.x, h.truth, h.mean, h.emp_sd, h.mean_stderr, h.sd_ratio, h.count] for h in report.hazard])
    if report.sweep is not None:
        s = report.sweep
        emit("sweep.csv", ["bandwidth", "sup_bias", "se_at_sup", "v_at_sup", "x_at_sup", "used"],
             [[a, b, e, am[0], am[1], int(u)] for a, b, e, am, u in zip(s.bandwidths, s.sup_bias, s.se_at_sup,
                                                                       s.argmax, s.used)])
    if report.lemma21 is not None:
        emit("lemma21.csv", ["statistic", "z"], [[name, z] for name, z in report.lemma21.statistics()])
    emit("checks.csv", ["check", "passed", "value", "detail"],
         [[c.name, "PASS" if c.passed else "FAIL", c.value, c.detail] for c in report.checks])
    atomic_write_text(out / "summary.txt", report.summary_text())
    paths.append(out / "summary.txt")
    return paths
