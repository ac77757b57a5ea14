"""Command-line interface: ``modrenew simulate | fit | hazard | mc``.

Exit codes: 0 success, 2 configuration or usage error, 3 data error,
4 estimation error, 5 failed acceptance check (``mc --check``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from . import mc
from .config import ConfigError, Section, describe_model, experiment_spec, model_spec, read_config
from .duration import DataError, to_duration
from .estimate import NAIVE_COX, EstimationError, NoContrastError, default_tau
from .io import atomic_write_text, calendar_csv, duration_csv, fmt, read_records, rows_to_csv
from .kernels import KernelSpec, KernelDomainError
from .model import ModelError, simulate_cohort
from .multistate import MultiFitConfig, TransitionConfig, baseline_surfaces, fit_multistate

log = logging.getLogger("modrenew")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ESTIMATION, EXIT_CHECK = 0, 2, 3, 4, 5
HAZARD_HEADER = ("transition", "v", "x", "A_hat", "stderr", "d_pq", "skipped")
COMPARATOR_NOTE = "comparator only: calendar-time Cox score, not consistent under duration dependence"


class UsageError(ValueError):
    """Invalid command-line options (reported with exit code 2)."""


def bundled_config(name: str) -> Path | None:
    """Path of a configuration shipped with the package, or ``None``."""
    res = resources.files("modrenew") / "configs" / name
    return Path(str(res)) if res.is_file() else None


def _resolve_config(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    bundled = bundled_config(p.name)
    if bundled is None:
        raise ConfigError(f"{path}: no such file (and no bundled config of that name)")
    return bundled


def parse_grid(text: str, lo: float, hi: float, name: str, open_interval: bool = False) -> np.ndarray:
    """``"a:b:k"`` gives ``k`` equally spaced points on ``[a, b]``; otherwise a comma list.

    Points must lie in ``[lo, hi]`` (or ``(lo, hi)`` with ``open_interval``).
    """
    try:
        if ":" in text:
            a, b, k = text.split(":")
            grid = np.linspace(float(a), float(b), int(k))
        else:
            grid = np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError:
        raise UsageError(f"{name}: cannot parse grid {text!r} (use start:stop:count or a comma list)") from None
    if grid.size == 0:
        raise UsageError(f"{name}: empty grid")
    outside = (grid <= lo) | (grid >= hi) if open_interval else (grid < lo) | (grid > hi)
    if np.any(outside) or not np.all(np.isfinite(grid)):
        lb, rb = ("(", ")") if open_interval else ("[", "]")
        raise UsageError(f"{name}: grid must lie in {lb}{lo:.17g}, {hi:.17g}{rb}")
    return grid


def _label(states, h) -> str:
    return f"{states[h[0]]}->{states[h[1]]}"


def _parse_transition_opt(text: str, states) -> TransitionConfig:
    """``A->B`` or ``A->B:i,j,...`` (index map, ``-1`` drops a column)."""
    spec, _, imap = text.partition(":")
    if "->" not in spec:
        raise UsageError(f"--transition {text!r}: expected A->B[:index,map]")
    a, b = (s.strip() for s in spec.split("->", 1))
    for s in (a, b):
        if s not in states:
            raise UsageError(f"--transition {text!r}: unknown state {s!r}")
    try:
        index_map = tuple(int(t) for t in imap.split(",")) if imap else None
    except ValueError:
        raise UsageError(f"--transition {text!r}: index map must be integers") from None
    return TransitionConfig((states.index(a), states.index(b)), None, index_map)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    path = _resolve_config(args.config)
    parser = read_config(path)
    spec = model_spec(parser, str(path))
    sim = Section(parser, "simulation", str(path))
    n = sim.int("n", 200)
    seed = sim.int("seed", 0)
    seed = seed if args.seed is None else args.seed
    n_jobs = sim.int("n_jobs", 1)
    sim.check_unknown()
    if n < 1:
        raise ConfigError(f"{path}: [simulation] n must be positive")
    tau0 = spec.tau0 if args.tau0 is None else args.tau0
    cohort = simulate_cohort(spec, n, seed, n_jobs=n_jobs)
    data = to_duration(cohort, tau0=tau0, states=spec.graph.states)
    out = Path(args.out)
    echo = describe_model(spec) + f"n: {n}\nseed: {seed}\n"
    atomic_write_text(out / "duration.csv", duration_csv(data))
    atomic_write_text(out / "calendar.csv", calendar_csv(data))
    atomic_write_text(out / "model.txt", echo)
    sys.stdout.write(echo)
    sys.stdout.write(f"wrote {len(data)} records for {n} subjects to {out}\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit


def fit_table(fit, coef_names) -> str:
    """Regression table: estimate, standard error, Wald z and two-sided p."""
    se = fit.stderr
    z = np.where(se > 0, fit.beta_hat / np.where(se > 0, se, 1.0), np.nan)
    p = 2 * stats.norm.sf(np.abs(z))
    lines = [f"{'coefficient':<12} {'estimate':>12} {'std.err':>12} {'z':>9} {'p':>10}"]
    for k, name in enumerate(coef_names):
        lines.append(f"{name:<12} {fit.beta_hat[k]:>12.6f} {se[k]:>12.6f} {z[k]:>9.3f} {p[k]:>10.4g}")
    return "\n".join(lines)


def fit_report(fit, data, config: MultiFitConfig) -> dict:
    se = fit.stderr
    z = [float(b / s) if s > 0 else float("nan") for b, s in zip(fit.beta_hat, se)]
    states = data.states
    transitions = []
    for t in fit.terms:
        transitions.append({
            "transition": _label(states, t.h),
            "bandwidth": t.kernel.bandwidth,
            "mu": t.kernel.mu,
            "tau": t.kernel.tau,
            "index_map": None if t.index_map is None else list(t.index_map),
        })
    report = {
        "estimator": fit.estimator_kind,
        "comparator_only": fit.estimator_kind == NAIVE_COX,
        "n_subjects": int(data.n),
        "n_records": int(len(data)),
        "tau0": data.tau0 if np.isfinite(data.tau0) else None,
        "states": list(states),
        "beta_hat": [float(b) for b in fit.beta_hat],
        "stderr": [float(s) for s in se],
        "covariance": [[float(v) for v in row] for row in fit.covariance],
        "wald_z": z,
        "p_value": [float(2 * stats.norm.sf(abs(v))) for v in z],
        "iterations": int(fit.iterations),
        "final_score_norm": float(fit.final_score_norm),
        "converged": bool(fit.final_score_norm < config.tol),
        "skipped_events": int(fit.skipped),
        "considered_events": int(fit.considered),
        "skip_rate": float(fit.skipped / fit.considered) if fit.considered else 0.0,
        "transitions": transitions,
        "warnings": list(fit.warnings),
    }
    if report["comparator_only"]:
        report["note"] = COMPARATOR_NOTE
    return report


def _fit_config(args, data) -> MultiFitConfig:
    states = list(data.states)
    if args.transition:
        trans = [_parse_transition_opt(t, states) for t in args.transition]
    else:
        trans = [TransitionConfig(h) for h in data.transitions]
    if args.tau is not None and args.tau <= float(np.max(data.x)):
        raise UsageError(f"--tau must exceed the largest mark {float(np.max(data.x)):g}")
    tau = default_tau(data) if args.tau is None else args.tau
    if args.bandwidth is not None:
        if not args.bandwidth > 0:
            raise UsageError("--bandwidth must be positive")
        trans = [TransitionConfig(t.h, KernelSpec(args.mu, args.bandwidth, tau), t.index_map) for t in trans]
    return MultiFitConfig(trans, kind=args.estimator, mu=args.mu, c=args.bandwidth_c, tau=tau)


def cmd_fit(args) -> int:
    data = read_records(args.data, tau0=args.tau0)
    config = _fit_config(args, data)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_multistate(data, config)
    for w in caught:
        log.warning("%s", w.message)
    report = fit_report(fit, data, config)
    names = [f"beta{k + 1}" for k in range(len(fit.beta_hat))]
    text = [f"estimator: {fit.estimator_kind}" + ("  [" + COMPARATOR_NOTE + "]" if report["comparator_only"] else ""),
            f"subjects: {data.n}  records: {len(data)}  tau0: {data.tau0!r}",
            fit_table(fit, names),
            "covariance:",
            *["  " + "  ".join(f"{v: .6e}" for v in row) for row in fit.covariance],
            f"iterations: {fit.iterations}  final |score|: {fit.final_score_norm:.3e}  "
            f"converged: {report['converged']}",
            f"skipped events: {fit.skipped}/{fit.considered}"]
    if not report["comparator_only"]:
        for t in report["transitions"]:
            text.append(f"transition {t['transition']}: bandwidth {t['bandwidth']:.6g}")
    for w in fit.warnings:
        text.append(f"warning: {w}")
    if args.out:
        atomic_write_text(args.out, json.dumps(report, indent=2) + "\n")
    sys.stdout.write("\n".join(text) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# hazard


def cmd_hazard(args) -> int:
    if not args.fit:
        raise UsageError("hazard needs --fit (a report written by 'modrenew fit --out')")
    try:
        report = json.loads(Path(args.fit).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"{args.fit}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.fit}: not a fit report ({exc})") from None
    tau0 = args.tau0 if args.tau0 is not None else report.get("tau0")
    data = read_records(args.data, tau0=tau0, states=report["states"])
    if report.get("comparator_only"):
        log.warning("baseline surfaces from a comparator-only fit use calendar-time coefficients")
    tau = report["transitions"][0]["tau"]
    v_max = data.tau0 if np.isfinite(data.tau0) else float(np.max(data.gap))
    grid_v = (parse_grid(args.grid_v, 0.0, v_max, "--grid-v") if args.grid_v
              else np.linspace(0.0, v_max, 20))
    grid_x = (parse_grid(args.grid_x, 0.0, tau, "--grid-x", open_interval=True) if args.grid_x
              else np.linspace(0.0, tau, 22)[1:-1])
    states = list(data.states)
    trans = []
    for t in report["transitions"]:
        tc = _parse_transition_opt(t["transition"], states)
        kernel = KernelSpec(args.mu or t["mu"], args.bandwidth or t["bandwidth"], t["tau"])
        trans.append(TransitionConfig(tc.h, kernel, None if t["index_map"] is None else tuple(t["index_map"])))
    for extra in args.transition or []:
        tc = _parse_transition_opt(extra, states)
        if all(t.h != tc.h for t in trans):
            trans.append(TransitionConfig(tc.h, KernelSpec(args.mu or 2, args.bandwidth or trans[0].kernel.bandwidth,
                                                           tau), tc.index_map))
    config = MultiFitConfig(trans, kind="pl", d=len(report["beta_hat"]), tau=tau)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        surfaces = baseline_surfaces(data, config, report["beta_hat"], grid_v, grid_x, strict=False)
    for w in caught:
        log.warning("%s", w.message)
    rows = []
    for s in surfaces:
        lab = _label(states, s.transition)
        for j, x in enumerate(s.grid_x):
            for i, v in enumerate(s.grid_v):
                rows.append([lab, v, x, s.values[i, j], s.stderr[i, j], s.d_pq_used[i, j], int(s.skipped[j])])
    text = rows_to_csv(HAZARD_HEADER, rows)
    if args.out:
        atomic_write_text(args.out, text)
        sys.stdout.write(f"wrote {len(rows)} rows to {args.out}\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# mc


def cmd_mc(args) -> int:
    path = _resolve_config(args.config)
    parser = read_config(path)
    spec = experiment_spec(parser, str(path), seed=args.seed, n_jobs=args.jobs)
    report = mc.run_experiment(spec)
    if args.out:
        mc.write_report(report, args.out)
    sys.stdout.write(report.summary_text())
    if args.check and not report.all_passed:
        failed = [c.name for c in report.checks if not c.passed]
        log.error("failed checks: %s", ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modrenew", description="Semiparametric modulated renewal process tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a cohort from a model config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory (duration.csv, calendar.csv, model.txt)")
    s.add_argument("--seed", type=int)
    s.add_argument("--tau0", type=float, help="duration truncation (default: the model's tau0)")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="estimate the regression coefficient")
    f.add_argument("--data", required=True)
    f.add_argument("--out", help="JSON fit report (needed by 'hazard')")
    f.add_argument("--estimator", choices=("m", "pl", "naive"), default="pl")
    f.add_argument("--bandwidth", type=float, help="bandwidth for every transition (default: plug-in rule)")
    f.add_argument("--bandwidth-c", type=float, default=1.0, help="constant of the default bandwidth rule")
    f.add_argument("--mu", type=int, default=2, choices=(1, 2, 3))
    f.add_argument("--tau0", type=float)
    f.add_argument("--tau", type=float, help="upper end of the mark range (default: just above max x)")
    f.add_argument("--transition", action="append", help="A->B[:index,map]; repeatable")
    f.set_defaults(func=cmd_fit)

    h = sub.add_parser("hazard", help="baseline cumulative hazard surfaces")
    h.add_argument("--data", required=True)
    h.add_argument("--fit", required=True)
    h.add_argument("--out")
    h.add_argument("--grid-v", help="start:stop:count or comma list within [0, tau0]")
    h.add_argument("--grid-x", help="start:stop:count or comma list strictly inside (0, tau)")
    h.add_argument("--bandwidth", type=float)
    h.add_argument("--mu", type=int, choices=(1, 2, 3))
    h.add_argument("--tau0", type=float)
    h.add_argument("--transition", action="append", help="extra transition to report, A->B")
    h.set_defaults(func=cmd_hazard)

    m = sub.add_parser("mc", help="run a Monte Carlo experiment")
    m.add_argument("--config", required=True, help="experiment config (bundled: coverage.cfg, inconsistency.cfg)")
    m.add_argument("--out", help="report directory")
    m.add_argument("--seed", type=int, help="override the master seed")
    m.add_argument("--jobs", type=int, help="worker processes")
    m.add_argument("--check", action="store_true", help="exit 5 if any check fails")
    m.set_defaults(func=cmd_mc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="modrenew: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ModelError, UsageError, KernelDomainError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NoContrastError as exc:
        log.error("no covariate contrast: %s", exc)
        return EXIT_ESTIMATION
    except EstimationError as exc:
        log.error("estimation failed: %s: %s", type(exc).__name__, exc)
        return EXIT_ESTIMATION
    except ValueError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
