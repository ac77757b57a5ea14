"""INI-style configuration files for models and experiments.

Schema (all sections except ``[model]`` and the baselines are optional)::

    [model]
    states = 0, 1, 2             ; state labels
    transitions = 0->1, 0->2     ; allowed one-step transitions
    beta = 0.5, -0.3
    tau0 = 2                     ; duration truncation
    tau = 1                      ; upper end of the mark range
    initial = 0                  ; initial state (or "0:0.7, 1:0.3")
    progressive = false
    sampler = thinning           ; or inversion

    [baseline 0->1]
    kind = weibull               ; constant | weibull | piecewise | kink
    scale = 1
    shape = 2
    slope = 2                    ; weibull: exp(slope*x); kink: 1+slope*|x-x0|
    x0 = 0.5                     ; kink only
    rate = 1                     ; constant only
    u_breaks = 0, 1              ; piecewise only
    x_breaks = 0, 0.5
    values = 1, 2, 3, 4          ; row-major over (u cell, x cell)
    bound = 30                   ; optional thinning bound
    index_map = 0, -1            ; optional, data column -> coefficient

    [covariates]
    z = normal 0 1; bernoulli 0.5
    x = uniform                  ; or "beta 2 2", "normal 0.5 0.1", ...
    x_loading = 1.0

    [censoring]
    kind = horizon               ; none | horizon | epoch
    dist = uniform 2 4

    [simulation]
    n = 800
    seed = 1

    [experiment]                 ; see :func:`experiment_spec`
    [sweep]
    [lemma21]
    [checks]
"""

from __future__ import annotations

import configparser
from pathlib import Path

import numpy as np

from .model import (
    CensoringLaw,
    ConstantHazard,
    CovariateLaw,
    Dist,
    ModelError,
    ModelSpec,
    PiecewiseConstantHazard,
    SeparableHazard,
    StateGraph,
    WeibullHazard,
    validate,
)


class ConfigError(ValueError):
    """A configuration file is unreadable, malformed, or describes an invalid model."""


def _where(section, key=None):
    return f"[{section}]" + (f" {key}" if key else "")


class Section:
    """Typed accessors over one config section with key-naming error messages."""

    def __init__(self, parser: configparser.ConfigParser, name: str, path: str = "<config>"):
        self.name = name
        self.path = path
        self.values = dict(parser[name]) if parser.has_section(name) else {}
        self.used: set = set()

    def __contains__(self, key):
        return key in self.values

    def _raw(self, key, default):
        self.used.add(key)
        if key not in self.values:
            if default is _REQUIRED:
                raise ConfigError(f"{self.path}: {_where(self.name, key)} is required")
            return default
        return self.values[key].strip()

    def _fail(self, key, msg):
        raise ConfigError(f"{self.path}: {_where(self.name, key)}: {msg}")

    def str(self, key, default=None):
        return self._raw(key, default)

    def float(self, key, default=None):
        raw = self._raw(key, default)
        if raw is None or not isinstance(raw, str):
            return raw
        try:
            return float(raw)
        except ValueError:
            self._fail(key, f"expected a number, got {raw!r}")

    def int(self, key, default=None):
        raw = self._raw(key, default)
        if raw is None or not isinstance(raw, str):
            return raw
        try:
            return int(raw)
        except ValueError:
            self._fail(key, f"expected an integer, got {raw!r}")

    def bool(self, key, default=False):
        raw = self._raw(key, None)
        if raw is None:
            return default
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        self._fail(key, f"expected true/false, got {raw!r}")

    def list(self, key, default=None, sep=","):
        raw = self._raw(key, default)
        if raw is None or not isinstance(raw, str):
            return raw
        return [p.strip() for p in raw.split(sep) if p.strip()]

    def floats(self, key, default=None):
        if key not in self.values:
            return self.list(key, default)
        items = self.list(key)
        try:
            return [float(p) for p in items]
        except ValueError:
            self._fail(key, f"expected a comma-separated list of numbers, got {self.values[key]!r}")

    def ints(self, key, default=None):
        if key not in self.values:
            return self.list(key, default)
        vals = self.floats(key)
        if any(v != int(v) for v in vals):
            self._fail(key, "expected integers")
        return [int(v) for v in vals]

    def check_unknown(self):
        extra = sorted(set(self.values) - self.used)
        if extra:
            raise ConfigError(f"{self.path}: {_where(self.name)}: unknown key(s) {', '.join(extra)}")


_REQUIRED = object()


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh, source=str(path))
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parser


def parse_dist(text: str, where: str) -> Dist:
    parts = text.split()
    if not parts:
        raise ConfigError(f"{where}: empty distribution")
    try:
        return Dist(parts[0], tuple(float(p) for p in parts[1:]))
    except (ModelError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_transition(text: str, labels, where: str) -> tuple:
    if "->" not in text:
        raise ConfigError(f"{where}: transition {text!r} must look like A->B")
    a, b = (s.strip() for s in text.split("->", 1))
    for s in (a, b):
        if s not in labels:
            raise ConfigError(f"{where}: unknown state {s!r} in transition {text!r}")
    return labels.index(a), labels.index(b)


class KinkFactor:
    """Mark factor ``1 + slope * |x - x0|``: Lipschitz with a kink at ``x0``."""

    def __init__(self, slope: float, x0: float):
        self.slope, self.x0 = float(slope), float(x0)

    def __call__(self, x):
        return 1.0 + self.slope * np.abs(np.asarray(x, dtype=float) - self.x0)


def _baseline(sec: Section, tau0: float, tau: float):
    kind = sec.str("kind", _REQUIRED)
    if kind == "constant":
        haz = ConstantHazard(sec.float("rate", _REQUIRED))
    elif kind == "weibull":
        haz = WeibullHazard(sec.float("scale", 1.0), sec.float("shape", 1.0), sec.float("slope", 0.0))
    elif kind == "kink":
        slope, x0 = sec.float("slope", 1.0), sec.float("x0", tau / 2)
        haz = SeparableHazard(sec.float("scale", 1.0), sec.float("shape", 1.0), KinkFactor(slope, x0),
                              name=f"kink(slope={slope:g}, x0={x0:g})")
    elif kind == "piecewise":
        ub = sec.floats("u_breaks", _REQUIRED)
        xb = sec.floats("x_breaks", _REQUIRED)
        vals = sec.floats("values", _REQUIRED)
        if len(vals) != len(ub) * len(xb):
            sec._fail("values", f"need {len(ub) * len(xb)} values for the ({len(ub)} x {len(xb)}) grid")
        try:
            haz = PiecewiseConstantHazard(ub, xb, vals)
        except ModelError as exc:
            sec._fail("u_breaks", str(exc))
    else:
        sec._fail("kind", f"unknown baseline kind {kind!r} (constant, weibull, piecewise, kink)")
    bound = sec.float("bound", None)
    if bound is None:
        if kind == "piecewise":
            bound = float(np.max(haz.values))
        else:
            uu, xx = np.meshgrid(np.linspace(0, tau0, 401)[1:], np.linspace(0, tau, 401), indexing="ij")
            bound = float(np.max(haz(uu, xx))) * 1.000001
    imap = sec.ints("index_map", None)
    return haz, bound, None if imap is None else tuple(imap)


def model_spec(parser: configparser.ConfigParser, path: str = "<config>") -> ModelSpec:
    """Build and validate a :class:`ModelSpec` from a parsed config."""
    if not parser.has_section("model"):
        raise ConfigError(f"{path}: missing [model] section")
    m = Section(parser, "model", path)
    labels = m.list("states", _REQUIRED)
    if len(set(labels)) != len(labels):
        m._fail("states", "duplicate state labels")
    transitions = tuple(parse_transition(t, labels, f"{path}: [model] transitions")
                        for t in m.list("transitions", _REQUIRED))
    beta = np.array(m.floats("beta", _REQUIRED))
    tau0, tau = m.float("tau0", _REQUIRED), m.float("tau", _REQUIRED)
    init_raw = m.list("initial", [labels[0]])
    initial = {}
    for item in init_raw:
        lab, _, p = item.partition(":")
        if lab.strip() not in labels:
            m._fail("initial", f"unknown state {lab.strip()!r}")
        try:
            initial[labels.index(lab.strip())] = float(p) if p else 1.0
        except ValueError:
            m._fail("initial", f"bad probability in {item!r}")
    graph = StateGraph(tuple(labels), transitions, m.bool("progressive", False))
    sampler = m.str("sampler", "thinning")
    m.check_unknown()

    baselines, bounds, imaps = {}, {}, {}
    for h in transitions:
        name = f"baseline {labels[h[0]]}->{labels[h[1]]}"
        if not parser.has_section(name):
            raise ConfigError(f"{path}: missing [{name}] section")
        sec = Section(parser, name, path)
        haz, bound, imap = _baseline(sec, tau0, tau)
        sec.check_unknown()
        baselines[h], bounds[h] = haz, bound
        if imap is not None:
            imaps[h] = imap
    known = {f"baseline {labels[h[0]]}->{labels[h[1]]}" for h in transitions}
    for s in parser.sections():
        if s.startswith("baseline") and s not in known:
            raise ConfigError(f"{path}: [{s}] does not name a configured transition")

    c = Section(parser, "covariates", path)
    z = tuple(parse_dist(p, f"{path}: [covariates] z") for p in c.list("z", [], sep=";"))
    x_raw = c.str("x", "uniform")
    x_dist = None if x_raw == "uniform" else parse_dist(x_raw, f"{path}: [covariates] x")
    loading = tuple(c.floats("x_loading", []))
    c.check_unknown()
    cens = Section(parser, "censoring", path)
    ckind = cens.str("kind", "none")
    cdist = cens.str("dist", None)
    censoring = CensoringLaw(ckind, None if cdist is None else parse_dist(cdist, f"{path}: [censoring] dist"))
    cens.check_unknown()
    spec = ModelSpec(graph=graph, beta=beta, baselines=baselines, bounds=bounds,
                     covariates=CovariateLaw(z, x_dist, {}, loading), tau0=tau0, tau=tau, censoring=censoring,
                     initial=initial, index_maps=imaps, sampler=sampler)
    try:
        validate(spec)
    except ModelError as exc:
        raise ConfigError(f"{path}: invalid model: {exc}") from None
    return spec


def describe_model(spec: ModelSpec) -> str:
    """Human-readable echo of a resolved model."""
    g = spec.graph
    lines = [f"states: {', '.join(g.states)}",
             f"transitions: {', '.join(g.label(h) for h in g.transitions)}",
             f"beta: {', '.join(repr(float(b)) for b in spec.beta)}",
             f"tau0: {spec.tau0!r}  tau: {spec.tau!r}",
             f"initial: {', '.join(f'{g.states[s]}:{p!r}' for s, p in spec.initial.items())}"]
    for h in g.transitions:
        b = spec.baselines[h]
        desc = getattr(b, "name", None) or type(b).__name__
        if isinstance(b, WeibullHazard):
            desc = f"weibull(scale={b.scale!r}, shape={b.shape!r}, slope={b.slope!r})"
        elif isinstance(b, ConstantHazard):
            desc = f"constant(rate={b.rate!r})"
        lines.append(f"baseline {g.label(h)}: {desc}, bound {spec.bounds[h]!r}, index map {spec.index_map(h)}")
    cov = spec.covariates
    lines.append(f"covariates: z = {'; '.join(map(str, cov.z)) or 'none'}, "
                 f"x = {cov.x_dist or 'uniform(0, tau)'}, x_loading = {cov.x_loading}")
    lines.append(f"censoring: {spec.censoring.kind}" + (f" {spec.censoring.dist}" if spec.censoring.dist else ""))
    return "\n".join(lines) + "\n"


def experiment_spec(parser: configparser.ConfigParser, path: str = "<config>", seed: int | None = None,
                    n_jobs: int | None = None):
    """Build an :class:`~modrenew.mc.ExperimentSpec` from a parsed config.

    ``[experiment]`` keys: ``name``, ``n_grid``, ``replicates``,
    ``estimators``, ``bandwidth_grid`` (``default`` or numbers),
    ``bandwidth_c`` (``pl:2, m:1``), ``mu``, ``targets``, ``master_seed``,
    ``tau0``, ``level``, ``hazard_points`` (``v:x`` pairs separated by ``;``,
    optionally prefixed ``A->B@``), ``hazard_estimator``, ``sampler``,
    ``n_jobs``.
    """
    from .mc import ExperimentSpec

    model = model_spec(parser, path)
    labels = list(model.graph.states)
    e = Section(parser, "experiment", path)
    if not parser.has_section("experiment"):
        raise ConfigError(f"{path}: missing [experiment] section")
    bw = []
    for item in e.list("bandwidth_grid", ["default"]):
        if item == "default":
            bw.append(None)
        else:
            try:
                bw.append(float(item))
            except ValueError:
                e._fail("bandwidth_grid", f"expected 'default' or a number, got {item!r}")
    bc = {}
    for item in e.list("bandwidth_c", []):
        k, _, v = item.partition(":")
        try:
            bc[k.strip()] = float(v)
        except ValueError:
            e._fail("bandwidth_c", f"expected kind:constant pairs, got {item!r}")
    points = []
    for item in e.list("hazard_points", [], sep=";"):
        h = None
        if "@" in item:
            t, item = item.split("@", 1)
            h = parse_transition(t.strip(), labels, f"{path}: [experiment] hazard_points")
        try:
            v, x = (float(s) for s in item.split(":"))
        except ValueError:
            e._fail("hazard_points", f"expected v:x, got {item!r}")
        points.append((v, x) if h is None else (h, v, x))
    kwargs = dict(
        model=model, n_grid=e.ints("n_grid", _REQUIRED), replicates=e.int("replicates", _REQUIRED),
        estimators=tuple(e.list("estimators", ["pl", "m"])), bandwidth_grid=tuple(bw), bandwidth_c=bc,
        mu=e.int("mu", 2), targets=tuple(e.list("targets", ["coverage"])),
        master_seed=e.int("master_seed", 0) if seed is None else seed, tau0=e.float("tau0", None),
        level=e.float("level", 0.95), hazard_points=tuple(points), hazard_estimator=e.str("hazard_estimator", "pl"),
        sampler=e.str("sampler", "cohort"), n_jobs=e.int("n_jobs", 1) if n_jobs is None else n_jobs,
        name=e.str("name", Path(path).stem),
    )
    e.check_unknown()

    s = Section(parser, "sweep", path)
    sweep = {}
    if parser.has_section("sweep"):
        sweep = dict(bandwidths=s.floats("bandwidths", _REQUIRED), n=s.int("n", _REQUIRED),
                     replicates=s.int("replicates", _REQUIRED), grid_v=s.floats("grid_v", _REQUIRED),
                     grid_x=s.floats("grid_x", _REQUIRED), max_rel_se=s.float("max_rel_se", 0.2))
        if "transition" in s:
            sweep["h"] = parse_transition(s.str("transition"), labels, f"{path}: [sweep] transition")
        if "sampler" in s:
            sweep["sampler"] = s.str("sampler")
        s.check_unknown()
    lem = Section(parser, "lemma21", path)
    lemma = {}
    if parser.has_section("lemma21"):
        for key in ("n", "min_epochs"):
            if key in lem:
                lemma[key] = lem.int(key)
        for key in ("phi_breaks", "phi_values"):
            if key in lem:
                lemma[key] = lem.floats(key)
        if "mark_weight" in lem:
            lemma["mark_weight"] = lem.bool("mark_weight")
        lem.check_unknown()
    c = Section(parser, "checks", path)
    checks = {}
    pairs = ("coverage_band", "shrink_n", "bias_slope_band")
    scalars = ("shrink_factor", "naive_se_multiple", "naive_ratio", "hazard_sd_tolerance", "lemma21_z")
    ints = ("coverage_n", "naive_n")
    for key in pairs:
        if key in c:
            vals = c.floats(key)
            if len(vals) != 2:
                c._fail(key, "expected two numbers")
            checks[key] = tuple(int(v) for v in vals) if key == "shrink_n" else tuple(vals)
    for key in scalars:
        if key in c:
            checks[key] = c.float(key)
    for key in ints:
        if key in c:
            checks[key] = c.int(key)
    if "naive_reference" in c:
        checks["naive_reference"] = c.str("naive_reference")
    c.check_unknown()
    try:
        return ExperimentSpec(**kwargs, checks=checks, sweep=sweep, lemma21=lemma)
    except ValueError as exc:
        raise ConfigError(f"{path}: [experiment]: {exc}") from None
