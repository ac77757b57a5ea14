"""Modulated renewal process models and a censored-history simulator.

A subject entering state ``i`` at calendar time ``T_m`` draws epoch
covariates ``(z, x)``; the hazard of an ``i -> j`` jump ``u`` time units later
is ``exp(beta' Z_ij) * alpha_ij(u, x)``.  Sojourns are sampled by thinning
against a per-transition rate bound on ``[0, tau0]``; the rare tails beyond
``tau0`` are sampled by inverting the closed-form cumulative hazard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import brentq

MAX_EPOCHS = 10**6
THINNING_BLOCK = 16

Transition = tuple  # (from_state, to_state) as state indices


class ModelError(ValueError):
    """Raised for invalid model specifications."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SimulationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# state graphs


@dataclass(frozen=True)
class StateGraph:
    """States and allowed one-step transitions.

    Self-transitions ``(i, i)`` are renewals of the same state and are allowed;
    a graph flagged ``progressive`` must be acyclic (so has no renewals).
    """

    states: tuple
    transitions: tuple
    progressive: bool = False

    @property
    def absorbing(self) -> tuple:
        origins = {i for i, _ in self.transitions}
        return tuple(s for s in range(len(self.states)) if s not in origins)

    def outgoing(self, state: int) -> tuple:
        return tuple(h for h in self.transitions if h[0] == state)

    def index(self, label) -> int:
        return self.states.index(str(label))

    def label(self, h) -> str:
        return f"{self.states[h[0]]}->{self.states[h[1]]}"

    def violations(self) -> list:
        out = []
        k = len(self.states)
        if k == 0:
            out.append("no states")
        if len(set(self.states)) != k:
            out.append("duplicate state labels")
        if not self.transitions:
            out.append("no transitions")
        for h in self.transitions:
            if not (0 <= h[0] < k and 0 <= h[1] < k):
                out.append(f"transition {h} has an endpoint outside the state set")
        if len(set(self.transitions)) != len(self.transitions):
            out.append("duplicate transitions")
        if self.progressive and not out and _has_cycle(k, self.transitions):
            out.append("progressive graph contains a directed cycle")
        return out


def _has_cycle(k, transitions):
    adj = {s: [j for i, j in transitions if i == s] for s in range(k)}
    colour = [0] * k

    def visit(s):
        colour[s] = 1
        for t in adj[s]:
            if colour[t] == 1 or (colour[t] == 0 and visit(t)):
                return True
        colour[s] = 2
        return False

    return any(colour[s] == 0 and visit(s) for s in range(k))


def renewal_graph(label: str = "0") -> StateGraph:
    return StateGraph((label,), ((0, 0),))


def illness_death_graph(reversible: bool = False) -> StateGraph:
    """Healthy (0) -> ill (1) / dead (2), ill -> dead; optionally ill -> healthy."""
    trans = ((0, 1), (0, 2), (1, 2))
    if reversible:
        trans = trans + ((1, 0),)
    return StateGraph(("0", "1", "2"), trans, progressive=not reversible)


# ---------------------------------------------------------------------------
# baseline hazards alpha(u, x)


class ConstantHazard:
    kind = "constant"

    def __init__(self, rate: float):
        self.rate = float(rate)

    def __call__(self, u, x):
        shape = np.broadcast(u, x).shape
        return np.full(shape, self.rate) if shape else self.rate

    def cumulative(self, v, x):
        return self.rate * np.asarray(v, dtype=float) + 0.0 * np.asarray(x, dtype=float)

    def inverse_cumulative(self, e, x):
        e = np.asarray(e, dtype=float) + 0.0 * np.asarray(x, dtype=float)
        return e / self.rate if self.rate > 0 else np.full(e.shape, np.inf)


class WeibullHazard:
    """``alpha(u, x) = scale * shape * u**(shape - 1) * exp(slope * x)``."""

    kind = "weibull"

    def __init__(self, scale: float, shape: float, slope: float = 0.0):
        self.scale, self.shape, self.slope = float(scale), float(shape), float(slope)

    def __call__(self, u, x):
        return self.scale * self.shape * np.power(u, self.shape - 1.0) * np.exp(self.slope * np.asarray(x))

    def cumulative(self, v, x):
        return self.scale * np.power(v, self.shape) * np.exp(self.slope * np.asarray(x))

    def inverse_cumulative(self, e, x):
        return np.power(np.asarray(e) / (self.scale * np.exp(self.slope * np.asarray(x))), 1.0 / self.shape)


class SeparableHazard:
    """``alpha(u, x) = scale * shape * u**(shape - 1) * g(x)`` for a mark profile ``g >= 0``.

    ``g`` is any vectorised function; the cumulative hazard and its inverse
    are closed form.
    """

    kind = "separable"

    def __init__(self, scale: float, shape: float, g: Callable, name: str = "separable"):
        self.scale, self.shape, self.g, self.name = float(scale), float(shape), g, name

    def __call__(self, u, x):
        return self.scale * self.shape * np.power(u, self.shape - 1.0) * self.g(np.asarray(x, dtype=float))

    def cumulative(self, v, x):
        return self.scale * np.power(v, self.shape) * self.g(np.asarray(x, dtype=float))

    def inverse_cumulative(self, e, x):
        with np.errstate(divide="ignore"):
            return np.power(np.asarray(e) / (self.scale * self.g(np.asarray(x, dtype=float))), 1.0 / self.shape)


class PiecewiseConstantHazard:
    """Rates constant on the cells of a ``(u, x)`` grid.

    ``u_breaks`` and ``x_breaks`` start at 0; the last cell in each direction
    extends to infinity. ``values`` has shape ``(len(u_breaks), len(x_breaks))``.
    """

    kind = "piecewise"

    def __init__(self, u_breaks: Sequence[float], x_breaks: Sequence[float], values):
        self.u_breaks = np.asarray(u_breaks, dtype=float)
        self.x_breaks = np.asarray(x_breaks, dtype=float)
        self.values = np.asarray(values, dtype=float).reshape(len(self.u_breaks), len(self.x_breaks))
        if self.u_breaks[0] != 0 or self.x_breaks[0] != 0:
            raise ModelError("piecewise hazard breaks must start at 0")
        if np.any(np.diff(self.u_breaks) <= 0) or np.any(np.diff(self.x_breaks) <= 0):
            raise ModelError("piecewise hazard breaks must be strictly increasing")

    def _column(self, x):
        return np.clip(np.searchsorted(self.x_breaks, x, side="right") - 1, 0, len(self.x_breaks) - 1)

    def __call__(self, u, x):
        iu = np.clip(np.searchsorted(self.u_breaks, u, side="right") - 1, 0, len(self.u_breaks) - 1)
        out = self.values[iu, self._column(x)]
        return float(out) if np.ndim(out) == 0 else out

    def cumulative(self, v, x):
        v = np.asarray(v, dtype=float)
        col = self.values[:, self._column(x)]
        widths = np.diff(self.u_breaks)
        if col.ndim == 1:
            knots = np.concatenate([[0.0], np.cumsum(col[:-1] * widths)])
            iu = np.clip(np.searchsorted(self.u_breaks, v, side="right") - 1, 0, len(self.u_breaks) - 1)
            return knots[iu] + col[iu] * (v - self.u_breaks[iu])
        v, col_x = np.broadcast_arrays(v, self._column(x))
        out = np.empty(v.shape)
        for idx in np.ndindex(v.shape):
            out[idx] = self.__class__(self.u_breaks, [0.0], self.values[:, col_x[idx]]).cumulative(v[idx], 0.0)
        return out


class FunctionHazard:
    """Arbitrary vectorised ``rate(u, x)`` with optional closed-form cumulative."""

    kind = "function"

    def __init__(self, rate: Callable, cumulative: Callable | None = None, name: str = "custom"):
        self._rate = rate
        self._cumulative = cumulative
        self.name = name

    def __call__(self, u, x):
        return self._rate(u, x)

    def cumulative(self, v, x):
        if self._cumulative is not None:
            return self._cumulative(v, x)
        from scipy.integrate import quad

        v, x = np.broadcast_arrays(np.asarray(v, dtype=float), np.asarray(x, dtype=float))
        out = np.array([quad(lambda s: float(self._rate(s, xx)), 0.0, vv, limit=200)[0] for vv, xx in zip(v.ravel(), x.ravel())])
        return out.reshape(v.shape) if v.ndim else float(out[0])


# ---------------------------------------------------------------------------
# covariate, censoring and initial-state laws


@dataclass(frozen=True)
class Dist:
    """Small scalar distribution: normal, bernoulli, uniform, exponential, fixed, beta."""

    kind: str
    params: tuple = ()

    _ARITY = {"normal": 2, "bernoulli": 1, "uniform": 2, "exponential": 1, "fixed": 1, "beta": 2}

    def __post_init__(self):
        if self.kind not in self._ARITY:
            raise ModelError(f"unknown distribution kind {self.kind!r}")
        if len(self.params) != self._ARITY[self.kind]:
            raise ModelError(f"{self.kind} takes {self._ARITY[self.kind]} parameters, got {len(self.params)}")

    def draw(self, rng: np.random.Generator) -> float:
        k, p = self.kind, self.params
        if k == "normal":
            return rng.normal(p[0], p[1])
        if k == "bernoulli":
            return float(rng.random() < p[0])
        if k == "uniform":
            return rng.uniform(p[0], p[1])
        if k == "exponential":
            return rng.exponential(1.0 / p[0])
        if k == "beta":
            return rng.beta(p[0], p[1])
        return float(p[0])

    def draw_many(self, rng: np.random.Generator, size: int) -> np.ndarray:
        k, p = self.kind, self.params
        if k == "normal":
            return rng.normal(p[0], p[1], size)
        if k == "bernoulli":
            return (rng.random(size) < p[0]).astype(float)
        if k == "uniform":
            return rng.uniform(p[0], p[1], size)
        if k == "exponential":
            return rng.exponential(1.0 / p[0], size)
        if k == "beta":
            return rng.beta(p[0], p[1], size)
        return np.full(size, float(p[0]))

    def __str__(self):
        return f"{self.kind}({', '.join(repr(float(v)) for v in self.params)})"


@dataclass(frozen=True)
class CovariateLaw:
    """Per-epoch covariates: independent ``z`` components and a mark ``x``.

    ``x`` is ``Uniform(0, tau)`` unless ``x_dist`` is given; a ``beta`` law is
    rescaled to ``[0, tau]``. ``by_state`` optionally overrides the ``z``
    components for epochs that start in a given state. ``x_loading[c]`` adds
    ``x_loading[c] * x`` to component ``c``, making ``z`` and ``x`` dependent.
    """

    z: tuple = ()
    x_dist: Dist | None = None
    by_state: Mapping = field(default_factory=dict)
    x_loading: tuple = ()

    @property
    def dim(self) -> int:
        return len(self.z)

    def sample(self, state: int, tau: float, rng: np.random.Generator):
        comps = self.by_state.get(state, self.z)
        z = np.array([d.draw(rng) for d in comps], dtype=float)
        if self.x_dist is None:
            x = rng.uniform(0.0, tau)
        elif self.x_dist.kind == "beta":
            x = tau * self.x_dist.draw(rng)
        else:
            x = self.x_dist.draw(rng)
        if self.x_loading:
            z = z + np.asarray(self.x_loading[: len(z)], dtype=float) * x
        return z, float(x)

    def sample_many(self, state: int, tau: float, rng: np.random.Generator, size: int):
        """Vectorised version of :meth:`sample` (a different random stream)."""
        comps = self.by_state.get(state, self.z)
        z = np.column_stack([d.draw_many(rng, size) for d in comps]) if comps else np.zeros((size, 0))
        if self.x_dist is None:
            x = rng.uniform(0.0, tau, size)
        elif self.x_dist.kind == "beta":
            x = tau * self.x_dist.draw_many(rng, size)
        else:
            x = self.x_dist.draw_many(rng, size)
        if self.x_loading:
            z = z + np.asarray(self.x_loading[: z.shape[1]], dtype=float) * x[:, None]
        return z, x


@dataclass(frozen=True)
class CensoringLaw:
    """``horizon``: one calendar censoring time per subject; ``epoch``: a fresh
    censoring margin measured from each entry time; ``none``: no censoring.
    Censoring is always monotone (follow-up stops at the first censoring)."""

    kind: str = "none"
    dist: Dist | None = None
    monotone: bool = True


@dataclass(frozen=True)
class ModelSpec:
    graph: StateGraph
    beta: np.ndarray
    baselines: Mapping
    bounds: Mapping
    covariates: CovariateLaw
    tau0: float
    tau: float
    censoring: CensoringLaw = CensoringLaw()
    initial: Mapping = field(default_factory=lambda: {0: 1.0})
    index_maps: Mapping = field(default_factory=dict)
    sampler: str = "thinning"

    @property
    def d(self) -> int:
        return len(self.beta)

    def index_map(self, h) -> tuple:
        m = self.index_maps.get(h)
        return tuple(range(self.covariates.dim)) if m is None else tuple(m)

    def linear_predictor(self, h, z) -> float:
        b = self.beta
        return sum(b[j] * z[c] for c, j in enumerate(self.index_map(h)) if j >= 0)

    def design(self, h, z) -> np.ndarray:
        return embed(z, self.index_map(h), self.d)


def embed(z, index_map, d):
    """Place raw covariate columns into a length-``d`` coefficient-aligned vector."""
    z = np.asarray(z, dtype=float)
    out = np.zeros(z.shape[:-1] + (d,))
    for c, j in enumerate(index_map):
        if j >= 0:
            out[..., j] = z[..., c]
    return out


def validate(spec: ModelSpec, grid_size: int = 101) -> None:
    """Raise :class:`ModelError` listing every violated model invariant."""
    g = spec.graph
    out = list(g.violations())
    if out:
        raise ModelError(out)
    if not (spec.tau > 0 and spec.tau0 > 0):
        out.append("tau and tau0 must be positive")
    beta = np.asarray(spec.beta, dtype=float)
    if beta.ndim != 1 or beta.size == 0:
        out.append("beta must be a non-empty vector")
    p = spec.covariates.dim
    for state, comps in spec.covariates.by_state.items():
        if len(comps) != p:
            out.append(f"covariates for state {state} have dimension {len(comps)} != {p}")
    us = np.linspace(0.0, spec.tau0, grid_size)[1:]
    xs = np.linspace(0.0, spec.tau, grid_size)
    uu, xx = np.meshgrid(us, xs, indexing="ij")
    for h in g.transitions:
        name = g.label(h)
        if h not in spec.baselines:
            out.append(f"transition {name}: no baseline hazard")
            continue
        if h not in spec.bounds or not np.isfinite(spec.bounds[h]) or spec.bounds[h] < 0:
            out.append(f"transition {name}: missing or invalid hazard bound")
            continue
        vals = np.asarray(spec.baselines[h](uu, xx), dtype=float)
        if np.any(~np.isfinite(vals)) or np.any(vals < 0):
            out.append(f"transition {name}: baseline hazard negative or not finite on the grid")
            continue
        worst = np.unravel_index(np.argmax(vals), vals.shape)
        if vals[worst] > spec.bounds[h] * (1 + 1e-12):
            out.append(
                f"transition {name}: hazard {vals[worst]:.6g} at (u={uu[worst]:.4g}, x={xx[worst]:.4g}) "
                f"exceeds bound {spec.bounds[h]:.6g}"
            )
        imap = spec.index_map(h)
        if len(imap) != p:
            out.append(f"transition {name}: index map length {len(imap)} != covariate dimension {p}")
        used = [j for j in imap if j >= 0]
        if len(set(used)) != len(used) or any(j >= beta.size for j in used):
            out.append(f"transition {name}: index map must be injective into 0..{beta.size - 1}")
    if spec.index_maps or p == beta.size:
        used_all = {j for h in g.transitions for j in spec.index_map(h) if j >= 0}
        missing = sorted(set(range(beta.size)) - used_all)
        if missing:
            out.append(f"beta components {missing} are not used by any transition")
    else:
        out.append(f"covariate dimension {p} != len(beta) {beta.size} and no index maps given")
    if spec.censoring.kind not in ("none", "horizon", "epoch"):
        out.append(f"unknown censoring kind {spec.censoring.kind!r}")
    elif spec.censoring.kind != "none" and spec.censoring.dist is None:
        out.append("censoring law needs a distribution")
    if not spec.censoring.monotone:
        out.append("only monotone censoring is supported")
    probs = np.array(list(spec.initial.values()), dtype=float)
    if probs.size == 0 or np.any(probs < 0) or abs(probs.sum() - 1) > 1e-9:
        out.append("initial state probabilities must be non-negative and sum to 1")
    if any(s not in range(len(g.states)) for s in spec.initial):
        out.append("initial law refers to an unknown state")
    if spec.sampler not in ("thinning", "inversion"):
        out.append(f"unknown sampler {spec.sampler!r}")
    if spec.sampler == "inversion" and not all(isinstance(b, PiecewiseConstantHazard) for b in spec.baselines.values()):
        out.append("exact inversion requires piecewise-constant baselines")
    if out:
        raise ModelError(out)


# ---------------------------------------------------------------------------
# histories


@dataclass(frozen=True)
class Epoch:
    time: float
    state: int
    z: np.ndarray | None
    x: float


@dataclass(frozen=True)
class SubjectHistory:
    """Observed epochs plus the terminal outcome.

    ``outcome`` is ``"absorbed"`` (the last epoch entered an absorbing state at
    ``end_time``) or ``"censored"`` (follow-up stopped at ``end_time`` while in
    the state of the last epoch).
    """

    epochs: tuple
    outcome: str
    end_time: float

    def __eq__(self, other):
        if not isinstance(other, SubjectHistory):
            return NotImplemented
        if (self.outcome, self.end_time, len(self.epochs)) != (other.outcome, other.end_time, len(other.epochs)):
            return False
        for a, b in zip(self.epochs, other.epochs):
            if (a.time, a.state) != (b.time, b.state):
                return False
            if (a.z is None) != (b.z is None) or (a.z is not None and not np.array_equal(a.z, b.z)):
                return False
            if not (a.x == b.x or (math.isnan(a.x) and math.isnan(b.x))):
                return False
        return True


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _total_and_parts(spec, outgoing, etas, u, x):
    parts = [eta * float(spec.baselines[h](u, x)) for h, eta in zip(outgoing, etas)]
    return sum(parts), parts


def _total_hazard(spec, outgoing, etas, u, x):
    xs = np.full(len(u), x)
    return sum(eta * np.asarray(spec.baselines[h](u, xs), dtype=float) for h, eta in zip(outgoing, etas))


def _invert_tail(spec, outgoing, etas, x, start, rng):
    """Sample the first jump after ``start`` by inverting the cumulative hazard."""

    def cum(u):
        return sum(eta * float(spec.baselines[h].cumulative(u, x)) for h, eta in zip(outgoing, etas))

    target = cum(start) + rng.exponential()
    hi = max(start, 1e-12) * 2.0
    while cum(hi) < target:
        hi *= 2.0
        if hi > 1e300:
            return math.inf
    return brentq(lambda u: cum(u) - target, start, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)


def _invert_piecewise(spec, outgoing, etas, x, rng):
    """Exact inversion of a cumulative hazard that is piecewise linear in ``u``."""
    breaks = np.unique(np.concatenate([spec.baselines[h].u_breaks for h in outgoing]))
    rates = np.zeros(len(breaks))
    for h, eta in zip(outgoing, etas):
        rates += eta * np.asarray(spec.baselines[h](breaks, np.full(len(breaks), x)))
    knots = np.concatenate([[0.0], np.cumsum(rates[:-1] * np.diff(breaks))])
    e = rng.exponential()
    k = int(np.searchsorted(knots, e, side="right")) - 1
    if rates[k] == 0.0:
        return math.inf
    return float(breaks[k] + (e - knots[k]) / rates[k])


def _sample_sojourn(spec, outgoing, etas, x, limit, rng):
    """Return the sampled jump time ``u`` (``inf`` if none before ``limit``).

    Thinning proposals are drawn in blocks of ``THINNING_BLOCK`` and the
    hazard is evaluated once per block; the first accepted proposal is the
    jump time, and proposals after it are discarded.
    """
    if spec.sampler == "inversion":
        return _invert_piecewise(spec, outgoing, etas, x, rng)
    bound = sum(eta * spec.bounds[h] for h, eta in zip(outgoing, etas))
    u = 0.0
    if bound > 0.0:
        while True:
            cand = u + np.cumsum(rng.exponential(1.0 / bound, THINNING_BLOCK))
            accept = rng.random(THINNING_BLOCK) * bound
            stop = (cand > spec.tau0) | (cand > limit)
            m = int(np.argmax(stop)) if stop.any() else THINNING_BLOCK
            lam = _total_hazard(spec, outgoing, etas, cand[:m], x)
            if np.any(lam > bound * (1 + 1e-12)):
                k = int(np.argmax(lam > bound * (1 + 1e-12)))
                raise SimulationError(f"hazard {lam[k]} exceeds thinning bound {bound} at u={cand[k]}")
            hit = np.flatnonzero(accept[:m] <= lam)
            if hit.size:
                return float(cand[hit[0]])
            if m < THINNING_BLOCK:
                if cand[m] > spec.tau0:
                    break
                return math.inf
            u = float(cand[-1])
    if limit <= spec.tau0:
        return math.inf
    return _invert_tail(spec, outgoing, etas, x, spec.tau0, rng)


def simulate_subject(spec: ModelSpec, rng_seed) -> SubjectHistory:
    """Simulate one censored history; deterministic given ``rng_seed``."""
    rng = _rng(rng_seed)
    g = spec.graph
    states = list(spec.initial)
    probs = np.array([spec.initial[s] for s in states], dtype=float)
    state = states[int(rng.choice(len(states), p=probs))] if len(states) > 1 else states[0]
    cens = spec.censoring
    horizon = cens.dist.draw(rng) if cens.kind == "horizon" else math.inf
    absorbing = set(g.absorbing)
    t = 0.0
    epochs = []
    while True:
        if len(epochs) >= MAX_EPOCHS:
            raise SimulationError(f"history exceeded {MAX_EPOCHS} epochs; the model does not terminate")
        if state in absorbing:
            epochs.append(Epoch(t, state, None, math.nan))
            return SubjectHistory(tuple(epochs), "absorbed", t)
        z, x = spec.covariates.sample(state, spec.tau, rng)
        epochs.append(Epoch(t, state, z, x))
        if cens.kind == "epoch":
            limit = max(cens.dist.draw(rng), 0.0)
        else:
            limit = horizon - t
        outgoing = g.outgoing(state)
        etas = [math.exp(spec.linear_predictor(h, z)) for h in outgoing]
        u = _sample_sojourn(spec, outgoing, etas, x, limit, rng)
        if u >= limit or not math.isfinite(u):
            if not math.isfinite(limit):
                raise SimulationError("sojourn never ends and there is no censoring; the model does not terminate")
            return SubjectHistory(tuple(epochs), "censored", t + limit)
        _, parts = _total_and_parts(spec, outgoing, etas, u, x)
        total = sum(parts)
        k = int(np.searchsorted(np.cumsum(parts), rng.random() * total, side="right"))
        nxt = outgoing[min(k, len(outgoing) - 1)][1]
        t_new = t + u
        if not t_new > t:
            raise SimulationError("event times stopped increasing (floating-point underflow)")
        t, state = t_new, nxt


def subject_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Seed of subject ``index``; depends only on ``(master_seed, index)``."""
    return np.random.SeedSequence(master_seed, spawn_key=(index,))


def _simulate_chunk(args):
    spec, master_seed, lo, hi = args
    return [simulate_subject(spec, subject_seed(master_seed, i)) for i in range(lo, hi)]


def simulate_cohort(spec: ModelSpec, n: int, master_seed: int, n_jobs: int = 1) -> list:
    """Simulate ``n`` independent subjects.

    Subject ``i`` always uses :func:`subject_seed` ``(master_seed, i)``, so
    the cohort is the same for any ``n_jobs``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if n_jobs == 1:
        return _simulate_chunk((spec, master_seed, 0, n))
    from concurrent.futures import ProcessPoolExecutor

    bounds = np.linspace(0, n, n_jobs + 1).astype(int)
    chunks = [(spec, master_seed, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        parts = list(pool.map(_simulate_chunk, chunks))
    return [h for part in parts for h in part]


def simulate_spells(spec: ModelSpec, n: int, seed) -> dict:
    """Vectorised sampler for models where every subject has a single spell.

    Requires one initial state whose transitions all lead to absorbing states
    and baselines with an ``inverse_cumulative`` method. Competing
    destinations are sampled as independent latent times, which is
    equivalent to the sequential sampler in law but not draw-for-draw.

    Returns columns ``gap``, ``to_state`` (``-1`` when censored), ``x``, ``z``.
    """
    g = spec.graph
    if len(spec.initial) != 1:
        raise ModelError(["simulate_spells needs a single initial state"])
    state = next(iter(spec.initial))
    outgoing = g.outgoing(state)
    if not outgoing or any(h[1] not in g.absorbing for h in outgoing):
        raise ModelError(["simulate_spells needs every transition to end in an absorbing state"])
    for h in outgoing:
        if not hasattr(spec.baselines[h], "inverse_cumulative"):
            raise ModelError([f"baseline of {h} has no closed-form inverse cumulative hazard"])
    rng = _rng(seed)
    z, x = spec.covariates.sample_many(state, spec.tau, rng, n)
    times = np.empty((n, len(outgoing)))
    for k, h in enumerate(outgoing):
        eta = np.exp(spec.design(h, z) @ spec.beta)
        with np.errstate(divide="ignore", over="ignore"):
            times[:, k] = spec.baselines[h].inverse_cumulative(rng.exponential(size=n) / eta, x)
    first = np.argmin(times, axis=1)
    t = times[np.arange(n), first]
    cens = spec.censoring
    if cens.kind in ("horizon", "epoch"):
        c = np.maximum(cens.dist.draw_many(rng, n), 0.0)
    else:
        c = np.full(n, np.inf)
    event = t <= c
    if np.any(~event & ~np.isfinite(c)):
        raise SimulationError("a spell never ends and there is no censoring")
    to_state = np.where(event, np.array([h[1] for h in outgoing])[first], -1)
    return {"gap": np.where(event, t, c), "to_state": to_state, "x": x, "z": z, "from_state": state}
