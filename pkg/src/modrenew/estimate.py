"""Kernel-smoothed score equations and the conditional Aalen-Nelson estimator.

Everything here works on the duration scale.  For a transition ``h = (i, j)``
the leave-one-out risk sums at gap ``u``, coefficient ``beta`` and mark ``x``
are

    S_k(-s) = [(n - 1) a]^-1  sum_{records r not of subject s, from state i, gap_r >= u}
              Z_r^{(x)k} exp(beta' Z_r) K_n(x, X_r)

and both estimators evaluate them at the gap and mark of each observed
``i -> j`` event.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import sparse

from .duration import CENSORED, DurationDataset
from .kernels import KernelSpec, kernel_weights, region_l2
from .model import embed

log = logging.getLogger(__name__)

M_ESTIMATOR = "m"
PARTIAL_LIKELIHOOD = "pl"
NAIVE_COX = "naive"
KINDS = (M_ESTIMATOR, PARTIAL_LIKELIHOOD, NAIVE_COX)

EPS_RISK = 1e-10
# An event is also skipped when its leave-one-out risk sum is below this
# fraction of the same sum taken with absolute kernel weights.  Negative
# boundary-kernel lobes can otherwise drive the risk sum through zero as beta
# moves, which puts a pole in the partial-likelihood score; with the check
# every retained ratio S1/S0 is bounded by max|Z| / REL_RISK.
REL_RISK = 0.5
MAX_SKIP_FRACTION = 0.5
MAX_HALVINGS = 20
MAX_SET_ROUNDS = 10
# leave-one-out sums whose removed own part exceeds this multiple of the
# result are recomputed without subtraction
OWN_SHARE = 10.0


class EstimationError(RuntimeError):
    pass


class NoContrastError(EstimationError):
    def __init__(self, msg="no covariate contrast: information matrix is singular"):
        super().__init__(msg)


class ConvergenceError(EstimationError):
    def __init__(self, msg, trace=()):
        super().__init__(msg)
        self.trace = list(trace)


class BandwidthError(EstimationError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TransitionTerm:
    """One transition in a fit: its kernel and covariate-to-coefficient map.

    ``index_map[c]`` is the coefficient index fed by data column ``c`` (or
    ``-1`` when the column is unused for this transition); ``None`` is the
    identity map.
    """

    h: tuple
    kernel: KernelSpec
    index_map: tuple | None = None


def default_tau(data: DurationDataset) -> float:
    """Mark-domain endpoint inferred from data: just above the largest mark."""
    top = float(np.max(data.x))
    return top + max(abs(top), 1.0) * 1e-6


def default_bandwidth(data: DurationDataset, h, kind: str, c: float = 1.0, tau: float | None = None) -> float:
    """``c * sd(X) * n_h^(-1/3)`` (partial likelihood) or ``n_h^(-2/3)`` (M-estimator).

    ``sd`` and ``n_h`` are taken over the records and subjects at risk for ``h``.
    """
    at_risk = data.from_state == h[0]
    if not np.any(at_risk):
        raise EstimationError(f"no records at risk for transition {h}")
    sd = float(np.std(data.x[at_risk], ddof=1)) if at_risk.sum() > 1 else 0.0
    n_h = len(np.unique(data.subject[at_risk]))
    rate = -2.0 / 3.0 if kind == M_ESTIMATOR else -1.0 / 3.0
    a = c * sd * n_h**rate
    tau = default_tau(data) if tau is None else tau
    if not a > 0:
        raise BandwidthError(f"degenerate mark spread for transition {h}")
    return min(a, 0.49 * tau)


def make_terms(data: DurationDataset, kind: str = PARTIAL_LIKELIHOOD, spec=None, *, transitions=None,
               index_maps: Mapping | None = None, mu: int = 2, c: float = 1.0,
               tau: float | None = None, bandwidths: Mapping | None = None) -> list:
    """Resolve per-transition kernels.

    ``spec`` may be a :class:`KernelSpec` shared by every transition, a
    mapping ``h -> KernelSpec``, or ``None`` for the default bandwidth rule.
    """
    if transitions is None:
        transitions = data.transitions
    index_maps = index_maps or {}
    bandwidths = bandwidths or {}
    tau = default_tau(data) if tau is None else tau
    terms = []
    for h in transitions:
        h = tuple(h)
        if isinstance(spec, KernelSpec):
            k = spec
        elif isinstance(spec, Mapping) and h in spec:
            k = spec[h]
        else:
            a = bandwidths.get(h) or default_bandwidth(data, h, kind, c, tau)
            k = KernelSpec(mu, a, tau)
        imap = index_maps.get(h)
        terms.append(TransitionTerm(h, k, None if imap is None else tuple(imap)))
    return terms


# ---------------------------------------------------------------------------
# pointwise risk sums


@dataclass(frozen=True)
class RiskEval:
    s0: float
    s1: np.ndarray
    s2: np.ndarray


def risk_eval(data: DurationDataset, exclude_subject, h, u: float, beta, x: float, spec: KernelSpec,
              index_map=None) -> RiskEval:
    """Kernel-weighted risk sums at ``(u, beta, x)`` over records from ``h[0]``.

    With ``exclude_subject=None`` the full-sample sums normalised by ``n a``
    are returned; otherwise that subject is left out and the normaliser is
    ``(n - 1) a``.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    mask = (data.from_state == h[0]) & (data.gap >= u)
    if exclude_subject is not None:
        mask &= data.subject != exclude_subject
        norm = (data.n - 1) * spec.bandwidth
    else:
        norm = data.n * spec.bandwidth
    Z = data.design(index_map, len(beta))[mask]
    w = np.exp(Z @ beta) * kernel_weights(x, data.x[mask], spec)
    s2 = (Z.T * w) @ Z / norm
    return RiskEval(float(w.sum() / norm), (w @ Z) / norm, 0.5 * (s2 + s2.T))


class _TermSystem:
    """Sparse leave-one-out kernel weights between events and at-risk records."""

    def __init__(self, data: DurationDataset, term: TransitionTerm, d: int):
        if data.n < 2:
            raise EstimationError("at least two subjects are needed for leave-one-out risk sums")
        self.term = term
        self.n = data.n
        spec = term.kernel
        Z = data.design(term.index_map, d)
        risk = np.flatnonzero(data.from_state == term.h[0])
        ev = risk[data.to_state[risk] == term.h[1]]
        self.Zr, self.Xr, self.gr, self.sr = Z[risk], data.x[risk], data.gap[risk], data.subject[risk]
        self.Ze, self.Xe, self.ge, self.se = Z[ev], data.x[ev], data.gap[ev], data.subject[ev]
        self.ev_r = data.to_state[risk] == term.h[1]
        self.norm = (data.n - 1) * spec.bandwidth
        self.ZZ = (self.Zr[:, :, None] * self.Zr[:, None, :]).reshape(len(risk), d * d)
        self.d = d
        self.W = self._weights(spec)
        self.W_abs = abs(self.W)

    def _weights(self, spec):
        rows, cols = _window_pairs(self.Xe, self.Xr, spec.bandwidth)
        keep = (self.gr[cols] >= self.ge[rows]) & (self.sr[cols] != self.se[rows])
        rows, cols = rows[keep], cols[keep]
        vals = kernel_weights(self.Xe[rows], self.Xr[cols], spec) / self.norm
        nz = vals != 0.0
        return sparse.csr_matrix((vals[nz], (rows[nz], cols[nz])), shape=(len(self.ge), len(self.gr)))

    def moments(self, beta):
        w = np.exp(self.Zr @ beta)
        s0 = self.W @ w
        s1 = self.W @ (w[:, None] * self.Zr)
        s2 = (self.W @ (w[:, None] * self.ZZ)).reshape(-1, self.d, self.d)
        return s0, s1, s2

    def usable(self, beta, s0):
        """Events whose leave-one-out risk sum is safely positive at ``beta``."""
        s0_abs = self.W_abs @ np.exp(self.Zr @ beta)
        return _stable(s0, s0_abs) & (s0 > EPS_RISK)


@dataclass
class ScoreEval:
    """Score, negative Jacobian and per-subject event sums at one ``beta``."""

    score: np.ndarray
    info: np.ndarray
    per_subject: np.ndarray
    skipped: int = 0
    considered: int = 0

    @property
    def skip_fraction(self) -> float:
        return self.skipped / self.considered if self.considered else 0.0


class ScoreSystem:
    """Score equations summed over transition terms for one estimator kind."""

    def __init__(self, data: DurationDataset, terms: Sequence[TransitionTerm], kind: str, d: int | None = None):
        if kind not in (M_ESTIMATOR, PARTIAL_LIKELIHOOD):
            raise ValueError(f"unknown estimator kind {kind!r}")
        self.data = data
        self.kind = kind
        self.d = data.d if d is None else d
        self.terms = list(terms)
        self.systems = [_TermSystem(data, t, self.d) for t in self.terms]
        self.frozen = None

    def usable_sets(self, beta) -> list:
        """Per-term masks of events passing the usability rule at ``beta``."""
        beta = np.asarray(beta, dtype=float)
        return [sysm.usable(beta, sysm.moments(beta)[0]) for sysm in self.systems]

    def with_usable(self, masks) -> "ScoreSystem":
        """Copy whose partial-likelihood terms use the fixed event sets ``masks``.

        Events outside ``masks`` are skipped whatever ``beta`` is, so the score
        is continuous in ``beta`` (events whose risk sum falls to
        ``EPS_RISK`` are still dropped).
        """
        out = copy.copy(self)
        out.frozen = [np.asarray(m, dtype=bool) for m in masks]
        return out

    def shifted(self, c_raw) -> "ScoreSystem":
        """Copy of the system with every raw covariate column shifted by ``c_raw``.

        Kernel weights are shared; only the covariate arrays change. The
        M-estimator score of the copy is ``exp(beta' c) * score``, so both
        have the same roots.
        """
        out = copy.copy(self)
        out.systems = []
        for sysm, t in zip(self.systems, self.terms):
            imap = tuple(range(len(c_raw))) if t.index_map is None else t.index_map
            c = embed(np.asarray(c_raw, dtype=float), imap, self.d)
            new = copy.copy(sysm)
            new.Zr, new.Ze = sysm.Zr + c, sysm.Ze + c
            new.ZZ = (new.Zr[:, :, None] * new.Zr[:, None, :]).reshape(len(new.Zr), self.d * self.d)
            out.systems.append(new)
        return out

    def term_evals(self, beta):
        beta = np.asarray(beta, dtype=float)
        n, d = self.data.n, self.d
        out = []
        for k, sysm in enumerate(self.systems):
            s0, s1, s2 = sysm.moments(beta)
            Ze = sysm.Ze
            if self.kind == M_ESTIMATOR:
                contrib = Ze * s0[:, None] - s1
                jac = s2 - Ze[:, :, None] * s1[:, None, :]
                skipped = 0
            else:
                ok = sysm.usable(beta, s0) if self.frozen is None else self.frozen[k] & (s0 > EPS_RISK)
                safe = np.where(ok, s0, 1.0)
                ratio = s1 / safe[:, None]
                contrib = np.where(ok[:, None], Ze - ratio, 0.0)
                jac = np.where(ok[:, None, None], s2 / safe[:, None, None] - ratio[:, :, None] * ratio[:, None, :], 0.0)
                skipped = int((~ok).sum())
            per = np.zeros((n, d))
            np.add.at(per, sysm.se, contrib)
            out.append(ScoreEval(contrib.sum(axis=0) / n, jac.sum(axis=0) / n, per, skipped, len(Ze)))
        return out

    def evaluate(self, beta, check_skips: bool = True) -> ScoreEval:
        parts = self.term_evals(beta)
        total = ScoreEval(
            sum(p.score for p in parts), sum(p.info for p in parts), sum(p.per_subject for p in parts),
            sum(p.skipped for p in parts), sum(p.considered for p in parts),
        )
        if check_skips and total.skip_fraction > MAX_SKIP_FRACTION:
            raise BandwidthError(
                f"{total.skipped} of {total.considered} events have an empty leave-one-out risk set; "
                "bandwidth too small"
            )
        return total

    def influence(self, beta, by_term: bool = False):
        """Per-subject martingale-residual score contributions at ``beta``.

        For subject ``s``: its event terms minus, for each of its records, the
        integral of the same integrand against ``exp(beta' Z) dA(u; X)``, where
        the cumulative hazard increments come from the other subjects' events.
        """
        beta = np.asarray(beta, dtype=float)
        evals = self.term_evals(beta)
        parts = []
        for sysm, ev in zip(self.systems, evals):
            parts.append(ev.per_subject - _compensator(sysm, beta, self.kind, self.data.n))
        return parts if by_term else sum(parts)


def _stable(s0, s0_abs):
    return s0 > REL_RISK * s0_abs


def _window_pairs(x_query, x_ref, a):
    """All ``(query, ref)`` index pairs with ``|x_query - x_ref| <= a``."""
    order = np.argsort(x_ref, kind="stable")
    xs = x_ref[order]
    lo = np.searchsorted(xs, x_query - a, side="left")
    hi = np.searchsorted(xs, x_query + a, side="right")
    counts = hi - lo
    rows = np.repeat(np.arange(len(x_query)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    return rows, order[np.repeat(lo, counts) + offs]


def _compensator(sysm: _TermSystem, beta, kind, n):
    """``sum_r exp(beta' Z_r) int_0^{gap_r} H_r(u) dA_(-s_r)(u; X_r)`` per subject.

    Evaluated over all (record, record) pairs inside one kernel window: each
    record ``r`` sees the risk sums at its own mark with its own subject left
    out, accumulated as grouped suffix sums in decreasing gap order.
    """
    spec = sysm.term.kernel
    d = sysm.d
    out = np.zeros((n, d))
    if len(sysm.gr) == 0 or len(sysm.ge) == 0:
        return out
    w = np.exp(sysm.Zr @ beta)
    r, j = _window_pairs(sysm.Xr, sysm.Xr, spec.bandwidth)
    keep = sysm.sr[r] != sysm.sr[j]
    r, j = r[keep], j[keep]
    k = kernel_weights(sysm.Xr[r], sysm.Xr[j], spec) / sysm.norm
    order = np.lexsort((-sysm.gr[j], r))
    r, j, k = r[order], j[order], k[order]
    g = sysm.gr[j]
    kw = (k * w[j])[:, None] * np.column_stack([np.ones(len(j)), sysm.Zr[j]])
    kw = np.column_stack([kw, k * w[j], np.abs(k) * w[j]])
    csum = np.cumsum(kw, axis=0)
    csum0 = np.vstack([np.zeros((1, d + 3)), csum])
    group_start = np.searchsorted(r, r, side="left")
    # ties in gap: every member of a run of equal (r, gap) sees the whole run
    new_run = np.ones(len(r), dtype=bool)
    new_run[1:] = (r[1:] != r[:-1]) | (g[1:] != g[:-1])
    run_id = np.cumsum(new_run) - 1
    run_last = np.append(np.flatnonzero(new_run)[1:] - 1, len(r) - 1)
    sums = csum[run_last[run_id]] - csum0[group_start]
    s0, s1 = sums[:, 0], sums[:, 1:-2]
    ok = _stable(sums[:, -2], sums[:, -1]) & (s0 > EPS_RISK)
    ev = sysm.ev_r[j] & (g <= sysm.gr[r]) & (k != 0.0) & ok
    r, k, s0, s1 = r[ev], k[ev], s0[ev], s1[ev]
    integrand = sysm.Zr[r] - s1 / s0[:, None]
    if kind == PARTIAL_LIKELIHOOD:
        integrand = integrand / s0[:, None]
    np.add.at(out, sysm.sr[r], (w[r] * k)[:, None] * integrand)
    return out


# ---------------------------------------------------------------------------
# public score / information functions


def _system(data, beta, spec, kind, transitions=None, index_maps=None):
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if isinstance(spec, ScoreSystem):
        return spec, beta
    if spec is not None and not isinstance(spec, (KernelSpec, Mapping)) and isinstance(spec, Sequence):
        terms = list(spec)
    else:
        terms = make_terms(data, kind, spec, transitions=transitions, index_maps=index_maps)
    return ScoreSystem(data, terms, kind, d=len(beta)), beta


def score_m(data, beta, spec=None, transitions=None, index_maps=None) -> ScoreEval:
    """M-estimator score ``n^-1 sum_events [Z S0(-i) - S1(-i)]`` (with per-subject sums)."""
    sysm, beta = _system(data, beta, spec, M_ESTIMATOR, transitions, index_maps)
    return sysm.evaluate(beta)


def score_pl(data, beta, spec=None, transitions=None, index_maps=None) -> ScoreEval:
    """Smoothed partial-likelihood score ``n^-1 sum_events [Z - S1(-i)/S0(-i)]``.

    Events whose leave-one-out risk sum is at most ``EPS_RISK``, or below
    ``REL_RISK`` times the absolute-kernel risk sum, are skipped;
    more than half skipped raises :class:`BandwidthError`.
    """
    sysm, beta = _system(data, beta, spec, PARTIAL_LIKELIHOOD, transitions, index_maps)
    return sysm.evaluate(beta)


def info_m(data, beta, spec=None, transitions=None, index_maps=None) -> np.ndarray:
    """Negative Jacobian of :func:`score_m`: ``n^-1 sum [S2 - Z (x) S1]``."""
    return score_m(data, beta, spec, transitions, index_maps).info


def info_pl(data, beta, spec=None, transitions=None, index_maps=None) -> np.ndarray:
    """Negative Jacobian of :func:`score_pl`: ``n^-1 sum [S2/S0 - (S1/S0)^2]``."""
    return score_pl(data, beta, spec, transitions, index_maps).info


# ---------------------------------------------------------------------------
# naive calendar-time Cox score (comparator only)


class NaiveCoxSystem:
    """Unsmoothed calendar-time Cox score over the untruncated spells.

    The risk set at calendar time ``t`` for ``h = (i, j)`` holds every spell
    in state ``i`` with ``start < t <= stop``; durations and marks are ignored.
    """

    kind = NAIVE_COX

    def __init__(self, data: DurationDataset, transitions=None, index_maps=None, d: int | None = None):
        self.data = data
        self.d = data.d if d is None else d
        transitions = data.transitions if transitions is None else transitions
        self.transitions = [tuple(h) for h in transitions]
        index_maps = index_maps or {}
        self.parts = []
        for h in self.transitions:
            Z = data.design(index_maps.get(h), self.d)
            risk = np.flatnonzero(data.from_state == h[0])
            start = data.start[risk]
            stop = start + data.raw_gap[risk]
            ev = data.raw_to_state[risk] == h[1]
            t_ev = stop[ev]
            so, sa = np.argsort(stop, kind="stable"), np.argsort(start, kind="stable")
            self.parts.append(dict(
                Z=Z[risk], Ze=Z[risk][ev], se=data.subject[risk][ev], so=so, sa=sa,
                i_stop=np.searchsorted(stop[so], t_ev, side="left"),
                i_start=np.searchsorted(start[sa], t_ev, side="left"),
            ))

    @staticmethod
    def _suffix(vals, order, idx):
        cs = np.concatenate([np.cumsum(vals[order][::-1], axis=0)[::-1], np.zeros((1,) + vals.shape[1:])])
        return cs[idx]

    def evaluate(self, beta, check_skips: bool = True) -> ScoreEval:
        beta = np.asarray(beta, dtype=float)
        n, d = self.data.n, self.d
        score, info, per = np.zeros(d), np.zeros((d, d)), np.zeros((n, d))
        for p in self.parts:
            Z = p["Z"]
            w = np.exp(Z @ beta)
            cols = [w[:, None], w[:, None] * Z, (w[:, None, None] * Z[:, :, None] * Z[:, None, :]).reshape(len(w), d * d)]
            s = [self._suffix(c, p["so"], p["i_stop"]) - self._suffix(c, p["sa"], p["i_start"]) for c in cols]
            s0, s1, s2 = s[0][:, 0], s[1], s[2].reshape(-1, d, d)
            ratio = s1 / s0[:, None]
            contrib = p["Ze"] - ratio
            score += contrib.sum(axis=0) / n
            info += (s2 / s0[:, None, None] - ratio[:, :, None] * ratio[:, None, :]).sum(axis=0) / n
            np.add.at(per, p["se"], contrib)
        return ScoreEval(score, info, per, 0, sum(len(p["Ze"]) for p in self.parts))

    def influence(self, beta, by_term=False):
        return self.evaluate(beta).per_subject


def naive_cox_score(data: DurationDataset, beta, transitions=None, index_maps=None) -> ScoreEval:
    """Calendar-time Cox score that ignores the duration dependence of the hazard."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return NaiveCoxSystem(data, transitions, index_maps, d=len(beta)).evaluate(beta)


# ---------------------------------------------------------------------------
# Newton solver and covariance


@dataclass
class FitResult:
    beta_hat: np.ndarray
    covariance: np.ndarray
    estimator_kind: str
    iterations: int
    final_score_norm: float
    per_subject_scores: np.ndarray
    bandwidth_used: dict
    n: int
    skipped: int = 0
    considered: int = 0
    terms: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def wald_interval(self, level: float = 0.95):
        from scipy.stats import norm

        zq = norm.ppf(0.5 + level / 2)
        return self.beta_hat - zq * self.stderr, self.beta_hat + zq * self.stderr


def _check_contrast(info):
    d = info.shape[0]
    if not np.all(np.isfinite(info)) or np.linalg.matrix_rank(info) < d:
        raise NoContrastError()
    if np.linalg.cond(info) > 1e13:
        raise NoContrastError()


def newton(system, beta_init, tol: float = 1e-8, max_iter: int = 50):
    """Damped Newton iterations ``beta += t * info^-1 score`` with step halving.

    When no halving reduces the score norm, a bracketing (one coefficient) or
    hybrid (several) root search is tried from the stall point before giving up.
    Returns ``(beta, ScoreEval, iterations, trace)``.
    """
    beta = np.array(beta_init, dtype=float)
    ev = system.evaluate(beta)
    trace = [(beta.copy(), float(np.max(np.abs(ev.score))))]
    _check_contrast(ev.info)
    it = 0
    while np.max(np.abs(ev.score)) >= tol:
        if it >= max_iter:
            raise ConvergenceError(f"no convergence in {max_iter} Newton iterations", trace)
        try:
            step = np.linalg.solve(ev.info, ev.score)
        except np.linalg.LinAlgError:
            raise NoContrastError() from None
        old = np.linalg.norm(ev.score)
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + t * step
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    ev_c = system.evaluate(cand)
                except BandwidthError:
                    ev_c = None
            if ev_c is not None and np.all(np.isfinite(ev_c.score)) and np.linalg.norm(ev_c.score) < old:
                break
            t *= 0.5
        else:
            found = _fallback_root(system, beta, tol)
            if found is None:
                raise ConvergenceError("line search failed to reduce the score norm", trace)
            cand, ev_c = found
            log.info("Newton stalled at %s; fallback root finder reached %s", beta, cand)
        beta, ev = cand, ev_c
        it += 1
        trace.append((beta.copy(), float(np.max(np.abs(ev.score)))))
    return beta, ev, it, trace


def _fallback_root(system, beta, tol):
    """Root search used when step halving cannot reduce the score norm.

    Boundary-kernel risk sums can give the score a sharp local dip near the
    root where Newton stalls. For one coefficient, bracket a sign change
    around the stall point and use Brent's method. Otherwise use MINPACK's
    hybrid method. The result is accepted only if it meets ``tol``.
    """
    from scipy import optimize

    def score(b):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                return system.evaluate(np.atleast_1d(b)).score
            except BandwidthError:
                return np.full(len(beta), np.nan)

    cand = None
    if len(beta) == 1:
        f0 = score(beta)[0]
        for k in range(12):
            delta = 1e-3 * 2.0**k
            for other in (beta[0] + delta, beta[0] - delta):
                f1 = score(other)[0]
                if np.isfinite(f1) and np.sign(f1) != np.sign(f0):
                    lo, hi = sorted((beta[0], other))
                    try:
                        cand = np.array([optimize.brentq(lambda b: score(b)[0], lo, hi, xtol=1e-15, rtol=4e-16)])
                    except ValueError:
                        cand = None
                    break
            if cand is not None:
                break
    else:
        sol = optimize.root(score, beta, jac=lambda b: -system.evaluate(np.atleast_1d(b)).info, method="hybr",
                            options={"xtol": 1e-14})
        cand = sol.x
    if cand is None:
        return None
    ev = system.evaluate(cand)
    if np.all(np.isfinite(ev.score)) and np.max(np.abs(ev.score)) < tol:
        return cand, ev
    return None


def covariance_pl(info: np.ndarray, n: int) -> np.ndarray:
    """``n^-1 info^-1`` at the fitted coefficient."""
    _check_contrast(info)
    cov = np.linalg.inv(info) / n
    return 0.5 * (cov + cov.T)


def covariance_m(info: np.ndarray, contributions: np.ndarray, n: int, warn: list | None = None) -> np.ndarray:
    """Sandwich ``n^-1 A^-1 B A^-T`` with ``A = info`` and ``B`` the mean outer
    product of per-subject contributions."""
    _check_contrast(info)
    meat = contributions.T @ contributions / n
    if np.allclose(meat, 0.0):
        msg = "score contributions are all zero; variance estimate is degenerate"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        if warn is not None:
            warn.append(msg)
    inv = np.linalg.inv(info)
    cov = inv @ meat @ inv.T / n
    return 0.5 * (cov + cov.T)


def build_system(data, kind, terms=None, d=None, transitions=None, index_maps=None):
    if kind == NAIVE_COX:
        if terms is not None:
            transitions = [t.h for t in terms]
            index_maps = {t.h: t.index_map for t in terms if t.index_map is not None}
        return NaiveCoxSystem(data, transitions, index_maps, d=d)
    return ScoreSystem(data, terms, kind, d=d)


def _same_sets(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def _newton_settled(system: ScoreSystem, beta0, tol, max_iter):
    """Partial-likelihood Newton with the usable event set held fixed per solve.

    The usability rule depends on ``beta``, so letting it change inside
    Newton makes the score jump. Each round solves with the set chosen at
    the current estimate, then re-applies the rule at the root; the fit ends
    when the set reproduces itself. If the sets cycle, events that drop out
    in either member of the cycle are skipped and one final solve is run.
    Returns ``(beta, ScoreEval, iterations, trace, frozen system)``.
    """
    beta, it, trace = np.asarray(beta0, dtype=float), 0, []
    current, seen = system.usable_sets(beta), []
    for _ in range(MAX_SET_ROUNDS):
        frozen = system.with_usable(current)
        try:
            beta, ev, it_r, tr = newton(frozen, beta, tol, max_iter)
        except ConvergenceError as exc:
            # a set chosen far from the root can contain an event whose risk
            # sum changes sign before the root is reached; restart from the
            # best iterate with the set that is usable there
            best = min(exc.trace, key=lambda t: t[1])[0] if exc.trace else beta
            nxt = system.usable_sets(best)
            if _same_sets(nxt, current):
                raise
            trace = trace + list(exc.trace)
            beta, current = np.asarray(best, dtype=float), nxt
            continue
        it, trace = it + it_r, trace + tr
        nxt = system.usable_sets(beta)
        if _same_sets(nxt, current):
            return beta, ev, it, trace, frozen
        if any(_same_sets(nxt, old) for old in seen):
            frozen = system.with_usable([a & b for a, b in zip(current, nxt)])
            beta, ev, it_r, tr = newton(frozen, beta, tol, max_iter)
            log.info("usable event set cycled; borderline events skipped")
            return beta, ev, it + it_r, trace + tr, frozen
        seen.append(current)
        current = nxt
    raise ConvergenceError(f"usable event set did not settle in {MAX_SET_ROUNDS} rounds", trace)


def fit_system(system, kind, beta_init=None, tol=1e-8, max_iter=50, covariance=True,
               influence: bool = True) -> FitResult:
    """Run Newton on a prepared score system and attach the covariance.

    ``influence=False`` skips the martingale-residual contributions where the
    covariance does not need them (partial likelihood); ``per_subject_scores``
    then holds only the per-subject event sums.
    """
    d = system.d
    data = system.data
    beta0 = np.zeros(d) if beta_init is None else np.atleast_1d(np.asarray(beta_init, dtype=float))
    if kind == M_ESTIMATOR and isinstance(system, ScoreSystem) and len(data):
        # the M score is multiplied by exp(beta'c) when Z -> Z + c, which can
        # mislead Newton far from the root; solve with centred covariates
        # (same roots), then polish on the original system
        centred = system.shifted(-data.z.mean(axis=0))
        beta0, _, it0, trace0 = newton(centred, beta0, tol, max_iter)
        beta, ev, it, trace = newton(system, beta0, tol, max_iter)
        it, trace = it0 + it, trace0 + trace
    elif kind == PARTIAL_LIKELIHOOD and isinstance(system, ScoreSystem):
        beta, ev, it, trace, system = _newton_settled(system, beta0, tol, max_iter)
    else:
        beta, ev, it, trace = newton(system, beta0, tol, max_iter)
    warn = []
    infl = ev.per_subject
    if kind != NAIVE_COX and (influence or (covariance and kind == M_ESTIMATOR)):
        infl = system.influence(beta)
    if not covariance:
        cov = np.full((d, d), np.nan)
    elif kind == M_ESTIMATOR:
        cov = covariance_m(ev.info, infl, data.n, warn)
    else:
        cov = covariance_pl(ev.info, data.n)
    terms = getattr(system, "terms", [])
    return FitResult(
        beta_hat=beta, covariance=cov, estimator_kind=kind, iterations=it,
        final_score_norm=float(np.max(np.abs(ev.score))), per_subject_scores=infl,
        bandwidth_used={t.h: t.kernel.bandwidth for t in terms}, n=data.n,
        skipped=ev.skipped, considered=ev.considered, terms=terms, trace=trace, warnings=warn,
    )


def solve(data: DurationDataset, kind: str = PARTIAL_LIKELIHOOD, spec=None, beta_init=None, tol: float = 1e-8,
          max_iter: int = 50, *, transitions=None, index_maps=None, mu: int = 2, c: float = 1.0,
          tau: float | None = None, d: int | None = None, covariance: bool = True,
          influence: bool = True) -> FitResult:
    """Fit the regression coefficient with the chosen estimator.

    Parameters
    ----------
    kind : {'m', 'pl', 'naive'}
        M-estimator, smoothed partial likelihood, or the calendar-time Cox
        comparator.
    spec : KernelSpec, mapping or None
        Kernel per transition; ``None`` applies the default bandwidth rule
        with constant ``c`` and order ``mu``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    d = data.d if d is None else d
    if beta_init is not None:
        d = len(np.atleast_1d(beta_init))
    if kind == NAIVE_COX:
        system = NaiveCoxSystem(data, transitions, index_maps, d=d)
    else:
        terms = make_terms(data, kind, spec, transitions=transitions, index_maps=index_maps, mu=mu, c=c, tau=tau)
        system = ScoreSystem(data, terms, kind, d=d)
    if sum(len(getattr(s, "ge", ())) for s in getattr(system, "systems", [])) == 0 and kind != NAIVE_COX:
        raise EstimationError("no events to fit")
    return fit_system(system, kind, beta_init, tol, max_iter, covariance, influence)


# ---------------------------------------------------------------------------
# conditional Aalen-Nelson estimator


class _HazardTerm:
    """Event/at-risk bookkeeping for evaluating the baseline estimator at any mark."""

    def __init__(self, data: DurationDataset, h, beta, index_map=None):
        beta = np.atleast_1d(np.asarray(beta, dtype=float))
        Z = data.design(index_map, len(beta))
        risk = np.flatnonzero(data.from_state == h[0])
        ev = risk[data.to_state[risk] == h[1]]
        self.n = data.n
        self.xr, self.gr, self.sr = data.x[risk], data.gap[risk], data.subject[risk]
        self.wr = np.exp(Z[risk] @ beta)
        order = np.argsort(self.gr, kind="stable")
        self.order, self.g_sorted = order, self.gr[order]
        # events in deterministic (subject, epoch) order
        self.xe, self.ge, self.se = data.x[ev], data.gap[ev], data.subject[ev]
        self.idx = np.searchsorted(self.g_sorted, self.ge, side="left")
        # same-subject (event, at-risk record) pairs for the leave-one-out
        # correction; records are grouped by subject, so each event's own
        # records form one contiguous block
        lo = np.searchsorted(self.sr, self.se, side="left")
        counts = np.searchsorted(self.sr, self.se, side="right") - lo
        pe = np.repeat(np.arange(len(self.se)), counts)
        pr = np.repeat(lo, counts) + np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        keep = self.gr[pr] >= self.ge[pe]
        self.pe, self.pr = pe[keep], pr[keep]

    def _loo_sum(self, kw, spec):
        suffix = np.concatenate([np.cumsum(kw[self.order][::-1])[::-1], [0.0]])
        total = suffix[self.idx]
        own = np.bincount(self.pe, weights=kw[self.pr], minlength=len(self.ge)) if len(self.pe) else 0.0
        loo = total - own
        # subtracting a subject's own weight loses digits when it dominates
        # the suffix sum; such events are summed directly
        for e in np.flatnonzero(np.abs(own) > OWN_SHARE * np.abs(loo)):
            keep = (self.gr >= self.ge[e]) & (self.sr != self.se[e])
            loo[e] = kw[keep].sum()
        return loo / ((self.n - 1) * spec.bandwidth)

    def increments(self, x, spec: KernelSpec):
        """Return ``(event gaps, increments, loo S0, considered mask, valid mask)`` at mark ``x``."""
        k = kernel_weights(x, self.xr, spec)
        s0, s0_abs = (self._loo_sum(v, spec) for v in (k * self.wr, np.abs(k) * self.wr))
        ke = kernel_weights(x, self.xe, spec)
        considered = ke != 0.0
        valid = considered & _stable(s0, s0_abs) & (s0 > EPS_RISK)
        inc = np.where(valid, ke / (self.n * spec.bandwidth * np.where(valid, s0, 1.0)), 0.0)
        return self.ge, inc, s0, considered, valid


@dataclass
class AalenNelsonCurve:
    """Baseline cumulative hazard at one mark, on a duration grid.

    ``raw`` is the estimator itself; ``values`` is its running maximum in
    ``v`` (boundary kernels can produce negative increments).
    """

    x: float
    grid_v: np.ndarray
    raw: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    d_pq: float
    skipped: int
    considered: int


def _curve(term: _HazardTerm, x, spec, grid_v, strict=True) -> AalenNelsonCurve:
    grid_v = np.asarray(grid_v, dtype=float)
    g, inc, s0, considered, valid = term.increments(x, spec)
    n_cons, n_skip = int(considered.sum()), int((considered & ~valid).sum())
    if strict and n_cons and n_skip / n_cons > MAX_SKIP_FRACTION:
        raise BandwidthError(f"{n_skip} of {n_cons} increments skipped at x={x}; bandwidth too small")
    order = np.argsort(g, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(inc[order])])
    var_inc = np.where(valid, inc / np.where(valid, s0, 1.0), 0.0)
    cum_var = np.concatenate([[0.0], np.cumsum(var_inc[order])])
    pos = np.searchsorted(g[order], grid_v, side="right")
    raw = cum[pos]
    d_pq = region_l2(x, spec)
    var = d_pq / (term.n * spec.bandwidth) * cum_var[pos]
    return AalenNelsonCurve(
        float(x), grid_v, raw, np.maximum.accumulate(np.maximum(raw, 0.0)) if raw.size else raw,
        np.sqrt(np.clip(var, 0.0, None)), d_pq, n_skip, n_cons,
    )


def aalen_nelson(data: DurationDataset, h, beta, x: float, spec: KernelSpec, grid_v, index_map=None,
                 strict: bool = True) -> AalenNelsonCurve:
    """Conditional Aalen-Nelson estimate of ``A_h(v; x)`` on ``grid_v``.

    Increment at each ``h`` event: ``K_n(x, X_e) / (n a S0(-s_e)(g_e, beta, x))``.
    """
    return _curve(_HazardTerm(data, h, beta, index_map), x, spec, grid_v, strict)


def hazard_stderr(curve: AalenNelsonCurve) -> np.ndarray:
    """Pointwise standard error ``sqrt(d_pq / (n a) * sum dA / S0)`` of a curve."""
    return curve.stderr


@dataclass
class HazardSurface:
    transition: tuple
    grid_v: np.ndarray
    grid_x: np.ndarray
    values: np.ndarray  # (len(grid_v), len(grid_x))
    stderr: np.ndarray
    d_pq_used: np.ndarray
    raw: np.ndarray
    skipped: np.ndarray
    considered: np.ndarray


def hazard_surface(data: DurationDataset, h, beta, spec: KernelSpec, grid_v, grid_x, index_map=None,
                   strict: bool = True) -> HazardSurface:
    grid_v = np.asarray(grid_v, dtype=float)
    grid_x = np.asarray(grid_x, dtype=float)
    if np.any(grid_v < 0) or (np.isfinite(data.tau0) and np.any(grid_v > data.tau0 * (1 + 1e-12))):
        raise ValueError(f"duration grid must lie in [0, tau0={data.tau0}]")
    if np.any(grid_x <= 0) or np.any(grid_x >= spec.tau):
        raise ValueError(f"mark grid must lie strictly inside (0, tau={spec.tau})")
    term = _HazardTerm(data, h, beta, index_map)
    curves = [_curve(term, x, spec, grid_v, strict) for x in grid_x]
    col = lambda attr: np.column_stack([getattr(c, attr) for c in curves]) if curves else np.zeros((len(grid_v), 0))
    d_pq = np.array([c.d_pq for c in curves])
    return HazardSurface(
        tuple(h), grid_v, grid_x, col("values"), col("stderr"),
        np.broadcast_to(d_pq, (len(grid_v), len(grid_x))).copy(), col("raw"),
        np.array([c.skipped for c in curves]), np.array([c.considered for c in curves]),
    )
