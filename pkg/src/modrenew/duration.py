"""Duration-scale at-risk records built from calendar-scale histories.

Every observed sojourn becomes one record carrying its own clock: the gap
``v`` since entry, whether it ended in a jump (and where to) or in censoring,
and the epoch covariates.  ``Y(v) = 1(gap >= v)`` and
``N_j(v) = 1(gap <= v, to_state == j)`` are read straight off a record.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.integrate import quad

from .model import ModelSpec, SubjectHistory, embed

CENSORED = -1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class EpochRecord:
    subject: int
    epoch: int
    from_state: int
    gap: float
    to_state: int  # CENSORED when the spell ended by censoring
    z: np.ndarray
    x: float
    start: float = 0.0

    @property
    def is_event(self) -> bool:
        return self.to_state != CENSORED

    def at_risk(self, v) -> np.ndarray:
        return np.asarray(v) <= self.gap

    def counting(self, v, to_state: int) -> np.ndarray:
        return (np.asarray(v) >= self.gap) & (self.to_state == to_state)


@dataclass(frozen=True, eq=False)
class DurationDataset:
    """Columnar store of :class:`EpochRecord` rows, sorted by (subject, epoch).

    ``gap`` and ``to_state`` are the analysis values (truncated at ``tau0``);
    ``raw_gap`` and ``raw_to_state`` keep the untruncated spell for the
    calendar-time comparator.
    """

    subject: np.ndarray
    epoch: np.ndarray
    from_state: np.ndarray
    to_state: np.ndarray
    gap: np.ndarray
    start: np.ndarray
    x: np.ndarray
    z: np.ndarray
    raw_gap: np.ndarray
    raw_to_state: np.ndarray
    states: tuple
    n: int
    tau0: float = np.inf
    subject_ids: tuple = ()

    def __len__(self):
        return len(self.gap)

    @property
    def d(self) -> int:
        return self.z.shape[1]

    @property
    def transitions(self) -> tuple:
        """Transitions with at least one observed event, in sorted order."""
        ev = self.to_state != CENSORED
        pairs = set(zip(self.from_state[ev].tolist(), self.to_state[ev].tolist()))
        return tuple(sorted(pairs))

    def event_times(self, h) -> np.ndarray:
        mask = (self.from_state == h[0]) & (self.to_state == h[1])
        return np.unique(self.gap[mask])

    def record(self, k: int) -> EpochRecord:
        return EpochRecord(
            int(self.subject[k]), int(self.epoch[k]), int(self.from_state[k]), float(self.gap[k]),
            int(self.to_state[k]), self.z[k].copy(), float(self.x[k]), float(self.start[k]),
        )

    def records(self):
        return [self.record(k) for k in range(len(self))]

    def design(self, index_map: Sequence[int] | None, d: int | None = None) -> np.ndarray:
        """Covariates mapped onto coefficient positions (identity by default)."""
        if index_map is None:
            return self.z
        return embed(self.z, index_map, d if d is not None else max(index_map) + 1)

    def truncate(self, tau0: float) -> "DurationDataset":
        """Administrative censoring of every gap at ``tau0`` (from the raw spells)."""
        if not tau0 > 0:
            raise ValueError("tau0 must be positive")
        over = self.raw_gap > tau0
        return replace(
            self,
            gap=np.where(over, tau0, self.raw_gap),
            to_state=np.where(over, CENSORED, self.raw_to_state),
            tau0=float(tau0),
        )

    def select_subjects(self, keep) -> "DurationDataset":
        """Sub-dataset of the given subject indices, renumbered ``0..len(keep)-1``."""
        keep = np.asarray(keep)
        mapping = {int(s): k for k, s in enumerate(keep)}
        mask = np.isin(self.subject, keep)
        order = np.lexsort((self.epoch[mask], np.array([mapping[int(s)] for s in self.subject[mask]])))
        sub = np.array([mapping[int(s)] for s in self.subject[mask]], dtype=np.int64)[order]
        cols = {name: getattr(self, name)[mask][order] for name in
                ("epoch", "from_state", "to_state", "gap", "start", "x", "z", "raw_gap", "raw_to_state")}
        ids = tuple(self.subject_ids[int(s)] for s in keep) if self.subject_ids else ()
        return replace(self, subject=sub, n=len(keep), subject_ids=ids, **cols)


def from_arrays(subject, epoch, from_state, to_state, gap, x, z, states, *, start=None,
                n=None, tau0=None, subject_ids=()) -> DurationDataset:
    """Build a dataset from raw columns; ``tau0=None`` keeps gaps untruncated."""
    subject = np.asarray(subject, dtype=np.int64)
    epoch = np.asarray(epoch, dtype=np.int64)
    gap = np.asarray(gap, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if start is None:
        start = np.zeros(len(gap))
        for s in np.unique(subject):
            idx = np.flatnonzero(subject == s)
            idx = idx[np.argsort(epoch[idx])]
            start[idx] = np.concatenate([[0.0], np.cumsum(gap[idx])[:-1]])
    start = np.asarray(start, dtype=float)
    order = np.lexsort((epoch, subject))
    to_state = np.asarray(to_state, dtype=np.int64)[order]
    gap = gap[order]
    if np.any(~np.isfinite(gap)) or np.any(gap <= 0):
        bad = int(subject[order][np.flatnonzero(~(gap > 0) | ~np.isfinite(gap))[0]])
        raise DataError(f"subject {bad}: gap times must be finite and positive")
    ds = DurationDataset(
        subject=subject[order], epoch=epoch[order],
        from_state=np.asarray(from_state, dtype=np.int64)[order],
        to_state=to_state, gap=gap, start=start[order],
        x=np.asarray(x, dtype=float)[order], z=z[order],
        raw_gap=gap.copy(), raw_to_state=to_state.copy(),
        states=tuple(states),
        n=int(n if n is not None else (subject.max() + 1 if len(subject) else 0)),
        subject_ids=tuple(subject_ids),
    )
    if tau0 is not None and np.isfinite(tau0):
        ds = ds.truncate(tau0)
    return ds


def to_duration(cohort: Sequence[SubjectHistory], tau0: float | None = None, states=None) -> DurationDataset:
    """Duration-scale records of a simulated cohort.

    Spells censored at the instant they start are dropped. Gaps above
    ``tau0`` are censored at ``tau0``; ``tau0=None`` uses the 95th
    percentile of observed gaps and ``tau0=np.inf`` disables truncation.
    """
    rows = []
    for s, hist in enumerate(cohort):
        eps = hist.epochs
        for m, ep in enumerate(eps):
            if m > 0 and not eps[m].time > eps[m - 1].time:
                raise DataError(f"subject {s}: event times are not strictly increasing at epoch {m}")
            if ep.z is None:  # entry into an absorbing state
                continue
            if m + 1 < len(eps):
                gap, to = eps[m + 1].time - ep.time, eps[m + 1].state
            else:
                gap, to = hist.end_time - ep.time, CENSORED
            if gap < 0:
                raise DataError(f"subject {s}: censoring time precedes the last entry")
            if gap == 0:
                continue
            rows.append((s, m, ep.state, to, gap, ep.time, ep.x, ep.z))
    if not rows:
        raise DataError("cohort has no observed spells")
    if states is None:
        top = max(max(r[2], r[3]) for r in rows)
        states = tuple(str(k) for k in range(top + 1))
    subject, epoch, fr, to, gap, start, x, z = (list(c) for c in zip(*rows))
    gap = np.asarray(gap)
    if tau0 is None:
        tau0 = float(np.percentile(gap, 95))
    return from_arrays(subject, epoch, fr, to, gap, x, np.vstack(z), states,
                       start=start, n=len(cohort), tau0=tau0)


def martingale_residual(record: EpochRecord, beta, baseline, v: float, to_state: int,
                        index_map=None) -> float:
    """``N_j(v) - int_0^v Y(u) exp(beta' Z) alpha(u, x) du`` for one record.

    ``baseline`` is the true ``alpha_ij`` (a model hazard object); used to
    check simulated data against the generating model.
    """
    beta = np.asarray(beta, dtype=float)
    zz = record.z if index_map is None else embed(record.z, index_map, len(beta))
    eta = float(np.exp(zz @ beta))
    upper = min(v, record.gap)
    if hasattr(baseline, "cumulative"):
        comp = float(baseline.cumulative(upper, record.x))
    else:
        comp = quad(lambda u: float(baseline(u, record.x)), 0.0, upper, limit=200)[0]
    jump = 1.0 if (record.gap <= v and record.to_state == to_state) else 0.0
    return jump - eta * comp
