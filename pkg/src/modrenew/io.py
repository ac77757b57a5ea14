"""CSV serialisation of duration-scale and calendar-scale records.

Reals are written with 17 significant digits (``repr``-exact for doubles and
independent of locale), so a write-read-write cycle is byte-identical. All
writes go to a temporary file in the target directory and are renamed into
place.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .duration import CENSORED, DataError, DurationDataset, from_arrays

CENSORED_TOKEN = "CENSORED"
DURATION_HEADER = ("subject_id", "epoch", "from_state", "to_state", "gap", "x")
CALENDAR_HEADER = ("subject_id", "epoch", "start", "stop", "from_state", "to_state", "x")


def fmt(value) -> str:
    """Locale-independent 17-significant-digit rendering of a real."""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    v = float(value)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rows_to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, rows_to_csv(header, rows))


def _subject_label(data: DurationDataset, s: int) -> str:
    return data.subject_ids[s] if data.subject_ids else str(s)


def duration_csv(data: DurationDataset) -> str:
    header = DURATION_HEADER + tuple(f"z{k + 1}" for k in range(data.d))
    rows = []
    for k in range(len(data)):
        to = data.to_state[k]
        rows.append(
            [_subject_label(data, int(data.subject[k])), int(data.epoch[k]), data.states[data.from_state[k]],
             CENSORED_TOKEN if to == CENSORED else data.states[to], data.gap[k], data.x[k], *data.z[k]]
        )
    return rows_to_csv(header, rows)


def calendar_csv(data: DurationDataset) -> str:
    """Calendar-scale spells (untruncated) for calendar-time comparisons."""
    header = CALENDAR_HEADER + tuple(f"z{k + 1}" for k in range(data.d))
    rows = []
    for k in range(len(data)):
        to = data.raw_to_state[k]
        rows.append(
            [_subject_label(data, int(data.subject[k])), int(data.epoch[k]), data.start[k],
             data.start[k] + data.raw_gap[k], data.states[data.from_state[k]],
             CENSORED_TOKEN if to == CENSORED else data.states[to], data.x[k], *data.z[k]]
        )
    return rows_to_csv(header, rows)


def _parse_real(text: str, where: str, field: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: column {field!r} is not a number: {text!r}") from None


def read_records(path, tau0: float | None = None, states: Sequence[str] | None = None) -> DurationDataset:
    """Read a duration-scale or calendar-scale CSV into a dataset.

    Calendar files (with ``start``/``stop``) keep calendar entry times so the
    calendar-time comparator can be fitted; duration files reconstruct entry
    times from cumulative gaps.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            body = list(reader)
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    calendar = "start" in header and "stop" in header
    required = CALENDAR_HEADER if calendar else DURATION_HEADER
    missing = [c for c in required if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    col = {name: i for i, name in enumerate(header)}
    zcols = sorted((c for c in header if c.startswith("z") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    labels = list(states) if states is not None else []
    ids: dict = {}
    out = {k: [] for k in ("subject", "epoch", "from", "to", "gap", "start", "x", "z")}
    for line_no, row in enumerate(body, start=2):
        if not row:
            continue
        where = f"{path}:{line_no}"
        if len(row) != len(header):
            raise DataError(f"{where}: expected {len(header)} fields, got {len(row)}")
        sid = row[col["subject_id"]]
        ids.setdefault(sid, len(ids))
        try:
            epoch = int(row[col["epoch"]])
        except ValueError:
            raise DataError(f"{where}: epoch must be an integer") from None
        frm, to = row[col["from_state"]], row[col["to_state"]]
        for lab in (frm, to):
            if lab != CENSORED_TOKEN and lab not in labels:
                if states is not None:
                    raise DataError(f"{where}: unknown state {lab!r}")
                labels.append(lab)
        if frm == CENSORED_TOKEN:
            raise DataError(f"{where}: from_state cannot be {CENSORED_TOKEN}")
        if calendar:
            start = _parse_real(row[col["start"]], where, "start")
            gap = _parse_real(row[col["stop"]], where, "stop") - start
        else:
            start = np.nan
            gap = _parse_real(row[col["gap"]], where, "gap")
        if not (np.isfinite(gap) and gap > 0):
            raise DataError(f"{where}: gap must be finite and positive, got {gap}")
        out["subject"].append(ids[sid])
        out["epoch"].append(epoch)
        out["from"].append(frm)
        out["to"].append(to)
        out["gap"].append(gap)
        out["start"].append(start)
        out["x"].append(_parse_real(row[col["x"]], where, "x"))
        out["z"].append([_parse_real(row[col[c]], where, c) for c in zcols])
    if not out["gap"]:
        raise DataError(f"{path}: no records")
    if states is None:
        labels = sorted(labels, key=lambda s: (not s.isdigit(), int(s) if s.isdigit() else 0, s))
    index = {lab: k for k, lab in enumerate(labels)}
    subject = np.asarray(out["subject"])
    epoch = np.asarray(out["epoch"])
    for s in np.unique(subject):
        eps = np.sort(epoch[subject == s])
        if not np.array_equal(eps, np.arange(len(eps))):
            name = next(k for k, v in ids.items() if v == s)
            raise DataError(f"{path}: subject {name!r} epochs must be consecutive from 0")
    z = np.asarray(out["z"], dtype=float).reshape(len(out["gap"]), len(zcols))
    return from_arrays(
        subject, epoch, [index[f] for f in out["from"]],
        [CENSORED if t == CENSORED_TOKEN else index[t] for t in out["to"]],
        out["gap"], out["x"], z, tuple(labels),
        start=np.asarray(out["start"]) if calendar else None,
        n=len(ids), tau0=tau0, subject_ids=tuple(ids),
    )
