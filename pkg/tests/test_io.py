from __future__ import annotations

import locale

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modrenew.duration import CENSORED, DataError, from_arrays
from modrenew.io import calendar_csv, duration_csv, fmt, read_records, write_csv


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips_every_double(v):
    assert float(fmt(v)) == v


def test_fmt_specials_and_integers():
    assert fmt(np.int64(3)) == "3"
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(float("inf")) == "inf"
    assert fmt(float("nan")) == "nan"


def test_fmt_ignores_locale():
    try:
        old = locale.setlocale(locale.LC_NUMERIC)
        locale.setlocale(locale.LC_NUMERIC, "de_DE.UTF-8")
    except locale.Error:
        pytest.skip("de_DE locale not installed")
    try:
        assert fmt(1.5) == "1.5"
    finally:
        locale.setlocale(locale.LC_NUMERIC, old)


def _dataset(rng, n=7):
    sub, ep, fr, to, gap, x, z = [], [], [], [], [], [], []
    for s in range(n):
        state = 0
        for e in range(int(rng.integers(1, 4))):
            dest = int(rng.integers(-1, 3))
            sub.append(s); ep.append(e); fr.append(state); to.append(CENSORED if dest < 0 else dest)
            gap.append(float(rng.exponential())); x.append(float(rng.uniform())); z.append(rng.normal(size=2))
            if dest < 0:
                break
            state = dest
    return from_arrays(sub, ep, fr, to, gap, x, np.array(z), ("0", "1", "2"))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("scale", ["duration", "calendar"])
def test_write_read_write_is_byte_identical(tmp_path, seed, scale):
    data = _dataset(np.random.default_rng(seed))
    render = duration_csv if scale == "duration" else calendar_csv
    first = _write(tmp_path / "a.csv", render(data))
    back = read_records(first)
    assert render(back) == first.read_text(encoding="utf-8")
    np.testing.assert_array_equal(back.z, data.z)
    np.testing.assert_array_equal(back.to_state, data.to_state)
    if scale == "duration":
        np.testing.assert_array_equal(back.gap, data.gap)
    else:
        np.testing.assert_allclose(back.gap, data.gap, rtol=1e-12)


def test_duration_header_and_censored_token(tmp_path):
    data = from_arrays([0, 0], [0, 1], [0, 0], [0, CENSORED], [1.0, 0.25], [0.5, 0.5], np.ones((2, 1)), ("0",))
    text = duration_csv(data)
    lines = text.splitlines()
    assert lines[0] == "subject_id,epoch,from_state,to_state,gap,x,z1"
    assert lines[2].split(",")[3] == "CENSORED"


def test_write_csv_is_atomic(tmp_path):
    target = tmp_path / "out.csv"
    write_csv(target, ("a",), [(1,)])
    assert target.read_text() == "a\n1\n"
    assert [p.name for p in tmp_path.iterdir()] == ["out.csv"]


@pytest.mark.parametrize("body, message", [
    ("0,0,0,0,-1,0.5,0\n", "gap must be finite and positive"),
    ("0,0,0,0,abc,0.5,0\n", "'gap' is not a number"),
    ("0,1,0,0,1,0.5,0\n", "consecutive from 0"),
    ("0,0,0,0,1,0.5\n", "expected 7 fields"),
    ("0,0,CENSORED,0,1,0.5,0\n", "from_state cannot be CENSORED"),
    ("", "no records"),
])
def test_malformed_rows_report_location(tmp_path, body, message):
    path = _write(tmp_path / "bad.csv", "subject_id,epoch,from_state,to_state,gap,x,z1\n" + body)
    with pytest.raises(DataError, match=message):
        read_records(path)


def test_missing_columns_and_files(tmp_path):
    with pytest.raises(DataError, match="missing columns"):
        read_records(_write(tmp_path / "m.csv", "subject_id,epoch\n0,0\n"))
    with pytest.raises(DataError):
        read_records(tmp_path / "absent.csv")


def test_subject_labels_and_state_order(tmp_path):
    path = _write(tmp_path / "s.csv", "subject_id,epoch,from_state,to_state,gap,x,z1\n"
                  "b,0,10,2,1,0.5,0\nb,1,2,CENSORED,1,0.5,1\na,0,2,10,0.5,0.2,0\n")
    data = read_records(path)
    assert data.states == ("2", "10")
    assert data.n == 2
    assert data.subject_ids == ("b", "a")
