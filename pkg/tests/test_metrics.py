import math

import mpmath
import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import stats

from groundsim.metrics import (
    METRICS, REPORT_HEADER, GapReport, StatisticsError, aggregate, betainc, correlation_matrix, gap,
    gap_improvement, pearson, read_reports, report_csv, write_report,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_gap_example():
    assert gap(111.23, 158.93) == pytest.approx(47.70)


def test_gap_rejects_non_finite():
    for bad in (float("nan"), float("inf")):
        with pytest.raises(StatisticsError):
            gap(bad, 1.0)


@given(finite, finite)
def test_gap_antisymmetric(a, b):
    assert gap(a, b) == -gap(b, a)
    assert gap(a, a) == 0


def test_improvement_example():
    rec = gap_improvement({"V1": {"att": 47.69}}, {"V1": {"att": 43.74}}, "direct", "prompt")
    assert rec.raw["V1"]["att"] == pytest.approx(3.95)
    assert rec.normalized is None and "2 settings" in rec.flag
    assert rec.rows() == [["direct", "prompt", "V1", "att", rec.raw["V1"]["att"], None]]


def test_improvement_normalization_endpoints():
    a = {"V1": {"att": 10.0, "tp": -5.0}, "V2": {"att": 20.0, "tp": -5.0}, "V3": {"att": 30.0, "tp": -5.0}}
    b = {"V1": {"att": 9.0, "tp": -4.0}, "V2": {"att": 15.0, "tp": -4.0}, "V3": {"att": 20.0, "tp": -4.0}}
    rec = gap_improvement(a, b)
    assert [rec.normalized[s]["att"] for s in ("V1", "V2", "V3")] == [0.0, pytest.approx(4 / 9), 1.0]
    assert all(rec.normalized[s]["tp"] == 0.0 for s in a)


@given(st.dictionaries(st.sampled_from(["V1", "V2", "V3", "V4"]), st.tuples(finite, finite), min_size=2))
def test_improvement_normalized_in_unit_interval(d):
    rec = gap_improvement({s: {"att": v[0]} for s, v in d.items()}, {s: {"att": v[1]} for s, v in d.items()})
    values = [rec.normalized[s]["att"] for s in d]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert min(values) == 0.0
    assert all(r >= 0 for r in (rec.raw[s]["att"] for s in d))


def test_improvement_setting_mismatch():
    with pytest.raises(StatisticsError):
        gap_improvement({"V1": {"att": 1.0}}, {"V2": {"att": 1.0}})


def test_betainc_against_mpmath():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b, x = rng.uniform(0.1, 30), rng.uniform(0.1, 30), rng.uniform(0, 1)
        want = float(mpmath.betainc(a, b, 0, x, regularized=True))
        assert betainc(a, b, x) == pytest.approx(want, rel=1e-9, abs=1e-13)


def test_pearson_against_scipy():
    rng = np.random.default_rng(1)
    for n in (3, 4, 7, 20, 200):
        for _ in range(20):
            x = rng.normal(size=n)
            y = 0.3 * x + rng.normal(size=n)
            r, p = pearson(x, y)
            ref = stats.pearsonr(x, y)
            assert r == pytest.approx(ref[0], abs=1e-12)
            assert p == pytest.approx(ref[1], rel=1e-8, abs=1e-14)


def test_pearson_exact_line():
    assert pearson([1, 2, 3, 4], [2, 4, 6, 8]) == (1.0, 0.0)
    assert pearson([1, 2, 3, 4], [8, 6, 4, 2]) == (-1.0, 0.0)


def test_pearson_errors():
    with pytest.raises(StatisticsError, match="3 points"):
        pearson([1, 2], [1, 2])
    with pytest.raises(StatisticsError, match="variance"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(StatisticsError):
        pearson([1, 2, float("nan")], [1, 2, 3])
    with pytest.raises(StatisticsError):
        pearson([1, 2, 3], [1, 2])


vectors = st.lists(st.floats(-100, 100, allow_nan=False), min_size=3, max_size=30)


@given(vectors, st.data())
def test_pearson_symmetry_and_affine_invariance(x, data):
    y = data.draw(st.lists(st.floats(-100, 100, allow_nan=False), min_size=len(x), max_size=len(x)))
    x, y = np.array(x), np.array(y)
    assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
    r, p = pearson(x, y)
    assert -1 <= r <= 1 and 0 <= p <= 1
    r2, p2 = pearson(y, x)
    assert r2 == pytest.approx(r, abs=1e-12)
    scale = data.draw(st.floats(0.1, 10))
    shift = data.draw(st.floats(-50, 50))
    r3, _ = pearson(scale * x + shift, y)
    assert r3 == pytest.approx(r, abs=1e-8)
    r4, _ = pearson(-x, y)
    assert r4 == pytest.approx(-r, abs=1e-12)


def test_correlation_matrix_flags():
    rows = correlation_matrix({"a": [1, 2, 3, 4], "b": [2, 1, 4, 3], "c": [5, 5, 5, 5]})
    assert [(r["x"], r["y"]) for r in rows] == [("a", "b"), ("a", "c"), ("b", "c")]
    assert rows[0]["flag"] == "" and rows[0]["r"] == pytest.approx(0.6)
    assert rows[1]["r"] is None and "variance" in rows[1]["flag"]


def _metrics(base):
    return {m: base + i for i, m in enumerate(METRICS)}


def test_aggregate_and_check():
    runs = [(0, _metrics(10.0), _metrics(20.0)), (1, _metrics(12.0), _metrics(24.0))]
    rep = aggregate("direct", "V1", runs, extra=[{"forward_mse": 1.0}, {"forward_mse": 2.0}])
    rep.check()
    assert rep.sim["att"] == 11.0 and rep.real["att"] == 22.0 and rep.delta["att"] == 11.0
    assert rep.sd["att"] == pytest.approx(math.sqrt(8))
    assert rep.per_seed[1]["forward_mse"] == 2.0 and rep.seeds == [0, 1]
    assert aggregate("direct", "V1", runs[:1]).sd["att"] == 0.0
    rep.delta["att"] += 1
    with pytest.raises(StatisticsError):
        rep.check()


def test_report_csv_layout():
    reps = [aggregate(m, s, [(0, _metrics(1.0), _metrics(2.5))]) for s in ("V2", "V1") for m in ("prompt_gat",
                                                                                                   "direct")]
    lines = report_csv(reps).splitlines()
    assert lines[0] == REPORT_HEADER
    assert [tuple(l.split(",")[:2]) for l in lines[1:]] == [
        ("direct", "V1"), ("prompt_gat", "V1"), ("direct", "V2"), ("prompt_gat", "V2")]
    assert lines[1].split(",")[2:4] == ["2.5000", "1.5000"]
    assert len(lines[1].split(",")) == len(REPORT_HEADER.split(","))


def test_report_files_round_trip_and_stable(tmp_path):
    reps = [aggregate("direct", "V4", [(s, _metrics(s + 0.1234567), _metrics(2 * s + 0.7)) for s in range(3)])]
    write_report(reps, tmp_path / "a.csv")
    write_report(read_reports(tmp_path / "a.csv"), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = read_reports(tmp_path / "a.json")[0]
    assert back.to_dict() == reps[0].to_dict()


def test_empty_report_rejected(tmp_path):
    with pytest.raises(StatisticsError):
        write_report([], tmp_path / "x.csv")
    with pytest.raises(StatisticsError):
        aggregate("direct", "V1", [])
