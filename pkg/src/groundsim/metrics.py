"""Sim-to-real gaps, gap improvements, Pearson correlation and report files."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

METRICS = ("att", "tp", "reward", "queue", "delay")
REPORT_HEADER = ("method,setting,att,att_delta,tp,tp_delta,reward,reward_delta,queue,queue_delta,"
                 "delay,delay_delta,seeds,att_sd,tp_sd,reward_sd,queue_sd,delay_sd")


class StatisticsError(ValueError):
    pass


def gap(psi_sim: float, psi_real: float) -> float:
    """``psi_real - psi_sim``."""
    if not (math.isfinite(psi_sim) and math.isfinite(psi_real)):
        raise StatisticsError(f"non-finite metric value ({psi_sim!r}, {psi_real!r})")
    return psi_real - psi_sim


# --- improvements -----------------------------------------------------------------

@dataclass
class ImprovementRecord:
    """``|delta_a - delta_b|`` per (setting, metric), plus max-min normalization per metric."""

    method_a: str
    method_b: str
    settings: list[str]
    raw: dict[str, dict[str, float]]
    normalized: dict[str, dict[str, float]] | None
    flag: str = ""

    def rows(self) -> list[list]:
        out = []
        for setting in self.settings:
            for metric in self.raw[setting]:
                norm = self.normalized[setting][metric] if self.normalized is not None else None
                out.append([self.method_a, self.method_b, setting, metric, self.raw[setting][metric], norm])
        return out


def gap_improvement(deltas_a: Mapping[str, Mapping[str, float]], deltas_b: Mapping[str, Mapping[str, float]],
                    method_a: str = "a", method_b: str = "b") -> ImprovementRecord:
    """Raw and normalized improvements between two methods' gaps.

    ``deltas_x[setting][metric]`` is a gap. Settings must match. With one
    setting only the raw values are returned and ``flag`` says why; when a
    metric's raw values are all equal its normalized values are 0.
    """
    if set(deltas_a) != set(deltas_b):
        raise StatisticsError(f"settings differ: {sorted(deltas_a)} vs {sorted(deltas_b)}")
    settings = sorted(deltas_a)
    if not settings:
        raise StatisticsError("no settings")
    raw = {}
    for s in settings:
        if set(deltas_a[s]) != set(deltas_b[s]):
            raise StatisticsError(f"metrics differ for setting {s}")
        raw[s] = {m: abs(gap(deltas_b[s][m], deltas_a[s][m])) for m in deltas_a[s]}
    if len(settings) < 2:
        return ImprovementRecord(method_a, method_b, settings, raw, None,
                                 "normalization needs at least 2 settings")
    normalized = {s: {} for s in settings}
    for m in raw[settings[0]]:
        values = [raw[s][m] for s in settings]
        lo, hi = min(values), max(values)
        for s in settings:
            normalized[s][m] = 0.0 if hi == lo else (raw[s][m] - lo) / (hi - lo)
    return ImprovementRecord(method_a, method_b, settings, raw, normalized)


# --- correlation ----------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise StatisticsError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise StatisticsError("betainc needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise StatisticsError("betainc needs 0 <= x <= 1")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x))
    # the fraction converges fast for x < (a+1)/(a+b+2); use the symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, dof: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


def pearson(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Sample correlation and two-sided p-value against Student-t with n-2 dof."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatisticsError("x and y must be 1-D and of equal length")
    n = x.size
    if n < 3:
        raise StatisticsError("need at least 3 points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise StatisticsError("non-finite input")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise StatisticsError("zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    dof = n - 2
    t = r * math.sqrt(dof / (1.0 - r * r))
    return r, t_two_sided_p(t, dof)


def correlation_matrix(columns: Mapping[str, Sequence[float]]) -> list[dict]:
    """Pairwise Pearson over named columns; undefined pairs carry a flag instead of numbers."""
    names = list(columns)
    out = []
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            try:
                r, p = pearson(columns[a], columns[b])
                out.append({"x": a, "y": b, "r": r, "p": p, "flag": ""})
            except StatisticsError as err:
                out.append({"x": a, "y": b, "r": None, "p": None, "flag": str(err)})
    return out


# --- reports ----------------------------------------------------------------------

@dataclass
class GapReport:
    """Per-method, per-setting aggregate over seeds.

    ``sim``, ``real`` and ``delta`` hold seed means; ``sd`` holds the sample
    standard deviation of the real-world value across seeds (0 for a single
    seed). ``per_seed`` keeps the raw values for re-aggregation.
    """

    method: str
    setting: str
    seeds: list[int]
    sim: dict[str, float]
    real: dict[str, float]
    delta: dict[str, float]
    sd: dict[str, float]
    per_seed: list[dict] = field(default_factory=list)

    def check(self) -> None:
        for m in METRICS:
            if self.delta[m] != gap(self.sim[m], self.real[m]):
                raise StatisticsError(f"{m}: stored gap does not equal real - sim")

    def to_dict(self) -> dict:
        return {"method": self.method, "setting": self.setting, "seeds": list(self.seeds), "sim": self.sim,
                "real": self.real, "delta": self.delta, "sd": self.sd, "per_seed": self.per_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "GapReport":
        return cls(d["method"], d["setting"], list(d["seeds"]), dict(d["sim"]), dict(d["real"]),
                   dict(d["delta"]), dict(d["sd"]), list(d.get("per_seed", [])))


def aggregate(method: str, setting: str, runs: Sequence[tuple[int, Mapping[str, float], Mapping[str, float]]],
              extra: Sequence[Mapping[str, float]] | None = None) -> GapReport:
    """Combine ``(seed, sim_metrics, real_metrics)`` triples into one report.

    ``extra`` optionally attaches per-seed side values (such as forward-model
    error) to ``per_seed``.
    """
    if not runs:
        raise StatisticsError("no runs to aggregate")
    sim = {m: float(np.mean([r[1][m] for r in runs])) for m in METRICS}
    real = {m: float(np.mean([r[2][m] for r in runs])) for m in METRICS}
    delta = {m: gap(sim[m], real[m]) for m in METRICS}
    sd = {m: float(np.std([r[2][m] for r in runs], ddof=1)) if len(runs) > 1 else 0.0 for m in METRICS}
    per_seed = []
    for i, (seed, s, r) in enumerate(runs):
        row = {"seed": int(seed), "sim": {m: float(s[m]) for m in METRICS},
               "real": {m: float(r[m]) for m in METRICS}}
        if extra is not None:
            row.update({k: float(v) for k, v in extra[i].items()})
        per_seed.append(row)
    return GapReport(method, setting, [int(r[0]) for r in runs], sim, real, delta, sd, per_seed)


def _fmt(v: float) -> str:
    return f"{v:.4f}"


def report_csv(reports: Sequence[GapReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buf.write(REPORT_HEADER + "\n")
    for rep in sorted(reports, key=lambda r: (r.setting, r.method)):
        row = [rep.method, rep.setting]
        for m in METRICS:
            row += [_fmt(rep.real[m]), _fmt(rep.delta[m])]
        row.append(len(rep.seeds))
        row += [_fmt(rep.sd[m]) for m in METRICS]
        w.writerow(row)
    return buf.getvalue()


def write_report(reports: Sequence[GapReport], path: str | Path) -> tuple[Path, Path]:
    """Write the table to ``path`` and full-precision JSON next to it (``.json``)."""
    if not reports:
        raise StatisticsError("no reports to write")
    path = Path(path)
    json_path = path.with_suffix(".json")
    ordered = sorted(reports, key=lambda r: (r.setting, r.method))
    path.write_text(report_csv(ordered))
    json_path.write_text(json.dumps([r.to_dict() for r in ordered], indent=1, sort_keys=True) + "\n")
    return path, json_path


def read_reports(path: str | Path) -> list[GapReport]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return [GapReport.from_dict(d) for d in json.loads(path.read_text())]
