"""Calibration and selective-prediction quality measures, and comparison reports.

Ranking convention used everywhere: records are ordered by confidence
descending, ties broken by ascending record id (by position when no ids are
given). All reductions run in record order so reruns are bit-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from deferral.errors import DeferralError

DEFAULT_BINS = 10
DEFAULT_COVERAGES = (0.7, 0.8, 0.9)
SCHEMES = ("equal_width", "equal_mass")
# absorbs float noise in coverage * N (0.7 * 10 = 7.000000000000001)
_COVERAGE_EPS = 1e-9


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass(frozen=True)
class RiskCoveragePoint:
    coverage: float
    selective_risk: float
    threshold: float


@dataclass
class EvaluationReport:
    method: str
    provenance: dict[str, Any]
    n: int
    label_balance: float
    brier: float
    ece: float
    auroc: float | None
    selective_accuracy: dict[str, float] = field(default_factory=dict)
    selective_accuracy_raw: dict[str, float] = field(default_factory=dict)
    bins: list[ReliabilityBin] = field(default_factory=list)
    curve: list[RiskCoveragePoint] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "method": self.method,
            "provenance": self.provenance,
            "n": self.n,
            "label_balance": self.label_balance,
            "brier": self.brier,
            "ece": self.ece,
            "auroc": self.auroc,
        }
        if self.selective_accuracy:
            d["selective_accuracy"] = self.selective_accuracy
        if self.selective_accuracy_raw:
            d["selective_accuracy_raw"] = self.selective_accuracy_raw
        d["bins"] = [asdict(b) for b in self.bins]
        d["curve"] = [asdict(p) for p in self.curve]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"


def _arrays(probs, labels):
    p = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if p.shape != y.shape or p.ndim != 1:
        raise DeferralError(f"length mismatch: {p.size} scores vs {y.size} labels")
    if p.size == 0:
        raise DeferralError("empty input")
    return p, y


def brier(probs, labels) -> float:
    p, y = _arrays(probs, labels)
    return math.fsum((p - y) ** 2) / p.size


def _equal_mass_edges(p_sorted: np.ndarray, bins: int) -> list[int]:
    """Start indices of each bin in sorted order, moved so ties share a bin."""
    n = p_sorted.size
    starts = [0]
    for b in range(1, bins):
        i = int(round(b * n / bins))
        # advance past values equal to the previous element
        while 0 < i < n and p_sorted[i] == p_sorted[i - 1]:
            i += 1
        if starts[-1] < i < n:
            starts.append(i)
    return starts


def reliability_bins(probs, labels, bins: int = DEFAULT_BINS, scheme: str = "equal_width") -> list[ReliabilityBin]:
    p, y = _arrays(probs, labels)
    if bins < 1:
        raise DeferralError("bins must be >= 1")
    if scheme == "equal_width":
        idx = np.minimum((p * bins).astype(int), bins - 1)
        out = []
        for b in range(bins):
            m = idx == b
            cnt = int(m.sum())
            out.append(
                ReliabilityBin(
                    b / bins,
                    (b + 1) / bins,
                    cnt,
                    math.fsum(p[m]) / cnt if cnt else 0.0,
                    float(y[m].sum()) / cnt if cnt else 0.0,
                )
            )
        return out
    if scheme == "equal_mass":
        order = np.argsort(p, kind="stable")
        ps, ys = p[order], y[order]
        starts = _equal_mass_edges(ps, bins)
        ends = starts[1:] + [ps.size]
        out = []
        for j, (a, b) in enumerate(zip(starts, ends)):
            lower = 0.0 if j == 0 else float(ps[a])
            upper = 1.0 if j == len(starts) - 1 else float(ps[b])
            cnt = b - a
            out.append(
                ReliabilityBin(lower, upper, cnt, math.fsum(ps[a:b]) / cnt, float(ys[a:b].sum()) / cnt)
            )
        return out
    raise DeferralError(f"unknown binning scheme {scheme!r}")


def ece(probs, labels, bins: int = DEFAULT_BINS, scheme: str = "equal_width") -> tuple[float, list[ReliabilityBin]]:
    table = reliability_bins(probs, labels, bins, scheme)
    n = sum(b.count for b in table)
    value = math.fsum(b.count / n * abs(b.accuracy - b.mean_confidence) for b in table if b.count)
    return value, table


def auroc(confidence, labels) -> float:
    """Mann-Whitney AUROC: P(correct outranks incorrect), ties count one half."""
    s, y = _arrays(confidence, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DeferralError("AUROC undefined for degenerate labels")
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    ranks = np.empty(s.size)
    # average 1-based rank within each run of equal scores
    boundaries = np.flatnonzero(np.diff(ss)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [s.size]])
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rank_order(confidence, ids: Sequence[str] | None = None) -> np.ndarray:
    """Indices sorted by confidence descending, then id ascending."""
    c = np.asarray(confidence, dtype=float)
    if ids is None:
        tiebreak = np.arange(c.size)
    else:
        if len(ids) != c.size:
            raise DeferralError("ids and scores differ in length")
        tiebreak = np.empty(c.size, dtype=np.int64)
        tiebreak[sorted(range(c.size), key=lambda i: ids[i])] = np.arange(c.size)
    return np.lexsort((tiebreak, -c))


def n_covered(coverage: float, n: int) -> int:
    if not (0.0 < coverage <= 1.0):
        raise DeferralError(f"coverage {coverage} outside (0, 1]")
    return max(1, min(n, math.ceil(coverage * n - _COVERAGE_EPS)))


def selective_accuracy(confidence, labels, coverage: float, ids: Sequence[str] | None = None) -> float:
    c, y = _arrays(confidence, labels)
    k = n_covered(coverage, c.size)
    kept = rank_order(c, ids)[:k]
    return float(y[kept].sum()) / k


def risk_coverage_curve(confidence, labels) -> list[RiskCoveragePoint]:
    """One point per distinct confidence value, thresholds descending."""
    c, y = _arrays(confidence, labels)
    order = np.argsort(-c, kind="mergesort")
    cs, ys = c[order], y[order]
    errors = np.cumsum(~ys)
    n = c.size
    last_of_run = np.flatnonzero(np.append(cs[1:] != cs[:-1], True))
    return [
        RiskCoveragePoint(float((i + 1) / n), float(errors[i] / (i + 1)), float(cs[i]))
        for i in last_of_run
    ]


def _cov_key(c: float) -> str:
    return f"{c:g}"


def build_report(
    method: str,
    probs,
    labels,
    confidence=None,
    coverages: Sequence[float] = DEFAULT_COVERAGES,
    bins: int = DEFAULT_BINS,
    scheme: str = "equal_width",
    ids: Sequence[str] | None = None,
    provenance: dict[str, Any] | None = None,
) -> EvaluationReport:
    """Assemble Brier, ECE, AUROC, selective accuracy and the risk-coverage curve.

    Selective accuracy ranks by calibrated probability; when the raw confidence
    is supplied, the same numbers ranked by raw confidence are reported too.
    """
    p, y = _arrays(probs, labels)
    if np.any((p < 0) | (p > 1)):
        raise DeferralError("probabilities must lie in [0, 1]")
    e, table = ece(p, y, bins, scheme)
    try:
        auc = auroc(p, y)
    except DeferralError:
        auc = None
    sel = {_cov_key(c): selective_accuracy(p, y, c, ids) for c in coverages}
    sel_raw = {}
    if confidence is not None:
        craw, _ = _arrays(confidence, labels)
        sel_raw = {_cov_key(c): selective_accuracy(craw, y, c, ids) for c in coverages}
    prov = {"bins": bins, "scheme": scheme, "coverages": [float(c) for c in coverages]}
    prov.update(provenance or {})
    return EvaluationReport(
        method=method,
        provenance=prov,
        n=int(p.size),
        label_balance=float(y.mean()),
        brier=brier(p, y),
        ece=e,
        auroc=auc,
        selective_accuracy=sel,
        selective_accuracy_raw=sel_raw,
        bins=table,
        curve=risk_coverage_curve(p, y),
    )


# ------------------------------------------------------------------ rendering


def _coverage_keys(reports: Sequence[dict]) -> list[str]:
    keys = None
    for r in reports:
        k = list(r.get("selective_accuracy", {}).keys())
        if keys is None:
            keys = k
        elif k != keys:
            raise DeferralError(
                f"incompatible coverage lists across reports: {keys} vs {k} ({r.get('method')})"
            )
    return keys or []


def csv_header(coverage_keys: Sequence[str]) -> list[str]:
    return ["method", "brier", "ece", "auroc"] + [f"sel@{k}" for k in coverage_keys]


def _row_values(r: dict, keys: Sequence[str]) -> list:
    sel = r.get("selective_accuracy", {})
    return [r["method"], r.get("brier"), r.get("ece"), r.get("auroc")] + [sel.get(k) for k in keys]


def render_csv(reports: Sequence[dict]) -> str:
    keys = _coverage_keys(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(keys))
    for r in reports:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in _row_values(r, keys)])
    return buf.getvalue()


def render_json(reports: Sequence[dict]) -> str:
    keys = _coverage_keys(reports)
    rows = [dict(zip(csv_header(keys), _row_values(r, keys))) for r in reports]
    return json.dumps(rows, indent=2, allow_nan=False) + "\n"


def _best(reports: Sequence[dict], key: str) -> float | None:
    vals = [r.get(key) for r in reports if r.get(key) is not None]
    return min(vals) if vals else None


def render_table(reports: Sequence[dict], digits: int = 3) -> str:
    """Fixed-width comparison table; the lowest Brier and ECE carry a '*'."""
    keys = _coverage_keys(reports)
    header = ["Method", "Brier", "ECE", "AUROC"] + [f"Sel@{k}" for k in keys]
    best = {k: _best(reports, k) for k in ("brier", "ece")}
    rows = []
    for r in reports:
        vals = _row_values(r, keys)
        cells = [str(vals[0])]
        for col, v in zip(["brier", "ece", "auroc"] + keys, vals[1:]):
            if v is None:
                cells.append("-")
                continue
            cell = f"{v:.{digits}f}"
            if col in best:
                # trailing pad keeps digits aligned with starred cells
                cell += "*" if v == best[col] else " "
            cells.append(cell)
        rows.append(cells)
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(widths[0]) if i == 0 else h.rjust(widths[i]) for i, h in enumerate(header))
    ]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append(
            "  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row))
        )
    return "\n".join(lines) + "\n"


def render(reports: Sequence[dict], fmt: str = "table") -> str:
    if not reports:
        raise DeferralError("no reports to render")
    if fmt == "table":
        return render_table(reports)
    if fmt == "csv":
        return render_csv(reports)
    if fmt == "json":
        return render_json(reports)
    raise DeferralError(f"unknown report format {fmt!r}")
