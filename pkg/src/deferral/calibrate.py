"""Post-deployment calibrators: fit, apply, save and load.

Kinds and their inputs:

=================  ======================  ==========================================
kind               input_spec              parameters
=================  ======================  ==========================================
temperature        raw_logits              temperature
platt              metric id               slope, intercept
weighted_platt     metric id               slope, intercept, neg_weight
isotonic           metric id               knots_x, knots_y
logit_feature      raw_logits              weights, intercept, lambda, k,
                                           feature_mean, feature_std
variance_aware     sample_dispersion       knots_x, knots_y (over -dispersion)
=================  ======================  ==========================================
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from deferral import __version__
from deferral._io import atomic_write_text
from deferral.errors import DeferralError
from deferral.isotonic import fit_knots, interpolate
from deferral.prediction_log import PredictionRecord
from deferral.solvers import FitDiagnostics, golden_section, newton_logistic, sigmoid
from deferral.uncertainty import (
    MetricId,
    UncertaintyScoreSet,
    classification_metrics,
    metric_id,
    sampling_metrics,
    score_record,
)

CALIBRATOR_VERSION = 1
KINDS = ("temperature", "platt", "weighted_platt", "isotonic", "logit_feature", "variance_aware")
RAW_LOGITS = "raw_logits"
SAMPLE_DISPERSION = "sample_dispersion"
GENERIC_SCORE = "score"

NEWTON_TOL = 1e-6
PLATT_MAX_ITER = 100
LOGIT_FEATURE_MAX_ITER = 200
DEFAULT_LAMBDA = 1e-2
MAX_TOP_LOGITS = 10
T_BOUNDS = (0.05, 20.0)
T_XTOL = 1e-4


@dataclass(frozen=True)
class Calibrator:
    kind: str
    input_spec: str
    parameters: dict[str, Any]
    fit_meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": CALIBRATOR_VERSION,
            "kind": self.kind,
            "input_spec": self.input_spec,
            "parameters": self.parameters,
            "fit_meta": self.fit_meta,
        }


def _labels(labels) -> np.ndarray:
    return np.asarray(labels, dtype=bool).astype(float)


def _check_labels(y: np.ndarray) -> None:
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        which = "all correct" if n_pos else "all incorrect"
        raise DeferralError(f"degenerate labels: {which}")


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()


def _fit_meta(y: np.ndarray, digest: str, **extra) -> dict[str, Any]:
    meta = {
        "n_records": int(y.size),
        "label_balance": float(y.mean()),
        "data_digest": digest,
        "toolkit_version": __version__,
    }
    meta.update(extra)
    return meta


def _spec_name(metric) -> str:
    return GENERIC_SCORE if metric is None else str(metric_id(metric))


# ---------------------------------------------------------------- temperature


def _group_logits(records: Sequence[PredictionRecord]):
    """Stack logits into one matrix per class count, keeping label alignment."""
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(len(r.logits), []).append(i)
    return [
        (np.array([records[i].logits for i in idx], dtype=float), np.array(idx))
        for idx in groups.values()
    ]


def _temperature_nll(groups, y: np.ndarray, t: float) -> float:
    total = 0.0
    for z, idx in groups:
        r = (z - z.max(axis=1, keepdims=True)) / t
        lse = np.logaddexp.reduce(r, axis=1)
        # log of the probability mass outside the top class
        top = np.argmax(z, axis=1)
        rest = r.copy()
        rest[np.arange(len(r)), top] = -np.inf
        lse_rest = np.logaddexp.reduce(rest, axis=1)
        log_msp = -lse
        log_not = lse_rest - lse
        yi = y[idx]
        total += float(-(yi * log_msp + (1.0 - yi) * log_not).sum())
    return total / y.size


def fit_temperature(records: Sequence[PredictionRecord]) -> tuple[Calibrator, FitDiagnostics]:
    """Fit T by minimizing the binary NLL of msp(softmax(logits / T)) against
    correctness of the predicted class. Golden-section over T in [0.05, 20]."""
    records = [r for r in records if r.task == "classification"]
    if not records:
        raise DeferralError("no classification records")
    if len(records) < 10:
        raise DeferralError("temperature scaling needs at least 10 records")
    y = _labels([r.label_correct for r in records])
    _check_labels(y)
    groups = _group_logits(records)

    t, it = golden_section(lambda t: _temperature_nll(groups, y, t), *T_BOUNDS, T_XTOL)
    h = 1e-5
    grad = (_temperature_nll(groups, y, t + h) - _temperature_nll(groups, y, t - h)) / (2 * h)
    obj = _temperature_nll(groups, y, t)
    diag = FitDiagnostics(
        iterations=it,
        objective=obj,
        gradient_norm=abs(grad),
        converged=abs(grad) <= T_XTOL,
        exit_reason="bracket tolerance",
        tolerance=T_XTOL,
    )
    digest = _digest(*[z for z, _ in groups], y)
    cal = Calibrator("temperature", RAW_LOGITS, {"temperature": t}, _fit_meta(y, digest))
    return cal, diag


# ---------------------------------------------------------------------- platt


def _platt_core(s, y, w, metric, kind, extra_params=None):
    s = np.asarray(s, dtype=float)
    if s.size != y.size:
        raise DeferralError("scores and labels differ in length")
    if s.size < 10:
        raise DeferralError(f"{kind} needs at least 10 score/label pairs")
    _check_labels(y)
    if np.all(s == s[0]):
        raise DeferralError("constant scores")
    X = np.column_stack([s, np.ones_like(s)])
    theta, diag = newton_logistic(X, y, w, tol=NEWTON_TOL, max_iter=PLATT_MAX_ITER)
    params = {"slope": float(theta[0]), "intercept": float(theta[1])}
    params.update(extra_params or {})
    meta = _fit_meta(y, _digest(s, y), metric=_spec_name(metric))
    return Calibrator(kind, _spec_name(metric), params, meta), diag


def fit_platt(scores, labels, metric: MetricId | str | None = None) -> tuple[Calibrator, FitDiagnostics]:
    y = _labels(labels)
    return _platt_core(scores, y, None, metric, "platt")


def resolve_neg_weight(labels, neg_weight: float | str = "auto") -> float:
    y = _labels(labels)
    if neg_weight == "auto":
        n_pos = y.sum()
        n_neg = y.size - n_pos
        if n_neg == 0:
            raise DeferralError("degenerate labels: all correct")
        return float(n_pos / n_neg)
    w = float(neg_weight)
    if not (w > 0 and math.isfinite(w)):
        raise DeferralError("neg_weight must be a positive finite number or 'auto'")
    return w


def fit_weighted_platt(
    scores, labels, neg_weight: float | str = "auto", metric: MetricId | str | None = None
) -> tuple[Calibrator, FitDiagnostics]:
    """Platt scaling whose loss multiplies every incorrect example by ``neg_weight``."""
    y = _labels(labels)
    _check_labels(y)
    nw = resolve_neg_weight(y, neg_weight)
    w = np.where(y > 0.5, 1.0, nw)
    return _platt_core(scores, y, w, metric, "weighted_platt", {"neg_weight": nw})


def weighted_platt_objective(slope, intercept, scores, labels, neg_weight) -> float:
    """Mean weighted logistic loss at (slope, intercept); used to verify optimality."""
    s = np.asarray(scores, dtype=float)
    y = _labels(labels)
    w = np.where(y > 0.5, 1.0, float(neg_weight))
    z = slope * s + intercept
    return float(np.dot(w, np.logaddexp(0.0, np.where(y > 0.5, -z, z))) / y.size)


# ------------------------------------------------------------------- isotonic


def fit_isotonic(scores, labels, metric: MetricId | str | None = None) -> Calibrator:
    s = np.asarray(scores, dtype=float)
    y = _labels(labels)
    if s.size != y.size:
        raise DeferralError("scores and labels differ in length")
    if s.size < 2:
        raise DeferralError("isotonic regression needs at least 2 pairs")
    _check_labels(y)
    kx, ky = fit_knots(s, y)
    params = {"knots_x": kx.tolist(), "knots_y": ky.tolist()}
    return Calibrator("isotonic", _spec_name(metric), params, _fit_meta(y, _digest(s, y), metric=_spec_name(metric)))


def isotonic_sse(c: Calibrator, scores, labels) -> float:
    pred = apply_to_scores(c, scores)
    return float(((pred - _labels(labels)) ** 2).sum())


# -------------------------------------------------------------- logit feature


def logit_features(logits: Sequence[float], k: int) -> np.ndarray:
    """Top-k logits (descending; padded with the smallest logit) followed by
    predictive entropy, logit margin and negative energy."""
    z = np.sort(np.asarray(logits, dtype=float))[::-1]
    top = z[:k] if z.size >= k else np.concatenate([z, np.full(k - z.size, z[-1])])
    m = classification_metrics(logits)
    return np.concatenate(
        [top, [m[MetricId.PREDICTIVE_ENTROPY], m[MetricId.LOGIT_MARGIN], m[MetricId.NEGATIVE_ENERGY]]]
    )


def fit_logit_feature(
    records: Sequence[PredictionRecord], lam: float = DEFAULT_LAMBDA
) -> tuple[Calibrator, FitDiagnostics]:
    """L2-regularized logistic correctness estimator on standardized logit features."""
    records = [r for r in records if r.task == "classification"]
    if len(records) < 20:
        raise DeferralError("logit-feature calibration needs at least 20 classification records")
    if not (lam >= 0 and math.isfinite(lam)):
        raise DeferralError("lambda must be a nonnegative finite number")
    y = _labels([r.label_correct for r in records])
    _check_labels(y)
    k = min(max(len(r.logits) for r in records), MAX_TOP_LOGITS)
    F = np.array([logit_features(r.logits, k) for r in records])
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd[sd == 0] = 1.0
    X = np.column_stack([(F - mu) / sd, np.ones(len(records))])
    l2 = np.concatenate([np.full(F.shape[1], lam), [0.0]])
    theta, diag = newton_logistic(X, y, l2=l2, tol=NEWTON_TOL, max_iter=LOGIT_FEATURE_MAX_ITER)
    params = {
        "weights": theta[:-1].tolist(),
        "intercept": float(theta[-1]),
        "lambda": float(lam),
        "k": int(k),
        "feature_mean": mu.tolist(),
        "feature_std": sd.tolist(),
    }
    return Calibrator("logit_feature", RAW_LOGITS, params, _fit_meta(y, _digest(F, y))), diag


# -------------------------------------------------------------- variance aware


def neg_dispersion(record: PredictionRecord) -> float:
    if record.n_samples < 2:
        raise DeferralError(f"record {record.id!r} lacks >= 2 samples")
    return -sampling_metrics(record.samples)[MetricId.SAMPLE_LOGPROB_DISPERSION]


def fit_variance_aware(records: Sequence[PredictionRecord]) -> Calibrator:
    """Isotonic map from -(dispersion of per-sample mean log-probs) to correctness."""
    if not records:
        raise DeferralError("no records")
    feats = np.array([neg_dispersion(r) for r in records])
    y = _labels([r.label_correct for r in records])
    _check_labels(y)
    kx, ky = fit_knots(feats, y)
    params = {"knots_x": kx.tolist(), "knots_y": ky.tolist()}
    meta = _fit_meta(y, _digest(feats, y))
    return Calibrator("variance_aware", SAMPLE_DISPERSION, params, meta)


# ---------------------------------------------------------------------- apply


def apply_to_scores(c: Calibrator, scores) -> np.ndarray:
    """Vectorized application for score-driven kinds (platt, weighted_platt,
    isotonic, variance_aware)."""
    s = np.asarray(scores, dtype=float)
    p = c.parameters
    if c.kind in ("platt", "weighted_platt"):
        return sigmoid(p["slope"] * s + p["intercept"])
    if c.kind in ("isotonic", "variance_aware"):
        return np.clip(interpolate(p["knots_x"], p["knots_y"], s), 0.0, 1.0)
    raise DeferralError(f"{c.kind} calibrator is not applied to scalar scores")


def temperature_msp(logits: Sequence[float], temperature: float) -> float:
    z = np.asarray(logits, dtype=float) / temperature
    return float(1.0 / np.exp(z - z.max()).sum())


def apply_calibrator(
    c: Calibrator, record: PredictionRecord, scores: UncertaintyScoreSet | None = None
) -> float:
    """Calibrated correctness probability for one record, always in [0, 1]."""
    p = c.parameters
    if c.kind == "temperature":
        if record.logits is None:
            raise DeferralError(f"record {record.id!r} has no logits")
        return temperature_msp(record.logits, p["temperature"])
    if c.kind == "logit_feature":
        if record.logits is None:
            raise DeferralError(f"record {record.id!r} has no logits")
        x = (logit_features(record.logits, p["k"]) - np.asarray(p["feature_mean"])) / np.asarray(
            p["feature_std"]
        )
        return float(sigmoid(np.array([np.dot(p["weights"], x) + p["intercept"]]))[0])
    if c.kind == "variance_aware":
        return float(apply_to_scores(c, [neg_dispersion(record)])[0])
    if c.input_spec == GENERIC_SCORE:
        raise DeferralError("calibrator was fitted on anonymous scores; use apply_to_scores")
    m = metric_id(c.input_spec)
    if scores is None or m not in scores.confidence:
        scores = score_record(record, [m])
    return float(apply_to_scores(c, [scores.confidence[m]])[0])


def apply_batch(c: Calibrator, records: Sequence[PredictionRecord]) -> np.ndarray:
    if c.kind in ("platt", "weighted_platt", "isotonic") and c.input_spec != GENERIC_SCORE:
        m = metric_id(c.input_spec)
        s = [score_record(r, [m]).confidence[m] for r in records]
        return apply_to_scores(c, s)
    return np.array([apply_calibrator(c, r) for r in records], dtype=float)


def input_scores(records: Sequence[PredictionRecord], metric: MetricId | str) -> np.ndarray:
    m = metric_id(metric)
    return np.array([score_record(r, [m]).confidence[m] for r in records], dtype=float)


# ------------------------------------------------------------------------- io


def _check_calibrator(c: Calibrator) -> None:
    p = c.parameters
    if c.kind not in KINDS:
        raise DeferralError(f"unknown calibrator kind {c.kind!r}")
    try:
        if c.kind == "temperature":
            if not p["temperature"] > 0:
                raise DeferralError("temperature must be positive")
        elif c.kind in ("platt", "weighted_platt"):
            float(p["slope"]), float(p["intercept"])
        elif c.kind in ("isotonic", "variance_aware"):
            kx, ky = np.asarray(p["knots_x"], float), np.asarray(p["knots_y"], float)
            if kx.size == 0 or kx.size != ky.size:
                raise DeferralError("knot lists empty or of unequal length")
            if np.any(np.diff(kx) <= 0) or np.any(np.diff(ky) < 0):
                raise DeferralError("knots not monotone")
            if np.any(ky < 0) or np.any(ky > 1):
                raise DeferralError("knot probabilities outside [0, 1]")
        elif c.kind == "logit_feature":
            d = p["k"] + 3
            if not (len(p["weights"]) == len(p["feature_mean"]) == len(p["feature_std"]) == d):
                raise DeferralError("logit_feature weight length does not match feature length")
            float(p["intercept"])
    except (KeyError, TypeError) as exc:
        raise DeferralError(f"malformed {c.kind} parameters: {exc}") from None


def calibrator_from_dict(d: dict[str, Any]) -> Calibrator:
    if not isinstance(d, dict):
        raise DeferralError("calibrator file must hold a JSON object")
    if d.get("version") != CALIBRATOR_VERSION:
        raise DeferralError(f"unsupported calibrator version {d.get('version')!r}")
    for key in ("kind", "input_spec", "parameters", "fit_meta"):
        if key not in d:
            raise DeferralError(f"calibrator file missing field {key!r}")
    c = Calibrator(d["kind"], d["input_spec"], d["parameters"], d["fit_meta"])
    _check_calibrator(c)
    return c


def dumps_calibrator(c: Calibrator) -> str:
    # float repr is the shortest string that round-trips to the same double
    return json.dumps(c.to_dict(), indent=2, allow_nan=False) + "\n"


def save_calibrator(c: Calibrator, path: str | Path) -> None:
    _check_calibrator(c)
    atomic_write_text(path, dumps_calibrator(c))


def load_calibrator(path: str | Path) -> Calibrator:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DeferralError(f"{path}: malformed calibrator file: {exc}") from None
    return calibrator_from_dict(d)
