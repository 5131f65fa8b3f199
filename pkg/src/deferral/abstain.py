"""Accept/abstain policies fitted on a calibration split.

A record is accepted iff its calibrated probability >= threshold (ties accept).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from deferral.errors import DeferralError
from deferral.eval_metrics import n_covered

log = logging.getLogger(__name__)

MODES = ("coverage", "risk", "threshold")


@dataclass(frozen=True)
class PolicySpec:
    mode: str
    target: float

    def __post_init__(self):
        if self.mode not in MODES:
            raise DeferralError(f"unknown policy mode {self.mode!r}")
        t = self.target
        ok = {
            "coverage": 0.0 < t <= 1.0,
            "risk": 0.0 <= t < 1.0,
            "threshold": 0.0 <= t <= 1.0,
        }[self.mode]
        if not ok:
            raise DeferralError(f"target {t} out of range for {self.mode} policy")

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        """Parse ``coverage:0.8``, ``risk:0.05`` or ``threshold:0.7``."""
        mode, sep, value = text.partition(":")
        if not sep:
            raise DeferralError(f"policy must look like mode:value, got {text!r}")
        try:
            target = float(value)
        except ValueError:
            raise DeferralError(f"policy target {value!r} is not a number") from None
        return cls(mode.strip(), target)

    def __str__(self) -> str:
        return f"{self.mode}:{self.target:g}"


@dataclass(frozen=True)
class FittedPolicy:
    spec: PolicySpec
    threshold: float
    fitted_on_digest: str
    fitted_on_size: int
    achieved_calibration_coverage: float
    # unattainable risk target: abstain on every record, even probability 1.0
    abstain_all: bool = False

    def accepts(self, probability: float) -> bool:
        return not self.abstain_all and probability >= self.threshold

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.spec.mode,
            "target": self.spec.target,
            "threshold": self.threshold,
            "abstain_all": self.abstain_all,
            "fitted_on": {"digest": self.fitted_on_digest, "size": self.fitted_on_size},
            "achieved_calibration_coverage": self.achieved_calibration_coverage,
        }


@dataclass(frozen=True)
class Decision:
    record_id: str
    calibrated_probability: float
    action: str  # "accept" | "abstain"

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.record_id, "probability": self.calibrated_probability, "action": self.action}


def _digest(p: np.ndarray, y: np.ndarray | None) -> str:
    h = hashlib.sha256(np.ascontiguousarray(p, dtype=float).tobytes())
    if y is not None:
        h.update(np.ascontiguousarray(y, dtype=bool).tobytes())
    return h.hexdigest()


def fit_policy(probs, labels, spec: PolicySpec) -> FittedPolicy:
    p = np.asarray(probs, dtype=float)
    if p.size == 0:
        raise DeferralError("empty calibration set")
    y = None if labels is None else np.asarray(labels, dtype=bool)
    if y is not None and y.shape != p.shape:
        raise DeferralError("probabilities and labels differ in length")
    abstain_all = False

    if spec.mode == "threshold":
        threshold = spec.target
    elif spec.mode == "coverage":
        k = n_covered(spec.target, p.size)
        threshold = float(np.sort(p)[::-1][k - 1])
    else:
        if y is None or y.all() or not y.any():
            raise DeferralError("risk policy needs both correct and incorrect calibration records")
        order = np.argsort(-p, kind="mergesort")
        ps, ys = p[order], y[order]
        errors = np.cumsum(~ys)
        ends = np.flatnonzero(np.append(ps[1:] != ps[:-1], True))
        risks = errors[ends] / (ends + 1)
        ok = np.flatnonzero(risks <= spec.target)
        if ok.size:
            threshold = float(ps[ends[ok[-1]]])
        else:
            log.warning("risk target %g unattainable on calibration split; abstaining on all", spec.target)
            threshold = 1.0
            abstain_all = True

    achieved = 0.0 if abstain_all else float((p >= threshold).mean())
    return FittedPolicy(spec, float(threshold), _digest(p, y), int(p.size), achieved, abstain_all)


def decide_batch(
    policy: FittedPolicy, ids: Sequence[str], probs: Sequence[float | None]
) -> tuple[list[Decision], float]:
    if len(ids) != len(probs):
        raise DeferralError("ids and probabilities differ in length")
    decisions = []
    for rid, prob in zip(ids, probs):
        if prob is None:
            raise DeferralError(f"record {rid!r} has no calibrated probability")
        prob = float(prob)
        decisions.append(Decision(rid, prob, "accept" if policy.accepts(prob) else "abstain"))
    coverage = sum(d.action == "accept" for d in decisions) / len(decisions) if decisions else 0.0
    return decisions, coverage
