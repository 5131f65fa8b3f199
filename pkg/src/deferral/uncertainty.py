"""Uncertainty metrics over logits, token log-probs and repeated samples.

Every metric has a raw value and a confidence-oriented value (raw times the
metric's orientation sign), so that a higher confidence always means "more
likely correct".

Classification (from logits):
    msp, predictive_entropy, softmax_margin, logit_margin, negative_energy,
    least_confidence
Generation (from the token log-probs of the emitted sequence):
    mean_token_logprob, sum_token_logprob, perplexity, min_token_prob,
    token_logprob_variance, low_conf_token_ratio
Sampling (from K >= 2 repeated samples):
    sample_agreement, sample_entropy, sample_logprob_dispersion,
    pairwise_match_rate
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from deferral.errors import DeferralError
from deferral.prediction_log import PredictionRecord, SampleRecord

DEFAULT_TAU = 0.5
ALL_APPLICABLE = "all-applicable"


class MetricId(str, Enum):
    MSP = "msp"
    PREDICTIVE_ENTROPY = "predictive_entropy"
    SOFTMAX_MARGIN = "softmax_margin"
    LOGIT_MARGIN = "logit_margin"
    NEGATIVE_ENERGY = "negative_energy"
    LEAST_CONFIDENCE = "least_confidence"
    MEAN_TOKEN_LOGPROB = "mean_token_logprob"
    SUM_TOKEN_LOGPROB = "sum_token_logprob"
    PERPLEXITY = "perplexity"
    MIN_TOKEN_PROB = "min_token_prob"
    TOKEN_LOGPROB_VARIANCE = "token_logprob_variance"
    LOW_CONF_TOKEN_RATIO = "low_conf_token_ratio"
    SAMPLE_AGREEMENT = "sample_agreement"
    SAMPLE_ENTROPY = "sample_entropy"
    SAMPLE_LOGPROB_DISPERSION = "sample_logprob_dispersion"
    PAIRWISE_MATCH_RATE = "pairwise_match_rate"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class MetricInfo:
    family: str  # "classification" | "generation" | "sampling"
    orientation: int  # +1: higher raw = more confident, -1: lower raw = more confident

    @property
    def tasks(self) -> tuple[str, ...]:
        if self.family == "sampling":
            return ("classification", "generation")
        return (self.family,)

    @property
    def requires_samples(self) -> bool:
        return self.family == "sampling"


_C, _G, _S = "classification", "generation", "sampling"
METRICS: dict[MetricId, MetricInfo] = {
    MetricId.MSP: MetricInfo(_C, +1),
    MetricId.PREDICTIVE_ENTROPY: MetricInfo(_C, -1),
    MetricId.SOFTMAX_MARGIN: MetricInfo(_C, +1),
    MetricId.LOGIT_MARGIN: MetricInfo(_C, +1),
    MetricId.NEGATIVE_ENERGY: MetricInfo(_C, +1),
    MetricId.LEAST_CONFIDENCE: MetricInfo(_C, -1),
    MetricId.MEAN_TOKEN_LOGPROB: MetricInfo(_G, +1),
    MetricId.SUM_TOKEN_LOGPROB: MetricInfo(_G, +1),
    MetricId.PERPLEXITY: MetricInfo(_G, -1),
    MetricId.MIN_TOKEN_PROB: MetricInfo(_G, +1),
    MetricId.TOKEN_LOGPROB_VARIANCE: MetricInfo(_G, -1),
    MetricId.LOW_CONF_TOKEN_RATIO: MetricInfo(_G, -1),
    MetricId.SAMPLE_AGREEMENT: MetricInfo(_S, +1),
    MetricId.SAMPLE_ENTROPY: MetricInfo(_S, -1),
    MetricId.SAMPLE_LOGPROB_DISPERSION: MetricInfo(_S, -1),
    MetricId.PAIRWISE_MATCH_RATE: MetricInfo(_S, +1),
}


def metric_id(name: str | MetricId) -> MetricId:
    try:
        return MetricId(name)
    except ValueError:
        raise DeferralError(f"unknown metric {name!r}") from None


@dataclass(frozen=True)
class UncertaintyScoreSet:
    record_id: str
    raw: dict[MetricId, float]
    confidence: dict[MetricId, float]

    def to_dict(self) -> dict:
        return {
            "raw": {str(m): v for m, v in self.raw.items()},
            "confidence": {str(m): v for m, v in self.confidence.items()},
        }


def softmax(logits: Sequence[float]) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    if z.ndim != 1 or z.size < 2:
        raise DeferralError("softmax needs at least 2 logits")
    if not np.all(np.isfinite(z)):
        raise DeferralError("softmax input must be finite")
    e = np.exp(z - z.max())
    return e / e.sum()


def logsumexp(logits: Sequence[float]) -> float:
    z = np.asarray(logits, dtype=float)
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()))


def classification_metrics(logits: Sequence[float]) -> dict[MetricId, float]:
    p = softmax(logits)
    z = np.sort(np.asarray(logits, dtype=float))[::-1]
    ps = np.sort(p)[::-1]
    nz = p[p > 0]
    msp = float(ps[0])
    return {
        MetricId.MSP: msp,
        MetricId.PREDICTIVE_ENTROPY: float(-(nz * np.log(nz)).sum()),
        MetricId.SOFTMAX_MARGIN: float(ps[0] - ps[1]),
        MetricId.LOGIT_MARGIN: float(z[0] - z[1]),
        MetricId.NEGATIVE_ENERGY: logsumexp(logits),
        MetricId.LEAST_CONFIDENCE: 1.0 - msp,
    }


def generation_metrics(token_logprobs: Sequence[float], tau: float = DEFAULT_TAU) -> dict[MetricId, float]:
    lp = np.asarray(token_logprobs, dtype=float)
    if lp.size == 0:
        raise DeferralError("generation metrics need at least one token")
    mean = float(lp.mean())
    return {
        MetricId.MEAN_TOKEN_LOGPROB: mean,
        MetricId.SUM_TOKEN_LOGPROB: float(lp.sum()),
        MetricId.PERPLEXITY: math.exp(-mean),
        MetricId.MIN_TOKEN_PROB: math.exp(float(lp.min())),
        MetricId.TOKEN_LOGPROB_VARIANCE: float(lp.var()),
        MetricId.LOW_CONF_TOKEN_RATIO: float((np.exp(lp) < tau).mean()),
    }


def sampling_metrics(samples: Sequence[SampleRecord]) -> dict[MetricId, float]:
    k = len(samples)
    if k < 2:
        raise DeferralError(f"sampling metrics need K >= 2 samples, got {k}")
    counts = Counter(s.output_key for s in samples)
    freqs = np.array(sorted(counts.values(), reverse=True), dtype=float) / k
    matching_pairs = sum(c * (c - 1) // 2 for c in counts.values())
    per_sample_mean = np.array([np.mean(s.token_logprobs) for s in samples])
    return {
        MetricId.SAMPLE_AGREEMENT: float(freqs[0]),
        MetricId.SAMPLE_ENTROPY: float(-(freqs * np.log(freqs)).sum()),
        MetricId.SAMPLE_LOGPROB_DISPERSION: float(per_sample_mean.std()),
        MetricId.PAIRWISE_MATCH_RATE: matching_pairs / (k * (k - 1) / 2),
    }


def applicable_metrics(record: PredictionRecord) -> list[MetricId]:
    return [
        m
        for m, info in METRICS.items()
        if record.task in info.tasks and (not info.requires_samples or record.n_samples >= 2)
    ]


def to_confidence(metric: MetricId, raw: float) -> float:
    return METRICS[metric].orientation * raw


def score_record(
    record: PredictionRecord,
    metrics: Iterable[MetricId | str] | str = ALL_APPLICABLE,
    tau: float = DEFAULT_TAU,
) -> UncertaintyScoreSet:
    """Compute the requested metrics for one record.

    ``metrics`` is either an explicit collection (inapplicable members raise)
    or the string ``"all-applicable"``.
    """
    if isinstance(metrics, str) and metrics == ALL_APPLICABLE:
        wanted = applicable_metrics(record)
    else:
        wanted = [metric_id(m) for m in metrics]
        for m in wanted:
            info = METRICS[m]
            if record.task not in info.tasks:
                raise DeferralError(f"metric {m} inapplicable to {record.task}")
            if info.requires_samples and record.n_samples < 2:
                raise DeferralError(f"metric {m} requires >= 2 samples (record {record.id!r})")

    families = {METRICS[m].family for m in wanted}
    computed: dict[MetricId, float] = {}
    if "classification" in families:
        computed.update(classification_metrics(record.logits))
    if "generation" in families:
        computed.update(generation_metrics(record.token_logprobs, tau))
    if "sampling" in families:
        computed.update(sampling_metrics(record.samples))

    # keep canonical metric order regardless of request order
    ordered = [m for m in METRICS if m in set(wanted)]
    raw = {m: computed[m] for m in ordered}
    conf = {m: to_confidence(m, v) for m, v in raw.items()}
    return UncertaintyScoreSet(record.id, raw, conf)


def base_probability(record: PredictionRecord) -> float:
    """Uncalibrated correctness probability read directly off the model output.

    Classification: max softmax probability. Generation: geometric-mean token
    probability, exp(mean token log-prob).
    """
    if record.task == "classification":
        return float(softmax(record.logits).max())
    return math.exp(float(np.mean(record.token_logprobs)))
