"""Seeded synthetic generators whose ground truth is known by construction.

These back the parameter-recovery and directional tests and produce the
fixture logs shipped with the test suite.
"""

from __future__ import annotations

import math

import numpy as np

from deferral.prediction_log import Dataset, PredictionRecord, SampleRecord
from deferral.solvers import sigmoid


def platt_scores(n: int, seed: int, slope: float = 2.0, intercept: float = -1.0):
    """s ~ U[-3, 3]; correct ~ Bernoulli(sigmoid(slope * s + intercept))."""
    rng = np.random.default_rng(seed)
    s = rng.uniform(-3.0, 3.0, n)
    y = rng.random(n) < sigmoid(slope * s + intercept)
    return s, y


def calibrated_stream(n: int, seed: int):
    """p ~ U[0, 1]; correct ~ Bernoulli(p). Perfectly calibrated."""
    rng = np.random.default_rng(seed)
    p = rng.random(n)
    return p, rng.random(n) < p


def overconfident_scores(n: int, seed: int):
    """Confidence s ~ Beta(5, 2); correct ~ Bernoulli(0.55 s + 0.2)."""
    rng = np.random.default_rng(seed)
    s = rng.beta(5.0, 2.0, n)
    return s, rng.random(n) < 0.55 * s + 0.2


def temperature_logits(n: int, seed: int, n_classes: int = 5, temperature: float = 2.0):
    """Standard-normal logits; the true class is drawn from softmax(logits / T*),
    so the argmax is correct with probability msp(logits / T*)."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, n_classes))
    e = np.exp((z - z.max(axis=1, keepdims=True)) / temperature)
    p = e / e.sum(axis=1, keepdims=True)
    u = rng.random(n)[:, None]
    true_class = (u > np.cumsum(p, axis=1)).sum(axis=1)
    true_class = np.minimum(true_class, n_classes - 1)
    return z, true_class == z.argmax(axis=1)


def classification_records(logits, correct, prefix: str = "c") -> list[PredictionRecord]:
    width = len(str(len(logits) - 1))
    return [
        PredictionRecord(
            id=f"{prefix}{i:0{width}d}",
            task="classification",
            logits=tuple(float(v) for v in row),
            predicted_class=int(np.argmax(row)),
            label_correct=bool(y),
        )
        for i, (row, y) in enumerate(zip(logits, correct))
    ]


def energy_separated_logits(n: int, seed: int, n_classes: int = 5, shift: float = 4.0):
    """Two Gaussian logit clusters with the same softmax shape distribution.

    Incorrect records have every logit shifted by ``shift``, which leaves the
    softmax (and msp) unchanged but moves the raw logits and their energy.
    Correctness is Bernoulli(0.5) independent of msp.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, n_classes))
    z[:, 0] += 1.5
    correct = rng.random(n) < 0.5
    z[~correct] += shift
    return z, correct


def _tokens_with_mean(mean_lp: float, length: int, spread: float, rng) -> tuple[float, ...]:
    """Token log-probs (all <= 0) whose arithmetic mean equals ``mean_lp``."""
    half = length // 2
    d = spread * abs(mean_lp) * rng.random()
    lps = [mean_lp - d] * half + [mean_lp + d] * half
    if length % 2:
        lps.append(mean_lp)
    return tuple(min(0.0, v) for v in lps)


def overconfident_generation_log(n: int, seed: int, n_samples: int = 0, prefix: str = "g") -> Dataset:
    """Generation records whose geometric-mean token probability is the
    overconfident score s ~ Beta(5, 2), with correct ~ Bernoulli(0.55 s + 0.2).

    With ``n_samples`` >= 2 each record also carries repeated samples whose
    agreement and log-prob dispersion track correctness.
    """
    s, y = overconfident_scores(n, seed)
    rng = np.random.default_rng(seed + 1)
    width = len(str(n - 1))
    records = []
    for i in range(n):
        mean_lp = math.log(s[i])
        length = int(rng.integers(4, 13))
        samples = None
        if n_samples >= 2:
            spread = 0.05 if y[i] else 0.4
            keys = ["a" if (y[i] or rng.random() < 0.4) else f"b{int(rng.integers(3))}" for _ in range(n_samples)]
            samples = tuple(
                SampleRecord(
                    _tokens_with_mean(min(-1e-3, mean_lp + spread * rng.standard_normal()), 4, 0.5, rng),
                    key,
                )
                for key in keys
            )
        records.append(
            PredictionRecord(
                id=f"{prefix}{i:0{width}d}",
                task="generation",
                token_logprobs=_tokens_with_mean(mean_lp, length, 0.5, rng),
                samples=samples,
                label_correct=bool(y[i]),
            )
        )
    return Dataset(tuple(records))


def fixture_log(n_classification: int = 120, n_generation: int = 120, seed: int = 0) -> Dataset:
    """Mixed-task log for end-to-end pipeline runs."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_classification, 4)) * 1.5
    z[:, 0] += rng.uniform(0.0, 2.5, n_classification)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    # overconfident classifier: true accuracy is a squashed msp
    correct = rng.random(n_classification) < 0.3 + 0.5 * p.max(axis=1)
    cls = classification_records(np.round(z, 6), correct, prefix="cls-")
    gen = overconfident_generation_log(n_generation, seed + 7, n_samples=4, prefix="gen-").records
    failure_modes = ["missing_task_info", "missing_knowledge", "capability_gap"]
    out = []
    for i, r in enumerate(list(cls) + list(gen)):
        meta = {"failure_mode": failure_modes[i % 3]} if r.task == "generation" else {}
        out.append(
            PredictionRecord(
                id=r.id,
                task=r.task,
                logits=r.logits,
                predicted_class=r.predicted_class,
                token_logprobs=r.token_logprobs,
                samples=r.samples,
                label_correct=r.label_correct,
                meta=meta,
            )
        )
    return Dataset(tuple(out))
