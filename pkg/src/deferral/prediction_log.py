"""Prediction log records: JSONL schema, parsing, validation and splitting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from deferral.errors import DeferralError

TASKS = ("classification", "generation")
SPLITS = ("calibration", "evaluation")
HEADER_ID = "__header__"
SCHEMA_VERSION = 1

_FIELDS = (
    "id",
    "task",
    "split",
    "logits",
    "predicted_class",
    "token_logprobs",
    "samples",
    "label_correct",
    "meta",
)
# Written by `deferral score`; accepted on input and ignored (scores are recomputed).
_PASSTHROUGH = ("uncertainty",)


class LogFormatError(DeferralError):
    """A prediction log line violates the record schema."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


@dataclass(frozen=True)
class SampleRecord:
    token_logprobs: tuple[float, ...]
    output_key: str


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    task: str
    label_correct: bool
    split: str | None = None
    logits: tuple[float, ...] | None = None
    predicted_class: int | None = None
    token_logprobs: tuple[float, ...] | None = None
    samples: tuple[SampleRecord, ...] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.samples) if self.samples else 0


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of records with an optional split."""

    records: tuple[PredictionRecord, ...]

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DeferralError(f"duplicate id {r.id!r}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def calibration_ids(self) -> frozenset[str]:
        return frozenset(r.id for r in self.records if r.split == "calibration")

    @property
    def evaluation_ids(self) -> frozenset[str]:
        return frozenset(r.id for r in self.records if r.split == "evaluation")

    @property
    def is_split(self) -> bool:
        return all(r.split is not None for r in self.records)

    def subset(self, split: str | None = None, task: str | None = None) -> list[PredictionRecord]:
        return [
            r
            for r in self.records
            if (split is None or r.split == split) and (task is None or r.task == task)
        ]

    def require_splits(self) -> None:
        if not self.is_split:
            raise DeferralError("dataset has no calibration/evaluation split")
        if not self.calibration_ids or not self.evaluation_ids:
            raise DeferralError("both calibration and evaluation splits must be nonempty")


@dataclass
class ValidationReport:
    n_records: int
    counts: dict[str, dict[str, int]]
    label_balance: float | None
    sample_availability: float | None
    violations: list[str]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_records": self.n_records,
            "counts": self.counts,
            "label_balance": self.label_balance,
            "sample_availability": self.sample_availability,
            "violations": list(self.violations),
            "warnings": list(self.warnings),
        }


def _reject_constant(name: str):
    raise ValueError(f"non-finite literal {name} not allowed")


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _real_list(value, name: str, line: int | None, nonpositive: bool = False) -> tuple[float, ...]:
    if not isinstance(value, list):
        raise LogFormatError("expected a list of numbers", name, line)
    out = []
    for i, x in enumerate(value):
        if not _is_number(x):
            raise LogFormatError(f"{name}[{i}] is not a number", f"{name}[{i}]", line)
        x = float(x)
        if not math.isfinite(x):
            raise LogFormatError(f"{name}[{i}] is not finite", f"{name}[{i}]", line)
        if nonpositive and x > 0:
            raise LogFormatError(f"{name}[{i}] > 0", f"{name}[{i}]", line)
        out.append(x)
    return tuple(out)


def record_violations(record: PredictionRecord) -> list[tuple[str, str]]:
    """Return every invariant violation of a record as (field, message) pairs."""
    v: list[tuple[str, str]] = []
    if not isinstance(record.id, str) or not record.id:
        v.append(("id", "id must be nonempty text"))
    elif record.id == HEADER_ID:
        v.append(("id", f"id {HEADER_ID!r} is reserved"))
    if record.task not in TASKS:
        v.append(("task", f"task must be one of {list(TASKS)}"))
    if record.split is not None and record.split not in SPLITS:
        v.append(("split", f"split must be one of {list(SPLITS)}"))
    if not isinstance(record.label_correct, bool):
        v.append(("label_correct", "label_correct must be a boolean"))

    if record.task == "classification":
        if record.logits is None:
            v.append(("logits", "logits required for task=classification"))
        if record.token_logprobs is not None:
            v.append(("token_logprobs", "token_logprobs not allowed for task=classification"))
    elif record.task == "generation":
        if record.token_logprobs is None:
            v.append(("token_logprobs", "token_logprobs required for task=generation"))
        if record.logits is not None:
            v.append(("logits", "logits not allowed for task=generation"))
        if record.predicted_class is not None:
            v.append(("predicted_class", "predicted_class not allowed for task=generation"))

    if record.logits is not None:
        if len(record.logits) < 2:
            v.append(("logits", "C < 2"))
        for i, x in enumerate(record.logits):
            if not math.isfinite(x):
                v.append((f"logits[{i}]", f"logits[{i}] is not finite"))
        if record.predicted_class is not None and not (0 <= record.predicted_class < len(record.logits)):
            v.append(("predicted_class", "predicted_class out of range [0, C)"))
    if record.token_logprobs is not None:
        if len(record.token_logprobs) < 1:
            v.append(("token_logprobs", "T < 1"))
        v.extend(_logprob_violations(record.token_logprobs, "token_logprobs"))
    if record.samples is not None:
        if len(record.samples) < 2:
            v.append(("samples", "K < 2"))
        for k, s in enumerate(record.samples):
            name = f"samples[{k}]"
            if not s.token_logprobs:
                v.append((f"{name}.token_logprobs", "sample token_logprobs empty"))
            v.extend(_logprob_violations(s.token_logprobs, f"{name}.token_logprobs"))
            if not isinstance(s.output_key, str) or not s.output_key:
                v.append((f"{name}.output_key", "output_key must be nonempty text"))
    return v


def _logprob_violations(lps, name):
    v = []
    for i, x in enumerate(lps):
        if not math.isfinite(x):
            v.append((f"{name}[{i}]", f"{name}[{i}] is not finite"))
        elif x > 0:
            v.append((f"{name}[{i}]", f"{name}[{i}] > 0"))
    return v


def _loads(line: str, lineno: int | None) -> dict:
    try:
        obj = json.loads(line, parse_constant=_reject_constant)
    except ValueError as exc:
        raise LogFormatError(f"malformed JSON: {exc}", None, lineno) from None
    if not isinstance(obj, dict):
        raise LogFormatError("record must be a JSON object", None, lineno)
    return obj


def parse_record(line: str, lineno: int | None = None) -> PredictionRecord:
    """Parse and fully validate one JSONL record."""
    obj = _loads(line, lineno)
    unknown = sorted(set(obj) - set(_FIELDS) - set(_PASSTHROUGH))
    if unknown:
        raise LogFormatError(f"unknown field {unknown[0]!r}", unknown[0], lineno)
    for key in ("id", "task", "label_correct"):
        if key not in obj:
            raise LogFormatError(f"missing required field {key!r}", key, lineno)
    if not isinstance(obj["id"], str):
        raise LogFormatError("id must be text", "id", lineno)
    if not isinstance(obj["label_correct"], bool):
        raise LogFormatError("label_correct must be a boolean", "label_correct", lineno)

    logits = None
    if obj.get("logits") is not None:
        logits = _real_list(obj["logits"], "logits", lineno)
    token_logprobs = None
    if obj.get("token_logprobs") is not None:
        token_logprobs = _real_list(obj["token_logprobs"], "token_logprobs", lineno, nonpositive=True)

    predicted_class = obj.get("predicted_class")
    if predicted_class is not None and (
        not isinstance(predicted_class, int) or isinstance(predicted_class, bool)
    ):
        raise LogFormatError("predicted_class must be an integer", "predicted_class", lineno)

    samples = None
    if obj.get("samples") is not None:
        if not isinstance(obj["samples"], list):
            raise LogFormatError("samples must be a list", "samples", lineno)
        parsed = []
        for k, s in enumerate(obj["samples"]):
            name = f"samples[{k}]"
            if not isinstance(s, dict) or "token_logprobs" not in s or "output_key" not in s:
                raise LogFormatError("sample needs token_logprobs and output_key", name, lineno)
            lps = _real_list(s["token_logprobs"], f"{name}.token_logprobs", lineno, nonpositive=True)
            parsed.append(SampleRecord(lps, s["output_key"]))
        samples = tuple(parsed)

    meta = obj.get("meta") or {}
    if not isinstance(meta, dict):
        raise LogFormatError("meta must be an object", "meta", lineno)

    record = PredictionRecord(
        id=obj["id"],
        task=obj["task"],
        split=obj.get("split"),
        logits=logits,
        predicted_class=predicted_class,
        token_logprobs=token_logprobs,
        samples=samples,
        label_correct=obj["label_correct"],
        meta=meta,
    )
    problems = record_violations(record)
    if problems:
        fld, msg = problems[0]
        raise LogFormatError(msg, fld, lineno)
    if record.task == "classification" and record.predicted_class is None:
        # np.argmax returns the first maximal index
        record = replace(record, predicted_class=int(np.argmax(record.logits)))
    return record


def record_to_dict(record: PredictionRecord) -> dict[str, Any]:
    out: dict[str, Any] = {"id": record.id, "task": record.task}
    if record.split is not None:
        out["split"] = record.split
    if record.logits is not None:
        out["logits"] = list(record.logits)
    if record.predicted_class is not None:
        out["predicted_class"] = record.predicted_class
    if record.token_logprobs is not None:
        out["token_logprobs"] = list(record.token_logprobs)
    if record.samples is not None:
        out["samples"] = [
            {"token_logprobs": list(s.token_logprobs), "output_key": s.output_key}
            for s in record.samples
        ]
    out["label_correct"] = record.label_correct
    if record.meta:
        out["meta"] = record.meta
    return out


def serialize_record(record: PredictionRecord, **extra) -> str:
    d = record_to_dict(record)
    d.update(extra)
    return json.dumps(d, allow_nan=False, sort_keys=False)


def header_line() -> str:
    return json.dumps({"id": HEADER_ID, "version": SCHEMA_VERSION})


def iter_lines(path: str | Path) -> Iterable[tuple[int, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def load_log(path: str | Path) -> Dataset:
    """Read a JSONL prediction log, preserving file order."""
    records: list[PredictionRecord] = []
    first_line: dict[str, int] = {}
    for lineno, line in iter_lines(path):
        if not records and not first_line and HEADER_ID in line:
            obj = _loads(line, lineno)
            if obj.get("id") == HEADER_ID:
                if obj.get("version") != SCHEMA_VERSION:
                    raise LogFormatError(
                        f"unsupported schema version {obj.get('version')!r}", "version", lineno
                    )
                first_line[HEADER_ID] = lineno
                continue
        rec = parse_record(line, lineno)
        if rec.id in first_line:
            raise LogFormatError(
                f"duplicate id {rec.id!r} (lines {first_line[rec.id]} and {lineno})", "id", lineno
            )
        first_line[rec.id] = lineno
        records.append(rec)
    if not records:
        raise LogFormatError("empty dataset")
    with_split = sum(r.split is not None for r in records)
    if 0 < with_split < len(records):
        raise LogFormatError("some records carry a split field and others do not", "split")
    return Dataset(tuple(records))


def write_log(dataset: Dataset | Iterable[PredictionRecord], fh) -> None:
    fh.write(header_line() + "\n")
    for r in dataset:
        fh.write(serialize_record(r) + "\n")


def assign_splits(dataset: Dataset, calibration_fraction: float, seed: int) -> Dataset:
    """Deterministically partition an unsplit dataset into calibration/evaluation."""
    if not (0.0 < calibration_fraction < 1.0):
        raise DeferralError("calibration_fraction must lie in (0, 1)")
    if any(r.split is not None for r in dataset):
        raise DeferralError("records already carry split fields")
    n = len(dataset)
    if n < 2:
        raise DeferralError("need at least 2 records to split")
    n_cal = int(math.floor(calibration_fraction * n + 0.5))
    n_cal = min(max(n_cal, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    cal = set(perm[:n_cal].tolist())
    return Dataset(
        tuple(
            replace(r, split="calibration" if i in cal else "evaluation")
            for i, r in enumerate(dataset.records)
        )
    )


def validate_dataset(dataset: Dataset | Iterable[PredictionRecord]) -> ValidationReport:
    records = list(dataset)
    counts: dict[str, dict[str, int]] = {}
    violations: list[str] = []
    warnings: list[str] = []
    seen: dict[str, int] = {}
    for i, r in enumerate(records):
        split = r.split or "unsplit"
        counts.setdefault(r.task, {}).setdefault(split, 0)
        counts[r.task][split] += 1
        for fld, msg in record_violations(r):
            violations.append(f"record {r.id!r} field '{fld}': {msg}")
        if r.id in seen:
            violations.append(f"record {r.id!r}: duplicate id (positions {seen[r.id]} and {i})")
        seen.setdefault(r.id, i)

    n = len(records)
    label_balance = None
    sample_availability = None
    if n:
        n_correct = sum(bool(r.label_correct) for r in records)
        label_balance = n_correct / n
        sample_availability = sum(r.n_samples >= 2 for r in records) / n
        if n_correct == n:
            warnings.append("degenerate labels: all correct")
        elif n_correct == 0:
            warnings.append("degenerate labels: all incorrect")
    else:
        warnings.append("empty dataset")
    return ValidationReport(
        n_records=n,
        counts={t: dict(sorted(c.items())) for t, c in sorted(counts.items())},
        label_balance=label_balance,
        sample_availability=sample_availability,
        violations=violations,
        warnings=warnings,
    )
