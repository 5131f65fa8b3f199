"""Command-line entry point: validate, score, fit, apply, eval, decide, recover, report.

Exit codes: 0 success, 1 input or validation error, 2 internal invariant breach.
Every file output is written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from deferral import __version__
from deferral._io import atomic_write_text
from deferral.abstain import Decision, PolicySpec, decide_batch, fit_policy
from deferral.calibrate import (
    DEFAULT_LAMBDA,
    Calibrator,
    apply_calibrator,
    fit_isotonic,
    fit_logit_feature,
    fit_platt,
    fit_temperature,
    fit_variance_aware,
    fit_weighted_platt,
    input_scores,
    isotonic_sse,
    load_calibrator,
    neg_dispersion,
    save_calibrator,
)
from deferral.errors import DeferralError, InvariantError
from deferral.eval_metrics import DEFAULT_BINS, DEFAULT_COVERAGES, SCHEMES, build_report, render
from deferral.prediction_log import (
    Dataset,
    LogFormatError,
    assign_splits,
    header_line,
    iter_lines,
    load_log,
    parse_record,
    serialize_record,
    validate_dataset,
)
from deferral.recover import load_registry, recover_batch
from deferral.solvers import FitDiagnostics
from deferral.uncertainty import (
    ALL_APPLICABLE,
    DEFAULT_TAU,
    METRICS,
    MetricId,
    base_probability,
    metric_id,
    score_record,
)

log = logging.getLogger("deferral")

METHODS = ("temperature", "platt", "weighted_platt", "isotonic", "logit_feature", "variance_aware")
SPLIT_CHOICES = ("calibration", "evaluation", "all")


def _emit(text: str, output: str | None) -> None:
    if output:
        atomic_write_text(output, text)
    else:
        sys.stdout.write(text)


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, allow_nan=False) + "\n" for r in rows)


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    for lineno, line in iter_lines(path):
        try:
            rows.append(json.loads(line))
        except ValueError as exc:
            raise DeferralError(f"{path}: line {lineno}: malformed JSON: {exc}") from None
    return rows


def _split_dataset(ds: Dataset, fraction: float, seed: int) -> Dataset:
    if ds.is_split:
        return ds
    return assign_splits(ds, fraction, seed)


# ------------------------------------------------------------------ commands


def cmd_validate(args) -> int:
    records = []
    try:
        for lineno, line in iter_lines(args.input):
            if lineno == 1 and '"__header__"' in line:
                continue
            records.append(parse_record(line, lineno))
    except LogFormatError as exc:
        print(f"{args.input}: {exc}", file=sys.stderr)
        return 1
    report = validate_dataset(records)
    if not records:
        report.violations.append("empty dataset")
    _emit(json.dumps(report.to_dict(), indent=2) + "\n", args.output)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not report.ok:
        for v in report.violations:
            print(f"{args.input}: {v}", file=sys.stderr)
        return 1
    return 0


def _metric_selector(text: str):
    if text == ALL_APPLICABLE:
        return ALL_APPLICABLE
    return [metric_id(m.strip()) for m in text.split(",") if m.strip()]


def cmd_score(args) -> int:
    ds = load_log(args.input)
    metrics = _metric_selector(args.metrics)
    lines = [header_line()]
    for r in ds:
        s = score_record(r, metrics, tau=args.tau)
        lines.append(serialize_record(r, uncertainty=s.to_dict()))
    _emit("\n".join(lines) + "\n", args.output)
    return 0


def _metric_records(records, m: MetricId):
    info = METRICS[m]
    return [
        r
        for r in records
        if r.task in info.tasks and (not info.requires_samples or r.n_samples >= 2)
    ]


def cmd_fit(args) -> int:
    ds = _split_dataset(load_log(args.input), args.calibration_fraction, args.seed)
    ds.require_splits()
    cal = ds.subset(split="calibration")
    method = args.method
    diag: FitDiagnostics | None = None

    if method in ("temperature", "logit_feature"):
        task = "classification"
        records = [r for r in cal if r.task == task]
        if method == "temperature":
            c, diag = fit_temperature(records)
        else:
            c, diag = fit_logit_feature(records, args.lam)
    elif method == "variance_aware":
        records = [r for r in cal if r.n_samples >= 2 and (args.task is None or r.task == args.task)]
        tasks = sorted({r.task for r in records})
        if len(tasks) > 1:
            raise DeferralError("variance_aware fit spans several tasks; pass --task")
        task = tasks[0] if tasks else (args.task or "generation")
        c = fit_variance_aware(records)
    else:
        if args.metric is None:
            raise DeferralError(f"--metric is required for method {method}")
        m = metric_id(args.metric)
        records = _metric_records(cal, m)
        if args.task is not None:
            records = [r for r in records if r.task == args.task]
        tasks = sorted({r.task for r in records})
        if len(tasks) > 1:
            raise DeferralError(f"metric {m} applies to several tasks in this log; pass --task")
        if not records:
            raise DeferralError(f"no calibration records provide metric {m}")
        task = tasks[0]
        s = input_scores(records, m)
        y = [r.label_correct for r in records]
        if method == "platt":
            c, diag = fit_platt(s, y, m)
        elif method == "weighted_platt":
            nw = args.neg_weight if args.neg_weight == "auto" else float(args.neg_weight)
            c, diag = fit_weighted_platt(s, y, nw, m)
        else:
            c = fit_isotonic(s, y, m)

    if diag is None:
        scores = [neg_dispersion(r) for r in records] if method == "variance_aware" else s
        sse = isotonic_sse(c, scores, [r.label_correct for r in records])
        diag = FitDiagnostics(0, sse / len(records), 0.0, True, "closed form", 0.0)
    c = replace(c, fit_meta={**c.fit_meta, "task": task, "method": method, "seed": args.seed})
    save_calibrator(c, args.output)
    print(json.dumps(diag.to_dict()), file=sys.stderr)
    return 0


def _calibrator_confidence(c: Calibrator, r) -> float:
    if c.kind in ("temperature", "logit_feature"):
        return score_record(r, [MetricId.MSP]).confidence[MetricId.MSP]
    if c.kind == "variance_aware":
        return neg_dispersion(r)
    m = metric_id(c.input_spec)
    return score_record(r, [m]).confidence[m]


def _applicable(c: Calibrator, r) -> bool:
    task = c.fit_meta.get("task")
    if task is not None and r.task != task:
        return False
    if c.kind in ("temperature", "logit_feature"):
        return r.logits is not None
    if c.kind == "variance_aware":
        return r.n_samples >= 2
    info = METRICS[metric_id(c.input_spec)]
    return r.task in info.tasks and (not info.requires_samples or r.n_samples >= 2)


def cmd_apply(args) -> int:
    ds = _split_dataset(load_log(args.input), args.calibration_fraction, args.seed)
    rows = []
    if args.base:
        method = "base"
        for r in ds:
            if args.task and r.task != args.task:
                continue
            p = base_probability(r)
            rows.append(_apply_row(r, p, p, method))
    else:
        c = load_calibrator(args.calibrator)
        method = c.fit_meta.get("method", c.kind)
        for r in ds:
            if not _applicable(c, r):
                continue
            p = apply_calibrator(c, r)
            if not (0.0 <= p <= 1.0):
                raise InvariantError(f"calibrated probability {p} outside [0, 1]")
            rows.append(_apply_row(r, p, _calibrator_confidence(c, r), method))
    if not rows:
        raise DeferralError("no records applicable to this calibrator")
    _emit(_jsonl(rows), args.output)
    return 0


def _apply_row(r, probability: float, confidence: float, method: str) -> dict:
    return {
        "id": r.id,
        "task": r.task,
        "split": r.split,
        "label_correct": r.label_correct,
        "method": method,
        "probability": probability,
        "confidence": confidence,
    }


def _parse_coverages(text: str) -> list[float]:
    if not text.strip():
        return []
    try:
        return [float(c) for c in text.split(",")]
    except ValueError:
        raise DeferralError(f"bad coverage list {text!r}") from None


def _rows_for_split(rows: list[dict], split: str) -> list[dict]:
    out = [r for r in rows if split == "all" or r.get("split") == split]
    if not out:
        raise DeferralError(f"no rows in split {split!r}")
    for r in out:
        for key in ("id", "probability", "label_correct"):
            if key not in r:
                raise DeferralError(f"row {r.get('id')!r} missing {key!r}")
    return out


def cmd_eval(args) -> int:
    rows = _rows_for_split(_read_jsonl(args.input), args.split)
    method = args.method or rows[0].get("method", "unnamed")
    has_conf = all("confidence" in r for r in rows)
    report = build_report(
        method,
        [r["probability"] for r in rows],
        [r["label_correct"] for r in rows],
        confidence=[r["confidence"] for r in rows] if has_conf else None,
        coverages=_parse_coverages(args.coverages),
        bins=args.bins,
        scheme=args.scheme,
        ids=[r["id"] for r in rows],
        provenance={"input": Path(args.input).name, "split": args.split},
    )
    _emit(report.to_json(), args.output)
    if args.csv:
        atomic_write_text(args.csv, render([report.to_dict()], "csv"))
    return 0


def cmd_decide(args) -> int:
    spec = PolicySpec.parse(args.policy)
    rows = _read_jsonl(args.input)
    cal_rows = _read_jsonl(args.calibration) if args.calibration else rows
    cal_rows = _rows_for_split(cal_rows, "calibration")
    policy = fit_policy(
        [r["probability"] for r in cal_rows], [r["label_correct"] for r in cal_rows], spec
    )
    target = _rows_for_split(rows, args.split)
    decisions, coverage = decide_batch(
        policy, [r["id"] for r in target], [r.get("probability") for r in target]
    )
    _emit(_jsonl(d.to_dict() for d in decisions), args.output)
    summary = {**policy.to_dict(), "split": args.split, "achieved_coverage": coverage, "n": len(decisions)}
    print(json.dumps(summary), file=sys.stderr)
    return 0


def cmd_recover(args) -> int:
    ds = load_log(args.input)
    registry = load_registry(args.registry)
    decisions = []
    for row in _read_jsonl(args.decisions):
        try:
            decisions.append(Decision(row["id"], float(row["probability"]), row["action"]))
        except (KeyError, TypeError, ValueError):
            raise DeferralError(f"malformed decision row {row!r}") from None
        if row["action"] not in ("accept", "abstain"):
            raise DeferralError(f"unknown action {row['action']!r} for {row['id']!r}")
    outcomes = recover_batch(decisions, ds.records, registry, jobs=args.jobs)
    accepted = {d.record_id for d in decisions if d.action == "accept"}
    for o in outcomes:
        if o.record_id in accepted and (o.state != "accepted_by_model" or o.trail):
            raise InvariantError(f"tool invoked for accepted record {o.record_id!r}")
    _emit(_jsonl(o.to_dict() for o in outcomes), args.output)
    states = {}
    for o in outcomes:
        states[o.state] = states.get(o.state, 0) + 1
    print(json.dumps({"n": len(outcomes), "states": dict(sorted(states.items()))}), file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        try:
            reports.append(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DeferralError(f"{path}: malformed report: {exc}") from None
    _emit(render(reports, args.format), args.output)
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deferral", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"deferral {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0, help="seed for split assignment (default 0)")
        return p

    def split_opts(p):
        p.add_argument("--calibration-fraction", type=float, default=0.5,
                       help="calibration share when the log carries no split fields")

    p = add("validate", cmd_validate, "check a prediction log against the schema")
    p.add_argument("--input", required=True)
    p.add_argument("--output")

    p = add("score", cmd_score, "append uncertainty metrics to every record")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    p.add_argument("--metrics", default=ALL_APPLICABLE,
                   help="comma-separated metric ids, or 'all-applicable'")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="low-confidence token threshold")

    p = add("fit", cmd_fit, "fit a calibrator on the calibration split")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--metric", help="uncertainty metric feeding platt/weighted_platt/isotonic")
    p.add_argument("--task", choices=("classification", "generation"))
    p.add_argument("--neg-weight", default="auto", help="weight on incorrect records, or 'auto'")
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA,
                   help="L2 strength for logit_feature")
    split_opts(p)

    p = add("apply", cmd_apply, "compute calibrated probabilities")
    p.add_argument("--input", required=True)
    p.add_argument("--output")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--calibrator")
    g.add_argument("--base", action="store_true", help="uncalibrated model probability")
    p.add_argument("--task", choices=("classification", "generation"))
    split_opts(p)

    p = add("eval", cmd_eval, "calibration and selective-prediction report")
    p.add_argument("--input", required=True, help="output of `deferral apply`")
    p.add_argument("--output")
    p.add_argument("--csv")
    p.add_argument("--method")
    p.add_argument("--split", choices=SPLIT_CHOICES, default="evaluation")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS)
    p.add_argument("--scheme", choices=SCHEMES, default="equal_width")
    p.add_argument("--coverages", default=",".join(f"{c:g}" for c in DEFAULT_COVERAGES))

    p = add("decide", cmd_decide, "fit an abstention policy and decide")
    p.add_argument("--input", required=True, help="output of `deferral apply`")
    p.add_argument("--output")
    p.add_argument("--policy", required=True, help="coverage:0.8 | risk:0.05 | threshold:0.7")
    p.add_argument("--calibration", help="apply output whose calibration rows fit the policy")
    p.add_argument("--split", choices=SPLIT_CHOICES, default="evaluation")

    p = add("recover", cmd_recover, "route abstained records to recovery tools")
    p.add_argument("--input", required=True, help="prediction log")
    p.add_argument("--decisions", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--output")
    p.add_argument("--jobs", type=int, default=1)

    p = add("report", cmd_report, "render evaluation reports side by side")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--format", choices=("table", "csv", "json"), default="table")
    p.add_argument("--output")
    return ap


def run(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    print(json.dumps({"config": config}), file=sys.stderr)
    try:
        return args.func(args)
    except (InvariantError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 2
    except DeferralError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
