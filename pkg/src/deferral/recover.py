"""Route abstained records through external recovery tools.

Wire protocol (UTF-8, one JSON object per line): the host writes one request
line to the tool's stdin and reads one response line from its stdout. The
tool's stderr passes through to the host's stderr.

    request:  {"protocol_version": 1, "id", "task", "calibrated_score",
               "uncertainty": {metric: confidence}, "meta"}
    response: {"verdict": "accept" | "reject" | "revise",
               "revised": any, "tool_confidence": float in [0, 1], "notes": str}

Any crash, timeout, nonzero exit, oversized or malformed reply counts as a
reject and is recorded in the record's trail.
"""

from __future__ import annotations

import json
import math
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from deferral.abstain import Decision
from deferral.errors import DeferralError
from deferral.prediction_log import TASKS, PredictionRecord
from deferral.uncertainty import score_record

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT_MS = 30000
MAX_LINE_BYTES = 1 << 20
VERDICTS = ("accept", "reject", "revise")


@dataclass(frozen=True)
class ToolSpec:
    name: str
    command: tuple[str, ...]
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    tasks: tuple[str, ...] | None = None
    failure_modes: tuple[str, ...] | None = None

    def applies_to(self, record: PredictionRecord) -> bool:
        if self.tasks is not None and record.task not in self.tasks:
            return False
        if self.failure_modes:
            return record.meta.get("failure_mode") in self.failure_modes
        return True


@dataclass(frozen=True)
class ToolResponse:
    verdict: str
    revised: Any = None
    tool_confidence: float | None = None
    notes: str = ""


@dataclass(frozen=True)
class ToolFailure:
    reason: str

    verdict = "reject"


@dataclass
class FinalOutcome:
    record_id: str
    state: str  # accepted_by_model | recovered | abstained_definitively
    tool: str | None = None
    verdict: str | None = None
    revised: Any = None
    trail: list[dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"id": self.record_id, "state": self.state}
        if self.state == "recovered":
            d["tool"] = self.tool
            d["verdict"] = self.verdict
            if self.revised is not None:
                d["revised"] = self.revised
        d["trail"] = self.trail
        return d


def _tool_from_dict(d: dict, i: int) -> ToolSpec:
    if not isinstance(d, dict):
        raise DeferralError(f"registry entry {i} is not an object")
    name = d.get("name")
    if not isinstance(name, str) or not name:
        raise DeferralError(f"registry entry {i}: name must be nonempty text")
    cmd = d.get("command")
    if isinstance(cmd, str):
        cmd = [cmd]
    if not isinstance(cmd, list) or not cmd or not all(isinstance(c, str) for c in cmd):
        raise DeferralError(f"tool {name!r}: command must be a nonempty list of strings")
    timeout = d.get("timeout_ms", DEFAULT_TIMEOUT_MS)
    if not isinstance(timeout, int) or isinstance(timeout, bool) or timeout <= 0:
        raise DeferralError(f"tool {name!r}: timeout_ms must be a positive integer")
    applies = d.get("applies_to") or {}
    tasks = applies.get("tasks")
    if tasks is not None:
        if isinstance(tasks, str):
            tasks = [tasks]
        bad = [t for t in tasks if t not in TASKS]
        if bad:
            raise DeferralError(f"tool {name!r}: unknown task {bad[0]!r}")
        tasks = tuple(tasks)
    modes = applies.get("failure_modes")
    if modes is not None:
        modes = tuple([modes] if isinstance(modes, str) else modes)
    return ToolSpec(name, tuple(cmd), timeout, tasks, modes)


def parse_registry(entries: list) -> list[ToolSpec]:
    if not isinstance(entries, list):
        raise DeferralError("tool registry must be a JSON list")
    tools = [_tool_from_dict(d, i) for i, d in enumerate(entries)]
    names = [t.name for t in tools]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DeferralError(f"duplicate tool name {dupes[0]!r}")
    return tools


def load_registry(path: str | Path) -> list[ToolSpec]:
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DeferralError(f"{path}: malformed registry: {exc}") from None
    return parse_registry(entries)


def route(record: PredictionRecord, registry: Sequence[ToolSpec]) -> list[ToolSpec]:
    return [t for t in registry if t.applies_to(record)]


def build_request(record: PredictionRecord, calibrated_score: float) -> dict[str, Any]:
    scores = score_record(record)
    return {
        "protocol_version": PROTOCOL_VERSION,
        "id": record.id,
        "task": record.task,
        "calibrated_score": calibrated_score,
        "uncertainty": {str(m): v for m, v in scores.confidence.items()},
        "meta": record.meta,
    }


def parse_response(line: bytes) -> ToolResponse | ToolFailure:
    if len(line) > MAX_LINE_BYTES:
        return ToolFailure("oversized response")
    try:
        obj = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        return ToolFailure("malformed response")
    if not isinstance(obj, dict):
        return ToolFailure("malformed response")
    if "verdict" not in obj:
        return ToolFailure("missing verdict")
    verdict = obj["verdict"]
    if verdict not in VERDICTS:
        return ToolFailure("invalid verdict")
    conf = obj.get("tool_confidence")
    if conf is not None:
        if not isinstance(conf, (int, float)) or isinstance(conf, bool) or not (0.0 <= conf <= 1.0):
            return ToolFailure("invalid tool_confidence")
        conf = float(conf)
    notes = obj.get("notes", "")
    return ToolResponse(verdict, obj.get("revised"), conf, notes if isinstance(notes, str) else str(notes))


def invoke_tool(tool: ToolSpec, request: dict[str, Any]) -> ToolResponse | ToolFailure:
    """Run one tool on one request; never raises for tool misbehaviour."""
    payload = (json.dumps(request, allow_nan=False) + "\n").encode("utf-8")
    try:
        proc = subprocess.Popen(
            list(tool.command), stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=None
        )
    except OSError as exc:
        return ToolFailure(f"spawn failed: {exc.strerror or exc}")
    try:
        out, _ = proc.communicate(payload, timeout=tool.timeout_ms / 1000.0)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.communicate()
        return ToolFailure("timeout")
    except OSError as exc:
        proc.kill()
        proc.communicate()
        return ToolFailure(f"io error: {exc.strerror or exc}")
    if proc.returncode != 0:
        return ToolFailure(f"exit status {proc.returncode}")
    line, _, _ = out.partition(b"\n")
    if not line.strip():
        return ToolFailure("empty response")
    return parse_response(line)


def _walk(record: PredictionRecord, probability: float, registry: Sequence[ToolSpec]) -> FinalOutcome:
    request = build_request(record, probability)
    trail = []
    for tool in route(record, registry):
        result = invoke_tool(tool, request)
        if isinstance(result, ToolFailure):
            trail.append({"tool": tool.name, "result": f"failure: {result.reason}"})
            continue
        trail.append({"tool": tool.name, "result": result.verdict})
        if result.verdict in ("accept", "revise"):
            return FinalOutcome(record.id, "recovered", tool.name, result.verdict, result.revised, trail)
    return FinalOutcome(record.id, "abstained_definitively", trail=trail)


def recover_batch(
    decisions: Sequence[Decision],
    records: Sequence[PredictionRecord],
    registry: Sequence[ToolSpec],
    jobs: int = 1,
) -> list[FinalOutcome]:
    """Resolve every decision into a terminal outcome, in decision order.

    Accepted records never reach a tool. Abstained records try their route in
    registry order; the first accept or revise wins.
    """
    by_id = {r.id: r for r in records}
    missing = [d.record_id for d in decisions if d.record_id not in by_id]
    if missing:
        raise DeferralError(f"decision for unknown record id {missing[0]!r}")
    if jobs < 1:
        raise DeferralError("jobs must be >= 1")

    def resolve(d: Decision) -> FinalOutcome:
        if d.action == "accept":
            return FinalOutcome(d.record_id, "accepted_by_model")
        return _walk(by_id[d.record_id], d.calibrated_probability, registry)

    if jobs == 1:
        return [resolve(d) for d in decisions]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(resolve, decisions))


def max_batch_seconds(records: Sequence[PredictionRecord], registry: Sequence[ToolSpec]) -> float:
    """Upper bound on sequential wall time spent waiting on tools."""
    return math.fsum(t.timeout_ms for r in records for t in route(r, registry)) / 1000.0
