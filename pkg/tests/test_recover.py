import json
import time

import pytest

from conftest import tool_command
from deferral.abstain import Decision
from deferral.errors import DeferralError
from deferral.prediction_log import PredictionRecord
from deferral.recover import (
    ToolFailure,
    ToolResponse,
    ToolSpec,
    build_request,
    invoke_tool,
    load_registry,
    parse_registry,
    parse_response,
    recover_batch,
    route,
)


def _gen(i, mode=None):
    meta = {"failure_mode": mode} if mode else {}
    return PredictionRecord(id=f"g{i}", task="generation", token_logprobs=(-0.2, -0.4), label_correct=False, meta=meta)


CLS = PredictionRecord(id="c0", task="classification", logits=(1.0, 0.0), label_correct=True)


def _tool(name, script, *args, timeout_ms=10_000, **kw):
    return ToolSpec(name, tuple(tool_command(script, *args)), timeout_ms, **kw)


def _emit(name, payload, status="0", log=None, **kw):
    args = [payload, status] + ([str(log)] if log else [])
    return _tool(name, "emit.py", *args, **kw)


class TestRoute:
    def test_untagged_tool_matches_everything(self):
        t = ToolSpec("any", ("x",))
        assert route(_gen(0), [t]) == [t] and route(CLS, [t]) == [t]

    def test_task_and_mode_filters(self):
        gen_only = ToolSpec("g", ("x",), tasks=("generation",))
        gap = ToolSpec("gap", ("x",), failure_modes=("capability_gap",))
        reg = [gen_only, gap]
        assert route(CLS, reg) == []
        assert route(_gen(0), reg) == [gen_only]
        assert route(_gen(0, "capability_gap"), reg) == [gen_only, gap]

    def test_registry_order_kept(self):
        reg = [ToolSpec(n, ("x",)) for n in "cab"]
        assert [t.name for t in route(CLS, reg)] == ["c", "a", "b"]


class TestParseResponse:
    def test_accept(self):
        r = parse_response(b'{"verdict":"accept","notes":"ok"}')
        assert r == ToolResponse("accept", None, None, "ok")

    @pytest.mark.parametrize(
        "line, reason",
        [
            (b'{"verdict":"maybe"}', "invalid verdict"),
            (b'{"notes":"x"}', "missing verdict"),
            (b"not json", "malformed response"),
            (b"[1,2]", "malformed response"),
            (b'{"verdict":"accept","tool_confidence":1.5}', "invalid tool_confidence"),
            (b'{"verdict":"accept","tool_confidence":true}', "invalid tool_confidence"),
            (b"\xff\xfe", "malformed response"),
        ],
    )
    def test_failures(self, line, reason):
        assert parse_response(line) == ToolFailure(reason)

    def test_oversized(self):
        line = b'{"verdict":"accept","notes":"' + b"x" * (1 << 20) + b'"}'
        assert parse_response(line) == ToolFailure("oversized response")


class TestInvokeTool:
    req = build_request(_gen(0), 0.3)

    def test_request_shape(self):
        assert self.req["protocol_version"] == 1
        assert self.req["id"] == "g0" and self.req["calibrated_score"] == 0.3
        assert "mean_token_logprob" in self.req["uncertainty"]
        json.dumps(self.req, allow_nan=False)

    def test_always_accept(self):
        r = invoke_tool(_tool("a", "always_accept.py"), self.req)
        assert isinstance(r, ToolResponse) and r.verdict == "accept" and r.notes == "ok g0"

    def test_always_reject(self):
        assert invoke_tool(_tool("r", "always_reject.py"), self.req).verdict == "reject"

    def test_timeout(self):
        t0 = time.monotonic()
        r = invoke_tool(_tool("s", "sleep_then_accept.py", "30", timeout_ms=300), self.req)
        assert r == ToolFailure("timeout")
        assert time.monotonic() - t0 < 5

    def test_nonzero_exit(self):
        r = invoke_tool(_emit("e", '{"verdict":"accept"}', "3"), self.req)
        assert r == ToolFailure("exit status 3")

    def test_invalid_verdict(self):
        assert invoke_tool(_emit("e", '{"verdict":"maybe"}'), self.req) == ToolFailure("invalid verdict")

    def test_garbage(self):
        assert invoke_tool(_emit("e", "garbage"), self.req) == ToolFailure("malformed response")

    def test_revise_carries_payload(self):
        r = invoke_tool(_emit("e", '{"verdict":"revise","revised":{"code":"x=1"},"tool_confidence":0.9}'), self.req)
        assert r == ToolResponse("revise", {"code": "x=1"}, 0.9, "")

    def test_missing_executable(self):
        r = invoke_tool(ToolSpec("nope", ("/nonexistent/tool",)), self.req)
        assert isinstance(r, ToolFailure) and r.reason.startswith("spawn failed")


class TestRecoverBatch:
    def test_first_accept_wins(self):
        reg = [_tool("rej", "always_reject.py"), _tool("acc", "always_accept.py"), _tool("never", "always_reject.py")]
        (out,) = recover_batch([Decision("g0", 0.2, "abstain")], [_gen(0)], reg)
        assert out.state == "recovered" and out.tool == "acc" and out.verdict == "accept"
        assert out.trail == [{"tool": "rej", "result": "reject"}, {"tool": "acc", "result": "accept"}]

    def test_all_reject(self):
        reg = [_tool("r1", "always_reject.py"), _emit("bad", '{"verdict":"maybe"}')]
        (out,) = recover_batch([Decision("g0", 0.2, "abstain")], [_gen(0)], reg)
        assert out.state == "abstained_definitively"
        assert out.trail[1] == {"tool": "bad", "result": "failure: invalid verdict"}

    def test_empty_route(self):
        (out,) = recover_batch([Decision("c0", 0.2, "abstain")], [CLS], [ToolSpec("g", ("x",), tasks=("generation",))])
        assert out.state == "abstained_definitively" and out.trail == []

    def test_accepted_records_never_reach_tools(self, tmp_path):
        log = tmp_path / "calls.txt"
        reg = [_emit("spy", '{"verdict":"reject"}', "0", log)]
        recs = [_gen(i) for i in range(4)]
        decisions = [Decision(r.id, 0.5, "accept" if i % 2 == 0 else "abstain") for i, r in enumerate(recs)]
        out = recover_batch(decisions, recs, reg)
        assert [o.state for o in out] == ["accepted_by_model", "abstained_definitively"] * 2
        assert all(o.trail == [] for o in out[::2])
        assert sorted(log.read_text().split()) == ["g1", "g3"]

    def test_revise_emitted_verbatim(self):
        reg = [_emit("fix", '{"verdict":"revise","revised":"patched"}')]
        (out,) = recover_batch([Decision("g0", 0.2, "abstain")], [_gen(0)], reg)
        assert out.to_dict() == {
            "id": "g0",
            "state": "recovered",
            "tool": "fix",
            "verdict": "revise",
            "revised": "patched",
            "trail": [{"tool": "fix", "result": "revise"}],
        }

    def test_parallel_matches_sequential_and_keeps_order(self):
        recs = [_gen(i, "capability_gap" if i % 3 == 0 else None) for i in range(12)]
        reg = [_tool("rej", "always_reject.py"), _tool("acc", "always_accept.py", failure_modes=("capability_gap",))]
        decisions = [Decision(r.id, 0.1, "abstain") for r in recs]
        seq = [o.to_dict() for o in recover_batch(decisions, recs, reg, jobs=1)]
        par = [o.to_dict() for o in recover_batch(decisions, recs, reg, jobs=4)]
        assert seq == par
        assert [o["id"] for o in par] == [r.id for r in recs]

    def test_unknown_id(self):
        with pytest.raises(DeferralError, match="unknown record"):
            recover_batch([Decision("zz", 0.1, "abstain")], [_gen(0)], [])


class TestRegistry:
    def test_load(self, write_registry):
        path = write_registry(
            [
                {"name": "a", "command": ["echo"], "timeout_ms": 100, "applies_to": {"tasks": ["generation"]}},
                {"name": "b", "command": "cat", "applies_to": {"failure_modes": ["missing_information"]}},
            ]
        )
        a, b = load_registry(path)
        assert a.tasks == ("generation",) and a.timeout_ms == 100
        assert b.command == ("cat",) and b.failure_modes == ("missing_information",)

    @pytest.mark.parametrize(
        "entries",
        [
            {"name": "a"},
            [{"command": ["x"]}],
            [{"name": "a", "command": []}],
            [{"name": "a", "command": ["x"], "timeout_ms": 0}],
            [{"name": "a", "command": ["x"], "applies_to": {"tasks": ["translation"]}}],
            [{"name": "a", "command": ["x"]}, {"name": "a", "command": ["y"]}],
        ],
    )
    def test_invalid(self, entries):
        with pytest.raises(DeferralError):
            parse_registry(entries)

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "r.json"
        p.write_text("{nope")
        with pytest.raises(DeferralError, match="malformed registry"):
            load_registry(p)
