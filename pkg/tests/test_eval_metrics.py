import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deferral.errors import DeferralError
from deferral.eval_metrics import (
    auroc,
    brier,
    build_report,
    ece,
    render,
    risk_coverage_curve,
    selective_accuracy,
)
from deferral.synthetic import calibrated_stream
from oracles import pairwise_auroc

P = [0.9, 0.8, 0.3, 0.2]
Y = [True, False, False, True]


class TestBrier:
    def test_hand_computed(self):
        assert brier(P, Y) == pytest.approx((0.01 + 0.64 + 0.09 + 0.64) / 4, abs=1e-12)
        assert brier(P, Y) == pytest.approx(0.345, abs=1e-12)

    def test_perfect(self):
        assert brier([1.0, 0.0], [True, False]) == 0.0

    def test_half(self):
        assert brier([0.5] * 5, [True, False, False, True, True]) == 0.25

    def test_length_mismatch(self):
        with pytest.raises(DeferralError, match="length"):
            brier([0.5], [True, False])


class TestEce:
    def test_two_bins_hand_computed(self):
        value, table = ece(P, Y, bins=2)
        assert value == pytest.approx(0.30, abs=1e-12)
        contrib = [b.count / 4 * abs(b.accuracy - b.mean_confidence) for b in table]
        assert contrib == [pytest.approx(0.125), pytest.approx(0.175)]

    def test_one_bin_is_gap_of_means(self):
        rng = np.random.default_rng(0)
        p = rng.random(50)
        y = rng.random(50) < 0.4
        assert ece(p, y, bins=1)[0] == pytest.approx(abs(p.mean() - y.mean()), abs=1e-15)

    def test_calibrated_stream(self):
        p, y = calibrated_stream(100_000, seed=0)
        assert ece(p, y, bins=10)[0] < 0.01

    def test_last_bin_closed_above(self):
        _, table = ece([1.0, 0.0], [True, False], bins=4)
        assert table[-1].count == 1 and table[0].count == 1

    def test_empty_bins_contribute_zero(self):
        value, table = ece([0.95, 0.95], [True, True], bins=10)
        assert value == pytest.approx(0.05)
        assert sum(b.count for b in table) == 2

    def test_equal_mass_keeps_ties_together(self):
        p = [0.1, 0.2, 0.2, 0.2, 0.2, 0.6, 0.7, 0.9]
        y = [0, 0, 1, 0, 1, 1, 1, 1]
        _, table = ece(p, y, bins=4, scheme="equal_mass")
        assert sum(b.count for b in table) == 8
        # all four 0.2 values land in one bin
        assert any(b.count >= 4 and b.mean_confidence <= 0.2 for b in table)
        assert table[0].lower == 0.0 and table[-1].upper == 1.0

    def test_equal_mass_balanced_counts(self):
        p = np.linspace(0.01, 0.99, 100)
        _, table = ece(p, p > 0.5, bins=5, scheme="equal_mass")
        assert [b.count for b in table] == [20] * 5

    def test_unknown_scheme(self):
        with pytest.raises(DeferralError):
            ece(P, Y, scheme="nope")


class TestAuroc:
    def test_hand_example(self):
        assert pairwise_auroc(P, Y) == 0.5
        assert auroc(P, Y) == 0.5

    def test_separating(self):
        assert auroc([0.9, 0.8, 0.1], [True, True, False]) == 1.0

    def test_ties_count_half(self):
        assert auroc([0.5, 0.5], [True, False]) == 0.5

    def test_degenerate(self):
        with pytest.raises(DeferralError):
            auroc([0.1, 0.2], [True, True])

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 201))
            s = np.round(rng.random(n), int(rng.integers(1, 4)))
            y = rng.random(n) < 0.5
            if y.all() or not y.any():
                continue
            assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.floats(0.1, 5), b=st.floats(-3, 3))
    def test_invariant_under_increasing_transform(self, seed, a, b):
        rng = np.random.default_rng(seed)
        s = rng.normal(size=80)
        y = rng.random(80) < 0.5
        if y.all() or not y.any():
            return
        assert auroc(np.exp(a * s + b), y) == auroc(s, y)


class TestSelectiveAccuracy:
    def test_hand_trace(self):
        assert selective_accuracy(P, Y, 0.5) == 0.5

    def test_full_coverage_is_accuracy(self):
        assert selective_accuracy(P, Y, 1.0) == 0.5

    def test_id_tie_break(self):
        conf = [0.5, 0.5, 0.5, 0.5]
        labels = [False, True, True, False]
        ids = ["d", "a", "c", "b"]
        # keeps ids a and b
        assert selective_accuracy(conf, labels, 0.5, ids) == 0.5
        assert selective_accuracy(conf, labels, 0.25, ids) == 1.0

    def test_coverage_float_noise(self):
        # 0.7 * 10 = 7.000000000000001 must keep 7, not 8
        conf = np.arange(10, 0, -1)
        labels = [True] * 7 + [False] * 3
        assert selective_accuracy(conf, labels, 0.7) == 1.0

    @pytest.mark.parametrize("cov", [0.0, -0.1, 1.01])
    def test_bad_coverage(self, cov):
        with pytest.raises(DeferralError):
            selective_accuracy(P, Y, cov)


class TestRiskCoverage:
    def test_hand_trace(self):
        pts = risk_coverage_curve(P, Y)
        assert [p.coverage for p in pts] == [0.25, 0.5, 0.75, 1.0]
        assert [p.selective_risk for p in pts] == [0.0, 0.5, pytest.approx(2 / 3), 0.5]
        assert [p.threshold for p in pts] == [0.9, 0.8, 0.3, 0.2]

    def test_separating_structure(self):
        conf = [0.9, 0.8, 0.7, 0.2, 0.1]
        pts = risk_coverage_curve(conf, [True, True, True, False, False])
        assert [p.selective_risk for p in pts[:3]] == [0, 0, 0]
        assert pts[3].selective_risk > 0 and pts[4].selective_risk > pts[3].selective_risk

    def test_single_record(self):
        pts = risk_coverage_curve([0.4], [False])
        assert len(pts) == 1 and pts[0].coverage == 1.0 and pts[0].selective_risk == 1.0

    def test_ties_collapse_to_one_point(self):
        pts = risk_coverage_curve([0.5, 0.5, 0.2], [True, False, True])
        assert [p.coverage for p in pts] == [pytest.approx(2 / 3), 1.0]

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_curve_invariants(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 60))
        c = np.round(rng.random(n), 2)
        y = rng.random(n) < 0.6
        pts = risk_coverage_curve(c, y)
        cov = [p.coverage for p in pts]
        assert all(b > a for a, b in zip(cov, cov[1:]))
        assert pts[-1].coverage == 1.0
        assert pts[-1].selective_risk == pytest.approx(1 - y.mean(), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_scalar_ranges(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 100))
    p = rng.random(n)
    y = rng.random(n) < 0.5
    assert 0 <= brier(p, y) <= 1
    assert 0 <= ece(p, y)[0] <= 1
    assert 0 <= ece(p, y, scheme="equal_mass")[0] <= 1
    if y.any() and not y.all():
        assert 0 <= auroc(p, y) <= 1


class TestReport:
    def test_contents(self):
        r = build_report("platt", P, Y, confidence=[4, 3, 2, 1], coverages=[0.5, 1.0], bins=2)
        d = r.to_dict()
        assert d["brier"] == pytest.approx(0.345)
        assert d["ece"] == pytest.approx(0.30)
        assert d["auroc"] == 0.5
        assert d["selective_accuracy"] == {"0.5": 0.5, "1": 0.5}
        assert d["selective_accuracy_raw"] == {"0.5": 0.5, "1": 0.5}
        assert d["n"] == 4 and d["label_balance"] == 0.5
        assert len(d["bins"]) == 2 and len(d["curve"]) == 4

    def test_deterministic_bytes(self):
        a = build_report("m", P, Y).to_json()
        b = build_report("m", P, Y).to_json()
        assert a == b

    def test_empty_coverages_omit_block(self):
        d = build_report("m", P, Y, coverages=[]).to_dict()
        assert "selective_accuracy" not in d

    def test_rejects_out_of_range_probabilities(self):
        with pytest.raises(DeferralError):
            build_report("m", [1.2, 0.1], [True, False])


# display-only fixture rows
SUMMARY_ROWS = [
    {"method": "Base Model", "brier": 0.273, "ece": 0.223},
    {"method": "Platt Scaling", "brier": 0.224, "ece": 0.103},
    {"method": "Isotonic Regression", "brier": 0.216, "ece": 0.143},
    {"method": "Weighted Platt Calibration", "brier": 0.162, "ece": 0.072},
]


class TestRender:
    def test_table_marks_weighted_platt_best(self):
        out = render(SUMMARY_ROWS, "table").splitlines()
        rows = out[2:]
        assert [r.split("  ")[0].strip() for r in rows] == [t["method"] for t in SUMMARY_ROWS]
        assert "0.162*" in rows[3] and "0.072*" in rows[3]
        assert "*" not in "".join(rows[:3])

    def test_csv_header(self):
        reports = [build_report(m, P, Y, coverages=[0.8]).to_dict() for m in ("base", "platt")]
        lines = render(reports, "csv").splitlines()
        assert lines[0] == "method,brier,ece,auroc,sel@0.8"
        assert lines[1].startswith("base,")

    def test_csv_and_json_agree(self):
        reports = [build_report(m, P, Y, coverages=[0.5, 0.8]).to_dict() for m in ("a", "b", "c", "d")]
        rows = json.loads(render(reports, "json"))
        lines = render(reports, "csv").splitlines()
        header = lines[0].split(",")
        for line, row in zip(lines[1:], rows):
            cells = line.split(",")
            assert cells[0] == row["method"]
            for h, c in zip(header[1:], cells[1:]):
                assert float(c) == row[h]
        assert [r["method"] for r in rows] == ["a", "b", "c", "d"]

    def test_incompatible_coverages(self):
        a = build_report("a", P, Y, coverages=[0.5]).to_dict()
        b = build_report("b", P, Y, coverages=[0.8]).to_dict()
        with pytest.raises(DeferralError, match="incompatible"):
            render([a, b], "csv")

    def test_missing_fields_render_dash(self):
        out = render(SUMMARY_ROWS[:1], "table")
        assert "-" in out.splitlines()[2]
        assert math.isclose(float(out.splitlines()[2].split()[2].rstrip("*")), 0.273)
