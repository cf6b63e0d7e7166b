import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drgrad.errors import UndefinedAUCError
from drgrad.metrics import (
    TELEMETRY_COLUMNS,
    EvalReport,
    RunRecord,
    Telemetry,
    auc,
    convergence_summary,
    eval_csv,
    norm_ratio,
    read_eval_csv,
    read_telemetry,
    result_table,
)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect(self):
        assert auc([0.2, 0.8], [0, 1]) == 1.0

    def test_tie(self):
        assert auc([0.5, 0.5], [0, 1]) == 0.5

    def test_three_of_four(self):
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_single_class(self):
        with pytest.raises(UndefinedAUCError):
            auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1])

    def test_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 60))
            s = rng.integers(0, 5, n).astype(float)
            y = rng.integers(0, 2, n)
            if y.min() == y.max():
                continue
            assert auc(s, y) == brute_auc(s, y)


labels_st = st.lists(st.integers(0, 1), min_size=2, max_size=80).filter(lambda y: 0 < sum(y) < len(y))


@settings(max_examples=100, deadline=None)
@given(data=st.data(), y=labels_st)
def test_monotone_transform_invariance(data, y):
    # integer scores keep the transform strictly increasing in floating point
    s = np.array(data.draw(st.lists(st.integers(-20, 20), min_size=len(y), max_size=len(y))), dtype=float)
    assert auc(s, y) == pytest.approx(auc(np.exp(s) * 3 + 1, y), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(y=labels_st, seed=st.integers(0, 2**31))
def test_negation_complements(y, seed):
    s = np.random.default_rng(seed).permutation(len(y)).astype(float)  # distinct scores
    assert auc(-s, y) == pytest.approx(1 - auc(s, y), abs=1e-12)


class TestTelemetry:
    def rec(self, step, xi=0.1):
        return RunRecord(step, 0.5, 0.6, 1.1, xi_a=xi, xi_b=-xi, norm_g1p=1.0, norm_g2=2.0)

    def test_empty_is_header_only(self):
        assert Telemetry().to_csv() == ",".join(TELEMETRY_COLUMNS) + "\n"

    def test_three_records_four_lines(self):
        t = Telemetry()
        for i in range(3):
            t.record_step(self.rec(i))
        assert len(t.to_csv().splitlines()) == 4

    def test_columns_in_declared_order(self):
        assert TELEMETRY_COLUMNS[:4] == ("step", "loss_task1", "loss_task2", "loss_total")
        assert TELEMETRY_COLUMNS[-2:] == ("norm_gR1p", "norm_gR1pp")
        assert len(TELEMETRY_COLUMNS) == 15

    def test_roundtrip_17_digits(self, tmp_path):
        t = Telemetry()
        xi = 0.1 + 0.2  # 0.30000000000000004
        t.record_step(self.rec(0, xi))
        t.record_step(RunRecord(1, 0.1, 0.2, 0.3))
        t.write(tmp_path / "t.csv")
        back = read_telemetry(tmp_path / "t.csv")
        assert back[0].xi_a == xi and back[0].xi_b == -xi
        assert back[1].xi_a is None and back[1] == RunRecord(1, 0.1, 0.2, 0.3)

    def test_step_must_increase(self):
        t = Telemetry()
        t.record_step(self.rec(3))
        with pytest.raises(ValueError):
            t.record_step(self.rec(3))

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Telemetry().record_step(RunRecord(0, math.nan, 0.0, 0.0))

    def test_stride(self):
        t = Telemetry(stride=5)
        kept = [t.record_step(self.rec(i)) for i in range(12)]
        assert [r.step for r in t.records] == [0, 5, 10]
        assert sum(kept) == 3


class TestConvergence:
    def records(self, xi):
        return [RunRecord(i, 0, 0, 0, xi_b=x, norm_g1p=1.0, norm_g2=1.0 + x) for i, x in enumerate(xi)]

    def test_constant(self):
        s = convergence_summary(self.records([0.3] * 40))
        assert s["xi_b_first"] == s["xi_b_last"] == pytest.approx(0.3)

    def test_shrinking(self):
        s = convergence_summary(self.records(np.linspace(1, 0, 100)))
        assert s["xi_b_last"] < s["xi_b_first"]
        assert s["ratio_last"] < s["ratio_first"]

    def test_window_means(self):
        s = convergence_summary(self.records(np.arange(100) / 100))
        assert s["xi_b_first"] == pytest.approx(np.mean(np.arange(10) / 100))
        assert s["xi_b_last"] == pytest.approx(np.mean(np.arange(90, 100) / 100))

    def test_absolute_value(self):
        s = convergence_summary(self.records([-0.5] * 20))
        assert s["xi_b_first"] == 0.5

    def test_too_short(self):
        with pytest.raises(ValueError):
            convergence_summary(self.records([0.1] * 19))

    def test_norm_ratio(self):
        assert norm_ratio(2.0, 1.0) == norm_ratio(1.0, 2.0) == 2.0
        assert norm_ratio(0.0, 1.0) is None


def report(mode="mmoe", seed=0, a=0.9, step=10):
    return EvalReport(mode, seed, "syn", "test", 1, step, (a, a - 0.1), (0.3, 0.4))


class TestReports:
    def test_auc_range(self):
        with pytest.raises(ValueError):
            report(a=1.5)

    def test_eval_csv_roundtrip(self, tmp_path):
        reps = [report(seed=1, a=0.1 + 0.2), report("drgrad", 2, 0.75)]
        (tmp_path / "eval.csv").write_text(eval_csv(reps))
        assert read_eval_csv(tmp_path / "eval.csv") == reps

    def test_single_row(self):
        _, csv_text = result_table([report()])
        lines = csv_text.splitlines()
        assert len(lines) == 3  # header, the row, its mean
        assert lines[1].startswith("mmoe,0,")

    def test_seeds_by_modes(self):
        reps = [report(m, s, 0.8 + 0.01 * s) for m in ("mmoe", "drgrad") for s in range(5)]
        text, csv_text = result_table(reps)
        rows = csv_text.splitlines()[1:]
        assert len(rows) == 12
        assert sum(r.split(",")[1] == "mean" for r in rows) == 2
        assert "drgrad" in text and "mean" in text

    def test_mean_is_arithmetic(self):
        vals = [0.81, 0.9, 0.77]
        _, csv_text = result_table([report(seed=i, a=v) for i, v in enumerate(vals)])
        mean_row = csv_text.splitlines()[-1].split(",")
        assert abs(float(mean_row[2]) - sum(vals) / 3) < 1e-12

    def test_latest_step_wins(self):
        _, csv_text = result_table([report(a=0.6, step=5), report(a=0.7, step=9)])
        assert float(csv_text.splitlines()[1].split(",")[2]) == 0.7

    def test_empty(self):
        with pytest.raises(ValueError):
            result_table([])
