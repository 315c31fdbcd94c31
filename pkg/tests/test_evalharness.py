import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ranktrack import evalharness, pipeline
from ranktrack.evalharness import (
    MetricReport,
    SequenceMetrics,
    ablation_table,
    dp_at,
    kendall_tau,
    precision_curve,
    report_csv,
    success_auc,
    success_curve,
)
from ranktrack.geometry import Box

from conftest import quick_config


def shifted(b: Box, dx: float, dy: float = 0.0) -> Box:
    return b.translated(dx, dy)


BOX = Box(10, 10, 30, 30)


class TestSuccessAuc:
    def test_perfect_is_one(self):
        preds = [BOX] * 5
        assert success_auc(preds, preds) == 1.0

    def test_disjoint_is_one_twentyfirst(self):
        # frozen: only the t=0 bin succeeds
        preds = [shifted(BOX, 100.0)] * 4
        gts = [BOX] * 4
        assert success_auc(preds, gts) == pytest.approx(0.047619047619047616, abs=1e-15)

    def test_constant_half_iou(self):
        # frozen: 11 of 21 inclusive thresholds pass at IoU 0.5
        pred = Box(0, 0, 10, 20)
        gt = Box(0, 0, 10, 10)  # iou exactly 0.5
        assert success_auc([pred] * 3, [gt] * 3) == pytest.approx(
            0.5238095238095238, abs=1e-15)

    def test_strict_convention_differs_by_one_bin(self):
        preds = [BOX] * 2
        assert success_auc(preds, preds, inclusive=False) == pytest.approx(
            20 / 21, abs=1e-15)

    def test_monotone_in_frame_improvement(self):
        gts = [BOX] * 4
        worse = [shifted(BOX, 18.0)] * 4
        better = [shifted(BOX, 18.0)] * 3 + [shifted(BOX, 6.0)]
        assert success_auc(better, gts) >= success_auc(worse, gts)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            success_auc([BOX], [BOX, BOX])

    def test_curve_shape(self):
        curve = success_curve([BOX], [BOX])
        assert len(curve) == 21
        assert curve[0][0] == 0.0 and curve[-1][0] == 1.0


class TestDpAt:
    def test_zero_error(self):
        assert dp_at([BOX] * 3, [BOX] * 3) == 1.0

    def test_all_30px_off_at_radius_20(self):
        preds = [shifted(BOX, 30.0)] * 3
        assert dp_at(preds, [BOX] * 3, 20.0) == 0.0

    def test_half_within(self):
        preds = [shifted(BOX, 30.0), shifted(BOX, 5.0)]
        assert dp_at(preds, [BOX, BOX], 20.0) == 0.5

    def test_boundary_inclusive(self):
        assert dp_at([shifted(BOX, 20.0)], [BOX], 20.0) == 1.0

    def test_precision_curve_monotone(self):
        rng = np.random.default_rng(0)
        preds = [shifted(BOX, rng.uniform(0, 40)) for _ in range(10)]
        rates = [r for _, r in precision_curve(preds, [BOX] * 10)]
        assert all(b >= a for a, b in zip(rates, rates[1:]))


class TestKendallTau:
    def test_identical_orderings(self):
        assert kendall_tau([1, 2, 3, 4], [10, 20, 30, 40]) == 1.0

    def test_reversed(self):
        assert kendall_tau([1, 2, 3], [3, 2, 1]) == -1.0

    def test_one_discordant_pair(self):
        # frozen: (2 - 1) / 3
        assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-15)

    def test_ties_count_in_neither(self):
        assert kendall_tau([1, 1, 2], [1, 2, 3]) == pytest.approx(2 / 3, abs=1e-15)

    def test_too_short(self):
        with pytest.raises(ValueError):
            kendall_tau([1.0], [2.0])

    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=12, unique=True))
    @settings(max_examples=50, deadline=None)
    def test_self_is_one_and_antisymmetric(self, a):
        assert kendall_tau(a, a) == 1.0
        assert kendall_tau(a, [-x for x in a]) == -1.0

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=10, unique=True),
           st.lists(st.floats(-50, 50), min_size=2, max_size=10, unique=True))
    @settings(max_examples=50, deadline=None)
    def test_range(self, a, b):
        n = min(len(a), len(b))
        t = kendall_tau(a[:n], b[:n])
        assert -1.0 <= t <= 1.0


def make_report(**overrides):
    vals = dict(success_auc=0.5, dp20=0.6, rank_consistency=0.7,
                distractor_margin=0.1, kendall_tau=0.3)
    vals.update(overrides)
    return MetricReport(per_sequence=[SequenceMetrics(name="s0", **vals)])


class TestAblationTable:
    def configs(self):
        return {
            "baseline": quick_config(),
            "cr": quick_config(rank_cls=True),
            "cr_igr_ori": quick_config(rank_cls=True, rank_iou_ori=True),
            "cr_igr": quick_config(rank_cls=True, rank_iou=True),
        }

    def test_four_rows_plus_header(self):
        reports = {arm: make_report() for arm in evalharness.ARM_ORDER}
        table = ablation_table(reports, self.configs())
        lines = table.strip().splitlines()
        assert len(lines) == 5
        assert lines[0].startswith("arm,")
        assert [ln.split(",")[0] for ln in lines[1:]] == list(evalharness.ARM_ORDER)

    def test_missing_arm_rejected(self):
        reports = {arm: make_report() for arm in ("baseline", "cr")}
        with pytest.raises(ValueError, match="cr_igr"):
            ablation_table(reports, self.configs())

    def test_regeneration_identical(self):
        reports = {arm: make_report() for arm in evalharness.ARM_ORDER}
        assert ablation_table(reports, self.configs()) == \
            ablation_table(reports, self.configs())

    def test_inactive_flags_marked(self):
        reports = {arm: make_report() for arm in evalharness.ARM_ORDER}
        table = ablation_table(reports, self.configs())
        baseline_row = table.strip().splitlines()[1].split(",")
        assert baseline_row[1] == "False"  # rank_cls inactive on the baseline


class TestReportCsv:
    def test_aggregate_row_is_nanmean(self):
        report = MetricReport(per_sequence=[
            SequenceMetrics("a", 0.4, 0.6, 0.8, float("nan"), 0.2),
            SequenceMetrics("b", 0.6, 0.8, 1.0, 0.3, 0.4),
        ])
        agg = report.aggregate()
        assert agg["success_auc"] == pytest.approx(0.5)
        assert agg["distractor_margin"] == pytest.approx(0.3)
        text = report_csv(report)
        assert text.splitlines()[-1].startswith("aggregate,")

    def test_csv_deterministic(self):
        report = make_report()
        assert report_csv(report) == report_csv(report)


class TestEvaluateEndToEnd:
    def test_trained_model_clears_easy_floor(self, trained_baseline):
        cfg, result = trained_baseline
        seqs = pipeline.eval_pool(cfg)
        report = evalharness.evaluate(result.params, seqs, cfg)
        agg = report.aggregate()
        assert agg["success_auc"] >= 0.4
        assert agg["rank_consistency"] >= 0.5
        assert len(report.per_sequence) == cfg.eval_sequences

    def test_evaluation_deterministic(self, trained_baseline):
        cfg, result = trained_baseline
        seqs = pipeline.eval_pool(cfg)
        a = report_csv(evalharness.evaluate(result.params, seqs, cfg))
        b = report_csv(evalharness.evaluate(result.params, seqs, cfg))
        assert a == b
