import numpy as np
import pytest

from adapts.exceptions import MetricError
from adapts.metrics import (
    MetricRecord,
    aggregate_records,
    auroc,
    average_precision,
    best_f1,
    build_memory_report,
    compute_metric_record,
    format_mib,
)

# --- independent brute-force references ---------------------------------


def auroc_bruteforce(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def pr_points_bruteforce(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = labels.sum()
    pts = []
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = float(np.sum(pred & (labels == 1)))
        fp = float(np.sum(pred & (labels == 0)))
        pts.append((tp / n_pos, tp / (tp + fp)))
    return pts


def ap_bruteforce(scores, labels):
    total, prev_r = 0.0, 0.0
    for r, p in pr_points_bruteforce(scores, labels):
        total += (r - prev_r) * p
        prev_r = r
    return total


def f1_bruteforce(scores, labels):
    best = 0.0
    for r, p in pr_points_bruteforce(scores, labels):
        if p + r > 0:
            best = max(best, 2 * p * r / (p + r))
    return best


def random_instance(rng):
    n = int(rng.integers(2, 65))
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[int(rng.integers(0, n))] = 1
    if labels.sum() == n:
        labels[int(rng.integers(0, n))] = 0
    if rng.random() < 0.5:
        scores = rng.integers(0, 5, size=n).astype(np.float64)  # heavy ties
    else:
        scores = rng.standard_normal(n)
    return scores, labels


# --- worked examples ------------------------------------------------------


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties_is_half_with_warning(self):
        with pytest.warns(UserWarning, match="0.5"):
            assert auroc([0.3, 0.3, 0.3], [0, 1, 1]) == 0.5

    def test_worked_example(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            auroc([0.1, 0.2], [1, 1])

    def test_complement_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s, l = random_instance(rng)
            assert auroc(s, l) == pytest.approx(1.0 - auroc(s, 1 - l), abs=1e-12)


class TestAveragePrecision:
    def test_positive_ranked_first(self):
        assert average_precision([0.9, 0.1], [1, 0]) == 1.0

    def test_worked_example(self):
        assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5.0 / 6.0)

    def test_all_positives(self):
        assert average_precision([0.4, 0.9, 0.1], [1, 1, 1]) == 1.0

    def test_no_positives_rejected(self):
        with pytest.raises(MetricError):
            average_precision([0.4, 0.9], [0, 0])


class TestBestF1:
    def test_perfect_separation(self):
        assert best_f1([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_worked_example(self):
        assert best_f1([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.8)

    def test_single_positive_ranked_last(self):
        for n in (3, 7, 20):
            scores = np.arange(n, dtype=float)
            labels = np.zeros(n, dtype=int)
            labels[0] = 1  # lowest score
            assert best_f1(scores, labels) == pytest.approx(2.0 / (n + 1))


def test_oracle_agreement_on_random_instances():
    rng = np.random.default_rng(42)
    for _ in range(200):
        scores, labels = random_instance(rng)
        assert auroc(scores, labels) == pytest.approx(auroc_bruteforce(scores, labels), abs=1e-9)
        assert average_precision(scores, labels) == pytest.approx(ap_bruteforce(scores, labels), abs=1e-9)
        assert best_f1(scores, labels) == pytest.approx(f1_bruteforce(scores, labels), abs=1e-9)


def test_monotone_invariance():
    rng = np.random.default_rng(7)
    transforms = [np.exp, lambda x: x**3 + 2 * x, lambda x: 2 * x + 1]
    for _ in range(30):
        scores, labels = random_instance(rng)
        t = transforms[int(rng.integers(0, len(transforms)))]
        assert auroc(t(scores), labels) == pytest.approx(auroc(scores, labels), abs=1e-9)
        assert average_precision(t(scores), labels) == pytest.approx(
            average_precision(scores, labels), abs=1e-9
        )
        assert best_f1(t(scores), labels) == pytest.approx(best_f1(scores, labels), abs=1e-9)


class TestRecordsAndAggregation:
    def test_oracle_scores_pin_pixel_metrics(self):
        masks = [np.zeros((4, 4)), np.ones((4, 4))]
        maps = [m.astype(np.float64) for m in masks]
        rec = compute_metric_record("c", [0.0, 1.0], [0, 1], maps, masks)
        assert rec.p_roc == 1.0
        assert rec.ap == 1.0
        assert rec.p_f1 == 1.0
        assert rec.i_roc == 1.0

    def test_all_tie_scores_report_half(self):
        masks = [np.zeros((2, 2)), np.ones((2, 2))]
        maps = [np.zeros((2, 2)), np.zeros((2, 2))]
        with pytest.warns(UserWarning):
            rec = compute_metric_record("c", [0.0, 0.0], [0, 1], maps, masks)
        assert rec.i_roc == 0.5
        assert rec.p_roc == 0.5

    def test_single_record_aggregates_to_itself(self):
        rec = MetricRecord("c", 0.9, 0.8, 0.7, 0.6, 10, routing_accuracy=1.0)
        agg = aggregate_records([rec])
        assert (agg.i_roc, agg.p_roc, agg.p_f1, agg.ap) == (0.9, 0.8, 0.7, 0.6)
        assert agg.category == "mean"
        assert agg.n_images == 10

    def test_unweighted_mean(self):
        a = MetricRecord("a", 1.0, 1.0, 1.0, 1.0, 5)
        b = MetricRecord("b", 0.5, 0.0, 0.5, 0.0, 500)
        agg = aggregate_records([a, b])
        assert agg.i_roc == pytest.approx(0.75)
        assert agg.p_roc == pytest.approx(0.5)

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            aggregate_records([])


class TestMemoryReport:
    def test_total_is_backbone_plus_additional(self):
        report = build_memory_report(1000, {"adapters/a": 300, "prototypes": 8})
        assert report.total_bytes == 1308
        assert report.additional_bytes == 308
        assert report.breakdown["backbone"] == 1000

    def test_format_mib_truncates(self):
        assert format_mib(10522624) == "10.03"  # 10.0352 MiB
        assert format_mib(11053056) == "10.54"
        assert format_mib(22098944) == "21.07"  # 21.0752 MiB
        assert format_mib(527360) == "0.50"
