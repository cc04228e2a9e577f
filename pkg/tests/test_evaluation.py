import itertools

import numpy as np
import pytest

from leukattn.evaluation import (
    ConfusionMatrix2x2,
    MetricsReport,
    auc,
    confusion,
    derive_metrics,
    evaluate_predictions,
)

# confusion[true][pred] over (HEM, ALL)
REFERENCE_CM = ConfusionMatrix2x2.from_counts(964, 18, 26, 1076)


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_confusion_from_samples_reference():
    labels = [0] * 982 + [1] * 1102
    preds = [0] * 964 + [1] * 18 + [0] * 26 + [1] * 1076
    cm = confusion(preds, labels)
    assert cm.counts == REFERENCE_CM.counts and cm.total == 2084


def test_confusion_hand_tally():
    pairs = [(1, 1), (0, 1), (1, 0), (0, 0), (1, 1), (0, 0)]  # (pred, label)
    cm = confusion([p for p, _ in pairs], [y for _, y in pairs])
    # true HEM: preds 0,0 correct and one predicted ALL; true ALL: two right, one missed
    assert cm.array.tolist() == [[2, 1], [1, 2]]


def test_confusion_all_correct_and_errors():
    assert confusion([0, 1, 1], [0, 1, 1]).array.tolist() == [[1, 0], [0, 2]]
    with pytest.raises(ValueError):
        confusion([], [])
    with pytest.raises(ValueError):
        confusion([0, 1], [0])
    with pytest.raises(ValueError):
        confusion([0, 2], [0, 1])
    with pytest.raises(ValueError):
        ConfusionMatrix2x2.from_counts(-1, 0, 0, 0)


def test_reference_matrix_metrics():
    r = derive_metrics(REFERENCE_CM)
    acc = (964 + 1076) / 2084
    p_hem, p_all = 964 / 990, 1076 / 1094
    r_hem, r_all = 964 / 982, 1076 / 1102
    f = lambda p, q: 2 * p * q / (p + q)  # noqa: E731
    w_hem, w_all = 982 / 2084, 1102 / 2084
    assert r.accuracy == pytest.approx(acc, abs=1e-15)
    assert r.precision_weighted == pytest.approx(w_hem * p_hem + w_all * p_all, abs=1e-15)
    assert r.recall_weighted == pytest.approx(acc, abs=1e-15)
    assert r.f1_weighted == pytest.approx(w_hem * f(p_hem, r_hem) + w_all * f(p_all, r_all), abs=1e-15)
    for v in (r.accuracy, r.precision_weighted, r.recall_weighted, r.f1_weighted):
        assert round(100 * v, 2) == 97.89
    assert r.sensitivity == pytest.approx(r_all) and round(100 * r.sensitivity, 1) == 97.6
    assert r.specificity == pytest.approx(r_hem) and round(100 * r.specificity, 1) == 98.2
    assert r.precision_macro == pytest.approx((p_hem + p_all) / 2)
    assert r.n == 2084 and r.zero_division == []


def test_perfect_two_sample():
    r = evaluate_predictions([0, 1], [0, 1], scores=[0.1, 0.9])
    for v in (r.accuracy, r.precision_weighted, r.recall_weighted, r.f1_weighted,
              r.f1_macro, r.sensitivity, r.specificity, r.auc):
        assert v == 1.0


def test_zero_division_flagged():
    r = evaluate_predictions([0, 0, 0], [0, 1, 1])
    assert r.per_class["ALL"]["precision"] == 0.0
    assert "precision:ALL" in r.zero_division
    assert "precision:HEM" not in r.zero_division


def test_weighted_recall_equals_accuracy_random():
    rng = np.random.default_rng(0)
    for _ in range(500):
        c = rng.integers(0, 50, size=4)
        if c.sum() == 0:
            continue
        r = derive_metrics(ConfusionMatrix2x2.from_counts(*map(int, c)))
        assert r.recall_weighted == pytest.approx(r.accuracy, abs=1e-12)
        for v in (r.accuracy, r.precision_weighted, r.f1_weighted, r.f1_macro,
                  r.sensitivity, r.specificity):
            assert 0.0 <= v <= 1.0


def test_macro_equals_weighted_with_equal_support():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        a, b = int(rng.integers(0, n + 1)), int(rng.integers(0, n + 1))
        r = derive_metrics(ConfusionMatrix2x2.from_counts(n - a, a, b, n - b))
        assert r.precision_macro == pytest.approx(r.precision_weighted, abs=1e-12)
        assert r.recall_macro == pytest.approx(r.recall_weighted, abs=1e-12)
        assert r.f1_macro == pytest.approx(r.f1_weighted, abs=1e-12)


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 300)
    p = rng.integers(0, 2, 300)
    s = rng.random(300)
    base = evaluate_predictions(p, y, s).to_dict()
    perm = rng.permutation(300)
    other = evaluate_predictions(p[perm], y[perm], s[perm]).to_dict()
    assert other["confusion"] == base["confusion"]
    for k in ("accuracy", "f1_weighted", "f1_macro", "sensitivity", "specificity", "auc"):
        assert other[k] == pytest.approx(base[k], abs=1e-12)


def test_auc_trivial_cases():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(3)
    s = rng.random(200)
    y = rng.integers(0, 2, 200)
    assert auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)
    coarse = rng.integers(0, 4, 150) / 4.0  # heavy ties
    y2 = rng.integers(0, 2, 150)
    assert auc(coarse, y2) == pytest.approx(pairwise_auc(coarse, y2), abs=1e-12)


def test_auc_small_exhaustive():
    # every labelling of 5 fixed scores with ties
    scores = [0.1, 0.4, 0.4, 0.7, 0.9]
    for labels in itertools.product((0, 1), repeat=5):
        if 0 < sum(labels) < 5:
            assert auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels), abs=1e-15)


def test_auc_monotone_invariance():
    rng = np.random.default_rng(4)
    s = rng.normal(size=120)
    y = rng.integers(0, 2, 120)
    a = auc(s, y)
    assert auc(np.exp(s), y) == pytest.approx(a, abs=1e-15)
    assert auc(3 * s + 7, y) == pytest.approx(a, abs=1e-15)
    assert auc(1 / (1 + np.exp(-s)), y) == pytest.approx(a, abs=1e-15)


def test_report_roundtrip(tmp_path):
    r = evaluate_predictions([0, 1, 1, 0], [0, 1, 0, 0], [0.2, 0.9, 0.6, 0.1])
    path = r.save(tmp_path / "m.json")
    assert MetricsReport.load(path) == r
    d = r.to_dict()
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        MetricsReport.from_dict(d)
    assert "accuracy=75.00%" in r.headline()
