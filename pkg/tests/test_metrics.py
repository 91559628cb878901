import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from oracles import ap_sweep, auc_pairs, precision_at_recall_sweep

from dyndetect.errors import InvalidArgumentError, UndefinedMetricError
from dyndetect.metrics import (
    average_precision,
    evaluate,
    precision_at_recall,
    precision_recall_curve,
    reports_to_csv,
    roc_auc,
    roc_curve,
)

SCORES = [0.9, 0.8, 0.7, 0.6]
FLAGS = [1, 0, 1, 0]


def test_ap_hand_example():
    assert average_precision(SCORES, FLAGS) == pytest.approx(5 / 6, abs=1e-15)


def test_auc_hand_example():
    assert roc_auc(SCORES, FLAGS) == 0.75


def test_precision_at_95_hand_example():
    assert precision_at_recall([0.9, 0.8, 0.7, 0.6, 0.5], [1, 1, 0, 1, 0]) == 0.75


def test_single_positive_ranked_last():
    flags = [0] * 9 + [1]
    scores = np.linspace(1.0, 0.1, 10)
    assert precision_at_recall(scores, flags) == pytest.approx(0.1)


def test_perfect_ranking():
    report = evaluate([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert (report.map, report.roc_auc, report.precision_at_95) == (1.0, 1.0, 1.0)


def test_inverted_ranking():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0


def test_all_tied_gives_prevalence():
    flags = [1, 0, 0, 1, 0]
    assert average_precision([0.5] * 5, flags) == pytest.approx(0.4)
    assert roc_auc([0.5] * 5, flags) == 0.5


def test_chance_auc(rng):
    flags = np.r_[np.ones(5000, dtype=int), np.zeros(5000, dtype=int)]
    assert abs(roc_auc(rng.random(10000), flags) - 0.5) < 0.02


@pytest.mark.parametrize("fn", [average_precision, roc_auc, precision_at_recall])
def test_no_positives_is_undefined(fn):
    with pytest.raises(UndefinedMetricError):
        fn([0.3, 0.2], [0, 0])


def test_auc_needs_negatives():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.3, 0.2], [1, 1])


def test_length_mismatch():
    with pytest.raises(InvalidArgumentError):
        average_precision([0.1, 0.2], [1])


def test_curves_shapes():
    fpr, tpr, thr = roc_curve(SCORES, FLAGS)
    assert fpr.tolist() == [0.0, 0.0, 0.5, 0.5, 1.0]
    assert tpr.tolist() == [0.0, 0.5, 0.5, 1.0, 1.0]
    precision, recall, _ = precision_recall_curve(SCORES, FLAGS)
    np.testing.assert_allclose(precision, [1.0, 0.5, 2 / 3, 0.5])
    np.testing.assert_allclose(recall, [0.5, 0.5, 1.0, 1.0])


def test_report_csv(tmp_path):
    rep = evaluate(SCORES, FLAGS, method="baseline", noise_kind="symmetric", noise_ratio=0.4)
    text = reports_to_csv([rep], tmp_path / "r.csv")
    assert text.splitlines() == [
        "method,noise_kind,noise_ratio,map,roc_auc,precision_at_95",
        "baseline,symmetric,0.4,0.833333,0.750000,0.666667",
    ]


# small score alphabet forces ties
instances = st.integers(1, 50).flatmap(
    lambda n: st.tuples(
        st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]) | st.floats(0, 1), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )
)


@given(instances)
@settings(max_examples=200, deadline=None)
def test_matches_brute_force_oracles(inst):
    scores, flags = inst
    assume(0 < sum(flags) < len(flags))
    assert average_precision(scores, flags) == ap_sweep(scores, flags)
    assert roc_auc(scores, flags) == auc_pairs(scores, flags)
    assert precision_at_recall(scores, flags) == precision_at_recall_sweep(scores, flags)


@given(instances)
@settings(max_examples=50, deadline=None)
def test_invariant_under_increasing_transform(inst):
    scores, flags = inst
    assume(0 < sum(flags) < len(flags))
    moved = [3.0 * s + 1.0 for s in scores]
    assume(len(set(moved)) == len(set(scores)))
    assert roc_auc(moved, flags) == roc_auc(scores, flags)
    assert average_precision(moved, flags) == average_precision(scores, flags)
