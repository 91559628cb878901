import numpy as np
import pytest

from dyndetect.detector import DetectorModel, init_detector, zero_detector
from dyndetect.errors import InvalidArgumentError
from dyndetect.explain import _weighted_lstsq, explain_instance, sample_masks, write_importance_svg


def last_step_detector(t_len):
    # forget gate pinned shut and no recurrence: h_T depends on x_T alone
    layer = {
        "w_ih": np.array([[0.0], [0.0], [3.0], [0.0]]),
        "w_hh": np.zeros((4, 1)),
        "b_ih": np.array([0.0, -50.0, 0.0, 0.0]),
        "b_hh": np.zeros(4),
    }
    return DetectorModel([layer], np.array([4.0]), 0.0, t_len)


def test_zero_model_has_zero_importance(rng):
    exp = explain_instance(zero_detector(12, 4), rng.random(12), num_perturbations=300)
    np.testing.assert_allclose(exp.epoch_importances, 0.0, atol=1e-8)
    assert exp.prediction == 0.5


def test_last_step_detector_concentrates_late():
    seq = np.r_[np.full(9, 0.9), 0.1]
    exp = explain_instance(last_step_detector(10), seq, num_perturbations=400, seed=3)
    mag = np.abs(exp.epoch_importances)
    assert mag.argmax() == 9
    assert mag[9] > 100 * mag[:9].max()
    assert exp.first_half_share() < 0.01


def test_seeded_explanations_are_deterministic(rng):
    model = init_detector(10, hidden_size=6, seed=1)
    seq = rng.random(10)
    a = explain_instance(model, seq, num_perturbations=200, seed=5)
    b = explain_instance(model, seq, num_perturbations=200, seed=5)
    np.testing.assert_array_equal(a.epoch_importances, b.epoch_importances)
    assert a.fidelity == b.fidelity


def test_windows_share_coefficients(rng):
    model = init_detector(10, hidden_size=6, seed=1)
    exp = explain_instance(model, rng.random(10), num_perturbations=200, window=4)
    imp = exp.epoch_importances
    assert imp.size == 10
    assert np.all(imp[:4] == imp[0]) and np.all(imp[4:8] == imp[4]) and imp[8] == imp[9]


def test_too_few_perturbations():
    with pytest.raises(InvalidArgumentError):
        explain_instance(zero_detector(10, 2), np.zeros(10), num_perturbations=19)


def test_masks(rng):
    masks = sample_masks(6, 50, rng)
    assert masks[0].tolist() == [1] * 6
    assert (masks[1:].sum(axis=1) < 6).all()


def test_rank_deficient_design_uses_ridge():
    design = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    coef, fallback = _weighted_lstsq(design, np.array([1.0, 0.0, 1.0]), np.ones(3))
    assert fallback
    np.testing.assert_allclose(design @ coef, [1.0, 0.0, 1.0], atol=1e-5)
    _, fallback = _weighted_lstsq(np.eye(3), np.ones(3), np.ones(3))
    assert not fallback


def test_outputs(tmp_path, rng):
    exp = explain_instance(init_detector(6, hidden_size=3), rng.random(6), num_perturbations=100)
    exp.to_csv(tmp_path / "imp.csv")
    lines = (tmp_path / "imp.csv").read_text().splitlines()
    assert lines[0] == "epoch,importance" and len(lines) == 7
    write_importance_svg(exp, tmp_path / "imp.svg")
    assert (tmp_path / "imp.svg").read_text().startswith("<svg")
