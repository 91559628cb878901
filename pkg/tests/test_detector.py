import math

import numpy as np
import pytest
from oracles import central_differences, max_relative_error

from dyndetect.dynamics import DynamicsTable, resample_rows
from dyndetect.errors import DivergenceError, InvalidArgumentError
from dyndetect.detector import (
    DetectorModel,
    DetectorTrainConfig,
    baseline_score,
    detector_forward,
    detector_loss_and_grad,
    fine_tune,
    hard_decisions,
    init_detector,
    score,
    train_detector,
    zero_detector,
)
from dyndetect.optim import AdamWConfig, AdamWState, adamw_step, clip_grad_norm, fan_in_scales


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def toy_table(n=120, t=10, seed=0, flags=None):
    """Flagged rows trend low, clean rows trend high."""
    rng = np.random.default_rng(seed)
    if flags is None:
        flags = (np.arange(n) % 3 == 0).astype(int)
    base = np.where(flags[:, None] == 1, 0.2, 0.8)
    values = np.clip(base + 0.1 * rng.standard_normal((n, t)), 0, 1)
    return DynamicsTable(values, labels=np.zeros(n, dtype=int), flags=flags)


SMALL = dict(hidden_size=4, num_layers=1)


class TestForward:
    def test_zero_model_is_half(self, rng):
        model = zero_detector(7, hidden_size=5)
        np.testing.assert_array_equal(detector_forward(model, rng.random((20, 7))), 0.5)
        assert detector_forward(model, rng.random(7)) == 0.5

    def test_output_strictly_inside_unit_interval(self, rng):
        model = init_detector(6, hidden_size=8, seed=3)
        for layer in model.layers:
            for p in layer.values():
                p *= 20
        out = detector_forward(model, rng.random((10000, 6)))
        assert ((out > 0) & (out < 1)).all()

    def test_hand_evaluated_single_cell(self):
        # gates ordered input, forget, candidate, output
        w = np.array([[0.5], [-1.0], [2.0], [1.5]])
        b = np.array([0.1, 0.2, -0.3, 0.4])
        layer = {"w_ih": w, "w_hh": np.zeros((4, 1)), "b_ih": b, "b_hh": np.zeros(4)}
        model = DetectorModel([layer], np.array([2.0]), -0.5, 1)
        x = 0.6
        i = sig(0.5 * x + 0.1)
        g = math.tanh(2.0 * x - 0.3)
        o = sig(1.5 * x + 0.4)
        h = o * math.tanh(i * g)
        assert detector_forward(model, [x]) == pytest.approx(sig(2.0 * h - 0.5), abs=1e-14)

    def test_two_step_recurrence_by_hand(self):
        w = np.array([[0.3], [0.7], [-0.4], [0.9]])
        u = np.array([[0.2], [-0.5], [1.1], [0.6]])
        b = np.array([0.0, 1.0, 0.1, -0.2])
        layer = {"w_ih": w, "w_hh": u, "b_ih": b, "b_hh": np.zeros(4)}
        model = DetectorModel([layer], np.array([1.3]), 0.2, 2)
        h = c = 0.0
        for x in (0.25, 0.8):
            a = w[:, 0] * x + u[:, 0] * h + b
            i, f, g, o = sig(a[0]), sig(a[1]), math.tanh(a[2]), sig(a[3])
            c = f * c + i * g
            h = o * math.tanh(c)
        assert detector_forward(model, [0.25, 0.8]) == pytest.approx(sig(1.3 * h + 0.2), abs=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(InvalidArgumentError, match="resample"):
            detector_forward(zero_detector(5, 2), np.zeros(4))

    def test_forget_bias_initialised_to_one(self):
        model = init_detector(4, hidden_size=3, seed=0)
        for layer in model.layers:
            np.testing.assert_array_equal(layer["b_ih"][3:6] + layer["b_hh"][3:6], 1.0)


class TestLossAndGrad:
    def test_zero_model_loss_is_ln2(self, rng):
        loss, _ = detector_loss_and_grad(zero_detector(5, 3), rng.random((9, 5)), rng.integers(0, 2, 9))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = init_detector(8, hidden_size=3, num_layers=2, seed=seed)
        seqs, flags = rng.random((4, 8)), rng.integers(0, 2, 4)
        _, analytic = detector_loss_and_grad(model, seqs, flags)
        numeric = central_differences(lambda: detector_loss_and_grad(model, seqs, flags)[0], model.params())
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_duplicated_batch_is_invariant(self, rng):
        model = init_detector(6, hidden_size=4, seed=1)
        seqs, flags = rng.random((5, 6)), np.array([0, 1, 1, 0, 1])
        loss, grads = detector_loss_and_grad(model, seqs, flags)
        loss2, grads2 = detector_loss_and_grad(model, np.vstack([seqs, seqs]), np.r_[flags, flags])
        assert loss2 == pytest.approx(loss, rel=1e-13)
        for name in grads:
            np.testing.assert_allclose(grads2[name], grads[name], rtol=1e-11, atol=1e-15)

    def test_bad_flags(self):
        with pytest.raises(InvalidArgumentError):
            detector_loss_and_grad(zero_detector(3, 2), np.zeros((2, 3)), [0, 2])


class TestAdamW:
    def test_first_step_by_hand(self):
        params, grads = {"w": np.array([1.0])}, {"w": np.array([0.5])}
        adamw_step(params, grads, AdamWState(), AdamWConfig(0.1, 0.9, 0.999, 1e-8, 0.0))
        # m_hat = 0.5, v_hat = 0.25 after bias correction
        assert abs(params["w"][0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))) <= 1e-10
        assert params["w"][0] == pytest.approx(0.9, abs=1e-8)

    def test_zero_gradient_no_decay(self, rng):
        theta = rng.standard_normal(6)
        params = {"w": theta.copy()}
        adamw_step(params, {"w": np.zeros(6)}, AdamWState(), AdamWConfig(weight_decay=0.0))
        np.testing.assert_array_equal(params["w"], theta)

    def test_decoupled_decay_is_pure_shrink(self, rng):
        theta = rng.standard_normal((3, 4))
        params = {"w": theta.copy()}
        state = AdamWState()
        cfg = AdamWConfig(learning_rate=0.05, weight_decay=0.2)
        for step in range(1, 4):
            adamw_step(params, {"w": np.zeros((3, 4))}, state, cfg)
            np.testing.assert_allclose(params["w"], theta * (1 - 0.05 * 0.2) ** step, rtol=1e-14)

    def test_zero_betas_give_sign_steps(self, rng):
        theta, g = rng.standard_normal(10), rng.standard_normal(10)
        params = {"w": theta.copy()}
        adamw_step(params, {"w": g}, AdamWState(), AdamWConfig(0.01, 0.0, 0.0, 0.0, 0.0))
        np.testing.assert_allclose(params["w"], theta - 0.01 * np.sign(g), rtol=1e-14)

    def test_lr_scales(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        adamw_step(params, {"a": np.ones(2), "b": np.ones(2)}, AdamWState(), AdamWConfig(0.1, eps=0.0, weight_decay=0.0), {"a": 0.5})
        np.testing.assert_allclose(params["a"], 0.95)
        np.testing.assert_allclose(params["b"], 0.9)

    def test_non_finite_gradient(self):
        with pytest.raises(FloatingPointError):
            adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, AdamWState(), AdamWConfig())

    def test_clip_and_fan_in(self):
        grads = {"a": np.array([3.0, 4.0])}
        assert clip_grad_norm(grads, 1.0) == 5.0
        assert np.linalg.norm(grads["a"]) == pytest.approx(1.0)
        scales = fan_in_scales({"m": np.zeros((8, 4)), "head.w": np.zeros(16), "b": np.zeros(3)})
        assert scales == {"m": 0.5, "head.w": 0.25}


class TestTraining:
    def test_loss_decreases(self):
        result = train_detector(toy_table(), DetectorTrainConfig(epochs=5, **SMALL), return_losses=True)
        assert len(result.epoch_losses) == 6
        assert result.epoch_losses[-1] < result.epoch_losses[0]

    def test_all_clean_flags_drive_scores_down(self):
        table = toy_table(flags=np.zeros(120, dtype=int))
        model = train_detector(table, DetectorTrainConfig(epochs=10, **SMALL))
        assert score(model, table).mean() < 0.1

    def test_separates_toy_classes(self):
        table = toy_table()
        s = score(train_detector(table, DetectorTrainConfig(epochs=5, **SMALL)), table)
        assert s[table.flags == 1].mean() > s[table.flags == 0].mean()

    def test_deterministic(self):
        cfg = DetectorTrainConfig(epochs=2, **SMALL)
        a, b = train_detector(toy_table(), cfg), train_detector(toy_table(), cfg)
        assert a.to_dict() == b.to_dict()

    def test_requires_flags(self):
        table = DynamicsTable(np.full((3, 4), 0.5), labels=[0, 0, 0])
        with pytest.raises(InvalidArgumentError):
            train_detector(table)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        model = init_detector(10, hidden_size=4, num_layers=1)
        model.head_w[:] = np.inf
        with pytest.raises(DivergenceError):
            fine_tune(model, toy_table(), DetectorTrainConfig(epochs=1, **SMALL))

    @pytest.mark.parametrize("cfg", [DetectorTrainConfig(epochs=0), DetectorTrainConfig(learning_rate=0.0, epochs=2)])
    def test_noop_fine_tune(self, cfg):
        model = init_detector(10, hidden_size=4, num_layers=1, seed=5)
        tuned = fine_tune(model, toy_table(t=14), cfg)
        assert tuned.to_dict() == model.to_dict()
        assert tuned is not model

    def test_fine_tune_leaves_original_untouched(self):
        model = init_detector(10, hidden_size=4, num_layers=1, seed=5)
        before = model.to_dict()
        fine_tune(model, toy_table(), DetectorTrainConfig(epochs=1, learning_rate=0.03, **SMALL))
        assert model.to_dict() == before


class TestScoring:
    def test_zero_model_scores_half(self):
        np.testing.assert_array_equal(score(zero_detector(10, 3), toy_table(t=17)), 0.5)

    def test_permutation_equivariant(self, rng):
        model = init_detector(10, hidden_size=5, seed=2)
        table = toy_table()
        perm = rng.permutation(table.num_samples)
        np.testing.assert_array_equal(score(model, table.take(perm)), score(model, table)[perm])

    def test_refined_table_scores_match(self):
        # refining T -> 2T-1 keeps every original point, so resampling back is exact
        model = init_detector(10, hidden_size=5, seed=2)
        table = toy_table()
        fine = DynamicsTable(resample_rows(table.values, 19), labels=table.labels, flags=table.flags)
        np.testing.assert_allclose(score(model, fine), score(model, table), atol=1e-12)

    def test_save_load_exact(self, tmp_path):
        model = init_detector(10, hidden_size=5, seed=4)
        model.save(tmp_path / "det.json")
        loaded = DetectorModel.load(tmp_path / "det.json")
        np.testing.assert_array_equal(score(loaded, toy_table()), score(model, toy_table()))
        assert loaded.to_dict() == model.to_dict()

    def test_empty_table(self):
        table = DynamicsTable(np.zeros((0, 4)), labels=np.zeros(0, dtype=int))
        with pytest.raises(InvalidArgumentError):
            score(zero_detector(4, 2), table)

    def test_baseline(self):
        table = DynamicsTable([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.2, 0.4, 0.6]], labels=[0, 0, 0])
        np.testing.assert_allclose(baseline_score(table), [0.0, 1.0, 0.6])
        assert hard_decisions([0.2, 0.5, 0.51]).tolist() == [0, 0, 1]


def test_matches_torch_lstm(rng):
    torch = pytest.importorskip("torch")
    model = init_detector(9, hidden_size=6, num_layers=2, seed=7)
    net = torch.nn.LSTM(1, 6, num_layers=2, batch_first=True).double()
    with torch.no_grad():
        for k, layer in enumerate(model.layers):
            for name in ("w_ih", "w_hh", "b_ih", "b_hh"):
                getattr(net, f"{name.replace('w_', 'weight_').replace('b_', 'bias_')}_l{k}").copy_(torch.from_numpy(layer[name]))
    seqs = rng.random((7, 9))
    out, _ = net(torch.from_numpy(seqs)[:, :, None])
    expected = torch.sigmoid(out[:, -1] @ torch.from_numpy(model.head_w) + model.head_bias).detach().numpy()
    np.testing.assert_allclose(detector_forward(model, seqs), expected, atol=1e-12)
