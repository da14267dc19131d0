import math

import numpy as np
import pytest

from bmia.data import LabeledDataset, make_synthetic_classification
from bmia.nn import (
    MlpArchitecture,
    MlpModel,
    TrainConfig,
    TrainingDivergedError,
    accuracy,
    dumps_model,
    forward,
    last_layer_features,
    load_checkpoint,
    loss_and_grad,
    model_from_dict,
    save_model,
    sgd_train,
    softmax,
    weight_init,
)
from bmia.numkit import RngState


def _random_model(rng, task="classification", activation="tanh"):
    n_hidden = int(rng.integers(0, 3))
    widths = [int(rng.integers(1, 5))] + [int(rng.integers(2, 6)) for _ in range(n_hidden)]
    if task == "quantile":
        taus = tuple(sorted(rng.uniform(0.05, 0.95, size=int(rng.integers(1, 4)))))
        widths.append(len(taus))
    else:
        taus = ()
        widths.append(int(rng.integers(2, 5)))
    arch = MlpArchitecture(tuple(widths), activation, task, taus)
    model = weight_init(arch, int(rng.integers(0, 2**31)))
    for b in model.biases:
        b[:] = rng.normal(size=b.shape) * 0.3
    return model


def _targets(rng, model, n):
    arch = model.architecture
    if arch.task == "classification":
        return rng.integers(0, arch.output_width, size=n)
    if arch.task == "regression":
        return rng.normal(size=(n, arch.output_width))
    return rng.normal(size=n)


def _central_differences(model, x, y, wd, step=1e-5):
    grads = []
    for i in range(model.n_layers):
        gw = np.zeros_like(model.weights[i])
        gb = np.zeros_like(model.biases[i])
        for arr, out in ((model.weights[i], gw), (model.biases[i], gb)):
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                up = loss_and_grad(model, x, y, wd)[0]
                arr[idx] = orig - step
                down = loss_and_grad(model, x, y, wd)[0]
                arr[idx] = orig
                out[idx] = (up - down) / (2 * step)
        grads.append((gw, gb))
    return grads


class TestForward:
    def test_identity_network(self):
        arch = MlpArchitecture((2, 2), task="regression")
        model = MlpModel(arch, [np.eye(2)], [np.zeros(2)])
        np.testing.assert_array_equal(forward(model, np.array([1.0, 2.0])), [1.0, 2.0])

    def test_zero_weights_give_final_bias(self):
        arch = MlpArchitecture((3, 4, 2))
        model = MlpModel(arch, [np.zeros((4, 3)), np.zeros((2, 4))],
                         [np.ones(4), np.array([0.5, -1.5])])
        np.testing.assert_array_equal(forward(model, np.array([1.0, -2.0, 3.0])), [0.5, -1.5])

    def test_deterministic(self):
        model = weight_init(MlpArchitecture((5, 8, 3)), 4)
        x = RngState(1).standard_normal(5)
        assert forward(model, x).tobytes() == forward(model, x).tobytes()

    def test_dimension_mismatch(self):
        model = weight_init(MlpArchitecture((5, 8, 3)), 4)
        with pytest.raises(ValueError):
            forward(model, np.zeros(4))

    def test_batch_matches_rows(self):
        model = weight_init(MlpArchitecture((5, 8, 3)), 4)
        x = RngState(2).standard_normal((6, 5))
        batch = forward(model, x)
        for i in range(6):
            np.testing.assert_allclose(batch[i], forward(model, x[i]), rtol=1e-13, atol=1e-13)


class TestLastLayerFeatures:
    def test_single_layer(self):
        model = weight_init(MlpArchitecture((3, 2)), 0)
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(last_layer_features(model, x), [1.0, 2.0, 3.0, 1.0])

    def test_zero_hidden_weights(self):
        arch = MlpArchitecture((2, 3, 2))
        b = np.array([-1.0, 0.5, 2.0])
        model = MlpModel(arch, [np.zeros((3, 2)), np.ones((2, 3))], [b, np.zeros(2)])
        np.testing.assert_array_equal(last_layer_features(model, np.array([4.0, 5.0])),
                                      [0.0, 0.5, 2.0, 1.0])

    def test_bias_absorption_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            model = _random_model(rng, activation=str(rng.choice(["relu", "tanh"])))
            x = rng.normal(size=model.architecture.input_width)
            h = last_layer_features(model, x)
            assert h.shape == (model.weights[-1].shape[1] + 1,)
            assert h[-1] == 1.0
            assert (h @ model.last_layer_augmented().T).tobytes() == forward(model, x).tobytes()


class TestLoss:
    def test_uniform_softmax(self):
        k = 5
        arch = MlpArchitecture((3, 4, k))
        model = weight_init(arch, 0)
        model.weights[-1][:] = 0.0
        x = RngState(0).standard_normal((7, 3))
        loss, _ = loss_and_grad(model, x, np.arange(7) % k, 0.0)
        assert loss == pytest.approx(math.log(k), abs=1e-14)

    def test_regression_zero(self):
        model = MlpModel(MlpArchitecture((2, 1), task="regression"), [np.array([[1.0, 1.0]])],
                         [np.zeros(1)])
        x = np.array([[1.0, 2.0], [3.0, -1.0]])
        loss, _ = loss_and_grad(model, x, np.array([3.0, 2.0]), 0.0)
        assert loss == 0.0

    def test_pinball(self):
        arch = MlpArchitecture((1, 1), task="quantile", taus=(0.9,))
        model = MlpModel(arch, [np.zeros((1, 1))], [np.ones(1)])
        loss, _ = loss_and_grad(model, np.zeros((1, 1)), np.array([2.0]), 0.0)
        assert loss == pytest.approx(0.9, abs=1e-15)

    def test_weight_decay_term(self):
        model = weight_init(MlpArchitecture((3, 4, 2)), 1)
        x = RngState(0).standard_normal((5, 3))
        y = np.array([0, 1, 1, 0, 1])
        base, _ = loss_and_grad(model, x, y, 0.0)
        sq = sum(float((w**2).sum() + (b**2).sum()) for w, b in zip(model.weights, model.biases))
        assert loss_and_grad(model, x, y, 0.3)[0] == pytest.approx(base + 0.15 * sq, rel=1e-14)

    def test_label_out_of_range(self):
        model = weight_init(MlpArchitecture((3, 2)), 1)
        with pytest.raises(ValueError, match="out of range"):
            loss_and_grad(model, np.zeros((1, 3)), np.array([2]), 0.0)

    def test_softmax_normalized(self):
        for scale in (1.0, 5.0, 40.0):
            p = softmax(RngState(5).standard_normal((50, 7)) * scale)
            assert np.all(p > 0)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("task", ["classification", "regression", "quantile"])
    def test_gradient_check(self, task):
        rng = np.random.default_rng({"classification": 1, "regression": 2, "quantile": 3}[task])
        for _ in range(20):
            model = _random_model(rng, task, activation=str(rng.choice(["relu", "tanh"])))
            assert model.n_params() <= 200
            n = int(rng.integers(1, 6))
            x = rng.normal(size=(n, model.architecture.input_width))
            y = _targets(rng, model, n)
            wd = float(rng.uniform(0, 0.1))
            _, grads = loss_and_grad(model, x, y, wd)
            numeric = _central_differences(model, x, y, wd)
            for (gw, gb), (nw, nb) in zip(grads, numeric):
                for a, b in ((gw, nw), (gb, nb)):
                    # Relative 1e-4 with a 1e-8 absolute floor; relu kinks are measure zero.
                    assert np.all(np.abs(a - b) <= np.maximum(1e-4 * np.abs(b), 1e-8)), (a, b)


def _blobs():
    rng = RngState(3)
    n = 200
    labels = np.arange(n) % 2
    centers = np.array([[-1.5, 0.0], [1.5, 0.0]])
    x = centers[labels] + 0.25 * rng.standard_normal((n, 2))
    # Margin 2 between the slabs |x0| >= 1.
    x[:, 0] = np.where(labels == 0, np.minimum(x[:, 0], -1.0), np.maximum(x[:, 0], 1.0))
    return LabeledDataset(x, labels, n_classes=2)


class TestSgd:
    CFG = TrainConfig(learning_rate=0.05, epochs=50, milestone_epochs=(30,), batch_size=16, seed=1)

    def test_separable_blobs(self):
        data = _blobs()
        history = []
        model = sgd_train(weight_init(MlpArchitecture((2, 16, 2)), 0), data, self.CFG, history=history)
        assert accuracy(model, data.features, data.labels) == 1.0
        assert history[-1] <= history[0]

    def test_zero_epochs(self):
        init = weight_init(MlpArchitecture((2, 16, 2)), 0)
        cfg = TrainConfig(epochs=0, milestone_epochs=())
        out = sgd_train(init, _blobs(), cfg)
        for a, b in zip(out.weights, init.weights):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        data = _blobs()
        init = weight_init(MlpArchitecture((2, 16, 2)), 0)
        a = sgd_train(init, data, self.CFG)
        b = sgd_train(init, data, self.CFG)
        assert dumps_model(a) == dumps_model(b)

    def test_lr_schedule(self):
        cfg = TrainConfig(learning_rate=0.1, epochs=120, milestone_epochs=(50, 100))
        assert cfg.lr_at(0) == 0.1
        assert cfg.lr_at(49) == 0.1
        assert cfg.lr_at(50) == pytest.approx(0.01)
        assert cfg.lr_at(100) == pytest.approx(0.001)

    def test_bad_milestones(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=10, milestone_epochs=(5, 3))
        with pytest.raises(ValueError):
            TrainConfig(epochs=10, milestone_epochs=(10,))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_position(self):
        data = make_synthetic_classification(64, 4, 2, seed=0)
        data.features[5, 0] = np.inf
        cfg = TrainConfig(epochs=2, milestone_epochs=(), batch_size=8)
        with pytest.raises(TrainingDivergedError) as err:
            sgd_train(weight_init(MlpArchitecture((4, 3, 2)), 0), data, cfg)
        assert err.value.epoch == 0


class TestWeightInit:
    def test_bounds(self):
        model = weight_init(MlpArchitecture((6, 4, 2)), 0)
        assert np.all(np.abs(model.weights[0]) <= 1.0)
        assert np.all(np.abs(model.weights[1]) <= math.sqrt(6 / 4))
        assert all(np.all(b == 0) for b in model.biases)

    def test_same_seed(self):
        a = weight_init(MlpArchitecture((6, 4, 2)), 9)
        b = weight_init(MlpArchitecture((6, 4, 2)), 9)
        assert dumps_model(a) == dumps_model(b)

    def test_uniform_range(self):
        model = weight_init(MlpArchitecture((100, 100, 2)), 3)
        w = model.weights[0].ravel()
        bound = math.sqrt(6 / 100)
        assert w.size == 10_000
        assert w.min() < -0.9 * bound and w.max() > 0.9 * bound


class TestCheckpoint:
    def test_round_trip_bytes(self, tmp_path):
        model = weight_init(MlpArchitecture((3, 5, 4)), 2)
        model.biases[0][:] = RngState(1).standard_normal(5) / 3
        cfg = TrainConfig(epochs=3, milestone_epochs=(1,))
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        save_model(p1, model, cfg, seed=17)
        loaded, cfg2, seed = load_checkpoint(p1)
        save_model(p2, loaded, cfg2, seed)
        assert p1.read_bytes() == p2.read_bytes()
        assert cfg2 == cfg and seed == 17
        for a, b in zip(loaded.weights, model.weights):
            assert a.tobytes() == b.tobytes()

    def test_version_check(self):
        with pytest.raises(ValueError):
            model_from_dict({"format_version": 99})
