import numpy as np
import pytest

from deepfault.errors import ArgumentError
from deepfault.network import Dataset, Network
from deepfault.trainer import LossHistory, TrainConfig, evaluate_accuracy, init_network, train

XOR = Dataset(np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]), [0, 1, 1, 0])


def constant_net(winner, classes=3, width=2):
    """A net whose output is always ``winner`` regardless of input."""
    w_out = np.zeros((classes, width))
    b_out = np.zeros(classes)
    b_out[winner] = 5.0
    return Network([np.zeros((width, width)), w_out], [np.zeros(width), b_out])


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0}, {"learning_rate": 0.0}, {"batch_size": 0}, {"hidden": ()}, {"hidden": (4, 0)},
    ])
    def test_rejected(self, kwargs):
        with pytest.raises(ArgumentError):
            TrainConfig(**kwargs)

    def test_defaults_use_eight_hidden_layers_of_twenty(self):
        assert TrainConfig().hidden == (20,) * 8


class TestTrain:
    def test_xor(self):
        cfg = TrainConfig(hidden=(8,), learning_rate=0.1, batch_size=4, epochs=2000, seed=1)
        net = train(XOR, cfg)
        assert evaluate_accuracy(net, XOR) == 1.0

    def test_bit_identical_reruns(self):
        rng = np.random.default_rng(0)
        data = Dataset(rng.normal(size=(50, 5)), rng.integers(0, 3, size=50))
        cfg = TrainConfig(hidden=(6, 6), epochs=3, batch_size=8, seed=11)
        assert train(data, cfg) == train(data, cfg)

    def test_seed_changes_result(self):
        cfg = TrainConfig(hidden=(4,), epochs=1, batch_size=2)
        assert train(XOR, cfg) != train(XOR, TrainConfig(hidden=(4,), epochs=1, batch_size=2, seed=1))

    def test_init_is_glorot_bounded(self):
        cfg = TrainConfig(hidden=(30, 10))
        weights, biases = init_network(40, 5, cfg)
        for w in weights:
            fan_out, fan_in = w.shape
            assert np.max(np.abs(w)) <= np.sqrt(6.0 / (fan_in + fan_out))
        assert all(np.all(b == 0) for b in biases)

    def test_empty_data(self):
        with pytest.raises(ArgumentError):
            train([], TrainConfig(epochs=1))

    def test_labels_out_of_range(self):
        with pytest.raises(ArgumentError):
            train(XOR, TrainConfig(epochs=1), num_classes=1)

    def test_on_epoch_and_loss_history(self):
        history = LossHistory(XOR)
        seen = []
        cfg = TrainConfig(hidden=(8,), learning_rate=0.1, batch_size=4, epochs=50, seed=1)

        def on_epoch(epoch, net):
            seen.append(epoch)
            history(epoch, net)

        train(XOR, cfg, on_epoch=on_epoch)
        assert seen == list(range(1, 51))
        assert len(history.losses) == 50
        assert history.losses[-1] < history.losses[0]


class TestAccuracy:
    def test_always_right(self):
        data = Dataset(np.zeros((3, 2)), [1, 1, 1])
        assert evaluate_accuracy(constant_net(1), data) == 1.0

    def test_never_right(self):
        data = Dataset(np.zeros((3, 2)), [0, 2, 0])
        assert evaluate_accuracy(constant_net(1), data) == 0.0

    def test_three_of_four(self):
        data = Dataset(np.zeros((4, 2)), [1, 1, 0, 1])
        assert evaluate_accuracy(constant_net(1), data) == 0.75

    def test_empty(self):
        with pytest.raises(ArgumentError):
            evaluate_accuracy(constant_net(1), [])


@pytest.mark.mnist
@pytest.mark.slow
class TestMnistTraining:
    def test_test_accuracy(self, mnist_model):
        assert mnist_model["test_accuracy"] >= 0.93

    def test_loss_mostly_non_increasing(self, mnist_model):
        assert len(mnist_model["losses"]) == 30
        assert mnist_model["regressions"] <= 2
