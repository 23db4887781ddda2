import numpy as np
import pytest

from tsastat import autodiff as ad
from tsastat import models
from tsastat.models import ARCHITECTURES, ArchSpec, Conv1D, Dense, Flatten, MaxPool, OutputDense, ReLU

from conftest import fd_gradient, rel_err

MICRO = ArchSpec("micro", (Conv1D(3, 4), ReLU(), MaxPool(2), Flatten(), Dense(6), ReLU(), OutputDense()))


@pytest.mark.parametrize("arch, shape", [("A0", (1, 128)), ("A1", (2, 40)), ("A2", (3, 30))])
def test_architectures_build_and_predict(arch, shape):
    net = models.init_network(arch, shape, 4, seed=0)
    X = np.random.default_rng(0).standard_normal((5,) + shape)
    z = net.logits(X)
    assert z.shape == (5, 4)
    np.testing.assert_array_equal(net.predict(X), z.argmax(axis=1))
    assert isinstance(net.predict(X[0]), int)


def test_table_architectures():
    a0 = ARCHITECTURES["A0"].layers
    assert a0[0] == Conv1D(66, 12) and a0[2] == MaxPool(12) and Dense(1024) in a0
    a2 = ARCHITECTURES["A2"].layers
    assert [l for l in a2 if isinstance(l, Conv1D)] == [Conv1D(100, 5), Conv1D(50, 5)]


def test_unknown_arch_and_bad_input_shape():
    with pytest.raises(ValueError, match="unknown architecture"):
        models.init_network("A9", (1, 10), 2)
    net = models.init_network(MICRO, (1, 12), 2)
    with pytest.raises(ValueError, match="expected input shape"):
        net.predict(np.zeros((1, 13)))


def test_seeded_init_is_reproducible():
    a = models.init_network("A1", (1, 32), 3, seed=7)
    b = models.init_network("A1", (1, 32), 3, seed=7)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


@pytest.mark.parametrize("seed", range(4))
def test_parameter_gradients_match_finite_differences(seed):
    r = np.random.default_rng(seed)
    net = models.init_network(MICRO, (2, 12), 3, seed=seed)
    X = r.standard_normal((4, 2, 12))
    y = r.integers(0, 3, 4)
    g = ad.Graph()
    x = g.leaf("x", differentiable=False)
    g.output("loss", ad.mean(ad.softmax_cross_entropy(net.build(g, x, trainable=True), y)))
    g.forward({"x": X, **net.params})
    grads = g.gradient("loss", net.param_names)
    for k in net.param_names:
        def f(v, k=k):
            return float(g.forward({"x": X, **{**net.params, k: v}})["loss"])
        assert rel_err(grads[k], fd_gradient(f, net.params[k])) <= 1e-4, k


def test_training_reduces_loss_and_is_deterministic():
    r = np.random.default_rng(0)
    X = r.standard_normal((40, 1, 12))
    y = (X.mean(axis=(1, 2)) > 0).astype(int)
    net = models.init_network(MICRO, (1, 12), 2, seed=0)
    a, ha = models.train(net, X, y, epochs=5, seed=1)
    b, hb = models.train(net, X, y, epochs=5, seed=1)
    assert ha[-1]["loss"] < ha[0]["loss"]
    assert repr(ha) == repr(hb)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    # the input network is left untouched
    fresh = models.init_network(MICRO, (1, 12), 2, seed=0)
    for k in net.params:
        np.testing.assert_array_equal(net.params[k], fresh.params[k])


def test_training_input_validation():
    net = models.init_network(MICRO, (1, 12), 2)
    with pytest.raises(ValueError):
        models.train(net, np.zeros((0, 1, 12)), np.zeros(0, int))
    with pytest.raises(ValueError):
        models.train(net, np.zeros((2, 1, 12)), np.array([0, 5]))


def test_divergent_training_raises():
    net = models.init_network(MICRO, (1, 12), 2)
    # activations overflow to inf in the first forward pass
    X = np.random.default_rng(0).standard_normal((8, 1, 12)) * 1e200
    with pytest.raises(models.TrainingDivergedError):
        models.train(net, X, np.arange(8) % 2, epochs=1)


def test_checkpoint_round_trip(tmp_path):
    net = models.init_network("A1", (1, 32), 3, seed=2)
    net.label_map = {"1": 0, "2": 1, "3": 2}
    p = models.save_checkpoint(net, tmp_path / "m.tsn")
    back = models.load_checkpoint(p, expect_arch="A1")
    X = np.random.default_rng(0).standard_normal((3, 1, 32))
    np.testing.assert_array_equal(back.logits(X), net.logits(X))
    assert back.label_map == net.label_map


def test_checkpoint_errors(tmp_path):
    net = models.init_network("A1", (1, 32), 3)
    p = models.save_checkpoint(net, tmp_path / "m.tsn")
    with pytest.raises(models.CheckpointError, match="architecture"):
        models.load_checkpoint(p, expect_arch="A0")
    raw = p.read_bytes()
    (tmp_path / "cut.tsn").write_bytes(raw[:-8])
    with pytest.raises(models.CheckpointError, match="corrupt"):
        models.load_checkpoint(tmp_path / "cut.tsn")
    (tmp_path / "junk.tsn").write_bytes(b"not json\n")
    with pytest.raises(models.CheckpointError):
        models.load_checkpoint(tmp_path / "junk.tsn")
    with pytest.raises(FileNotFoundError):
        models.load_checkpoint(tmp_path / "missing.tsn")


def test_accuracy_of_small_net(small_net, cbf_small):
    X, y = cbf_small.arrays("test")
    assert models.accuracy(small_net, X, y) > 0.6
