import numpy as np
import pytest

from protovae.data import Dataset, one_hot
from protovae.errors import NumericalError
from protovae.model import ProtoVAE
from protovae.trainer import (
    Adam,
    TrainConfig,
    build_and_train,
    evaluate_accuracy,
    train,
    within_class_min_distance,
)
from protovae import numerics as nx

SMALL = dict(num_classes=3, protos_per_class=2, latent_dim=4, channels=(4, 4), hidden=8, batch_size=8)


def bars(n=48, seed=0):
    """8x8 images with a bright bar whose row encodes the class."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 3
    x = rng.uniform(-1, -0.6, size=(n, 1, 8, 8)).astype(np.float32)
    for i, c in enumerate(labels):
        x[i, 0, 2 + 2 * c, 1:7] = 1.0
    return Dataset(x, one_hot(labels, 3), "bars")


@pytest.fixture(scope="module")
def data():
    return bars()


def snapshot(model):
    return {k: p.data.copy() for k, p in model.parameters().items()}


def test_zero_learning_rate_leaves_parameters(data):
    cfg = TrainConfig(epochs=1, learning_rate=0.0, **SMALL)
    model = ProtoVAE(cfg.model_config(data.image_shape), seed=1)
    before = snapshot(model)
    train(model, data, cfg)
    for name, value in snapshot(model).items():
        np.testing.assert_array_equal(value, before[name], err_msg=name)


def test_same_seed_is_bit_identical(data):
    cfg = TrainConfig(epochs=2, seed=5, **SMALL)
    a, rec_a = build_and_train(data, cfg)
    b, rec_b = build_and_train(data, cfg)
    for name, value in snapshot(a).items():
        assert value.tobytes() == b.parameters()[name].data.tobytes(), name
    np.testing.assert_array_equal([r.csv_row() for r in rec_a], [r.csv_row() for r in rec_b])


def test_different_seed_differs(data):
    a, _ = build_and_train(data, TrainConfig(epochs=1, seed=1, **SMALL))
    b, _ = build_and_train(data, TrainConfig(epochs=1, seed=2, **SMALL))
    assert not np.array_equal(a.prototypes.data, b.prototypes.data)


def test_first_epoch_loss_falls():
    _, records = build_and_train(bars(n=640), TrainConfig(epochs=1, **SMALL))
    first = records[0]
    assert first.last_batch_total < first.first_batch_total


def test_records_per_epoch(data):
    _, records = build_and_train(data, TrainConfig(epochs=3, **SMALL), test_set=data)
    assert [r.epoch for r in records] == [1, 2, 3]
    for r in records:
        assert 0.0 <= r.test_acc <= 1.0
        assert min(r.pred, r.orth, r.recon, r.kl) >= 0


def test_nan_loss_names_batch(data):
    cfg = TrainConfig(epochs=1, **SMALL)
    model = ProtoVAE(cfg.model_config(data.image_shape), seed=0)
    model.params["prototypes"].data[0, 0, 0] = np.nan
    with pytest.raises(NumericalError) as err:
        train(model, data, cfg)
    assert err.value.batch_index == 0


def test_dataset_shape_checked(data):
    cfg = TrainConfig(epochs=1, **SMALL)
    model = ProtoVAE(cfg.model_config((1, 6, 6)), seed=0)
    with pytest.raises(ValueError):
        train(model, data, cfg)


def test_ablation_switches_zero_the_weights():
    w = TrainConfig(disable_kl=True, disable_orth=True).loss_weights()
    assert w.kl == 0 and w.orth == 0 and w.pred == 1 and w.recon == 1


def test_mnist_defaults():
    cfg = TrainConfig()
    assert (cfg.protos_per_class, cfg.latent_dim, cfg.epochs, cfg.batch_size, cfg.learning_rate) == (
        5, 256, 10, 128, 0.001)


def test_adam_first_step_is_lr_sized():
    p = nx.parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.3, -40.0])
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    # bias-corrected first step moves every coordinate by ~lr against the gradient sign
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


class _Fixed:
    """Stand-in model whose eval-mode probabilities are given."""

    def __init__(self, probs):
        self.probs = probs

    def predict_proba(self, images, batch_size=512):
        return self.probs[: len(images)]


def test_accuracy_perfect_and_chance():
    labels = np.arange(100) % 10
    data = Dataset(np.zeros((100, 1, 2, 2), np.float32), one_hot(labels, 10))
    assert evaluate_accuracy(_Fixed(one_hot(labels, 10)), data) == 1.0
    uniform = np.full((100, 10), 0.1)
    # ties resolve to class 0, which is one tenth of a balanced set
    assert evaluate_accuracy(_Fixed(uniform), data) == pytest.approx(0.1)


def test_accuracy_invariant_to_shuffling(data):
    model, _ = build_and_train(data, TrainConfig(epochs=1, **SMALL))
    perm = np.random.default_rng(0).permutation(len(data))
    assert evaluate_accuracy(model, data) == evaluate_accuracy(model, data.subset(perm))


def test_min_distance_detects_collapse():
    cfg = TrainConfig(**SMALL)
    model = ProtoVAE(cfg.model_config((1, 8, 8)), seed=0)
    spread = within_class_min_distance(model)
    model.params["prototypes"].data[:, 1] = model.prototypes.data[:, 0]
    assert spread > 0 and within_class_min_distance(model) == 0
