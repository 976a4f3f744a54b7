"""End-to-end optimization of the ProtoVAE objective with Adam."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import BatchIterator, Dataset
from .errors import NumericalError
from .losses import LossWeights, total_loss
from .model import ModelConfig, ProtoVAE

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "pred", "orth", "recon", "kl", "total", "test_acc")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    num_classes: int = 10
    protos_per_class: int = 5
    latent_dim: int = 256
    epsilon: float = 1e-4
    w_pred: float = 1.0
    w_orth: float = 1.0
    w_recon: float = 1.0
    w_kl: float = 1.0
    disable_orth: bool = False
    disable_kl: bool = False
    detach_mixture_weights: bool = True
    channels: tuple = (32, 64, 128, 256)
    hidden: int = 256
    classifier_init: str = "class"
    prototype_init: str = "clustered"
    center_scale: float = 2.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)

    def loss_weights(self):
        return LossWeights(
            pred=self.w_pred,
            orth=0.0 if self.disable_orth else self.w_orth,
            recon=self.w_recon,
            kl=0.0 if self.disable_kl else self.w_kl,
        )

    def model_config(self, image_shape=(1, 28, 28)):
        return ModelConfig(
            num_classes=self.num_classes,
            protos_per_class=self.protos_per_class,
            latent_dim=self.latent_dim,
            in_channels=image_shape[0],
            image_size=tuple(image_shape[1:]),
            channels=self.channels,
            hidden=self.hidden,
            epsilon=self.epsilon,
            classifier_init=self.classifier_init,
            prototype_init=self.prototype_init,
            center_scale=self.center_scale,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown training options: {sorted(unknown)}")
        return cls(**values)


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


@dataclass
class EpochRecord:
    epoch: int
    pred: float
    orth: float
    recon: float
    kl: float
    total: float
    test_acc: float
    first_batch_total: float = float("nan")
    last_batch_total: float = float("nan")
    seconds: float = 0.0

    def csv_row(self):
        return [self.epoch, self.pred, self.orth, self.recon, self.kl, self.total, self.test_acc]


def evaluate_accuracy(model, dataset: Dataset, batch_size=512):
    """Fraction of eval-mode argmax predictions that match the labels."""
    if len(dataset) == 0:
        return float("nan")
    probs = model.predict_proba(dataset.images, batch_size)
    return float(np.mean(probs.argmax(axis=1) == dataset.targets))


def train(
    model: ProtoVAE,
    train_set: Dataset,
    config: TrainConfig,
    progress: Callable[[dict], None] | None = None,
    test_set: Dataset | None = None,
    rng: np.random.Generator | None = None,
):
    """Optimize ``model`` in place; return ``(model, [EpochRecord, ...])``.

    ``progress`` receives a dict after every batch. Raises
    :class:`NumericalError` naming the batch if the loss stops being finite.
    """
    expected = (model.config.in_channels, *model.config.image_size)
    if train_set.image_shape != expected:
        raise ValueError(f"dataset images {train_set.image_shape} != model input {expected}")
    if train_set.num_classes != model.config.num_classes:
        raise ValueError("dataset and model disagree on the number of classes")

    weights = config.loss_weights()
    optimizer = Adam(model.parameters(), lr=config.learning_rate)
    batches = BatchIterator(train_set, config.batch_size, seed=config.seed)
    rng = rng if rng is not None else np.random.default_rng([config.seed, 1])
    records = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        sums = dict.fromkeys(("pred", "orth", "recon", "kl", "total"), 0.0)
        count = 0
        first = last = float("nan")
        for batch_index, (_, xb, yb) in enumerate(batches):
            model.zero_grad()
            out = model.forward(xb, rng=rng, mode="train")
            losses = total_loss(
                xb, yb, out, model, weights, detach_weights=config.detach_mixture_weights
            )
            values = losses.values()
            if not np.isfinite(values["total"]):
                raise NumericalError(
                    f"non-finite loss {values} in epoch {epoch}, batch {batch_index}",
                    batch_index=batch_index,
                )
            losses.total.backward()
            optimizer.step()
            step += 1
            n = len(xb)
            for key in sums:
                sums[key] += values[key] * n
            count += n
            if batch_index == 0:
                first = values["total"]
            last = values["total"]
            if progress is not None:
                progress({"epoch": epoch, "batch": batch_index, "step": step, **values})
        acc = evaluate_accuracy(model, test_set) if test_set is not None else float("nan")
        means = {k: v / max(count, 1) for k, v in sums.items()}
        record = EpochRecord(
            epoch, **means, test_acc=acc, first_batch_total=first, last_batch_total=last,
            seconds=time.perf_counter() - started,
        )
        log.info("epoch %d: %s", epoch, record)
        records.append(record)
    return model, records


def build_and_train(train_set, config: TrainConfig, test_set=None, progress=None):
    """Create a model sized for ``train_set`` and train it."""
    mcfg = config.model_config(train_set.image_shape)
    model = ProtoVAE(mcfg, seed=config.seed)
    return train(model, train_set, config, progress=progress, test_set=test_set)


def within_class_min_distance(model):
    """Mean over classes of the smallest pairwise distance between that class's prototypes."""
    protos = model.prototypes.data.astype(np.float64)
    mins = []
    for cls in protos:
        d = np.sqrt(((cls[:, None, :] - cls[None, :, :]) ** 2).sum(-1))
        d[np.diag_indices_from(d)] = np.inf
        mins.append(d.min())
    return float(np.mean(mins))
