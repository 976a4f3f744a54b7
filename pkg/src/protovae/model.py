"""The ProtoVAE network.

An image batch is encoded into ``(mu, sigma)``; a latent ``z`` (sampled in
training, ``mu`` in evaluation) is decoded into a reconstruction and compared
to ``K * M`` class prototypes through a log-ratio similarity. A bias-free
linear layer over the flattened similarities gives the class probabilities.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .errors import ShapeError


@dataclass
class ModelConfig:
    num_classes: int = 10
    protos_per_class: int = 5
    latent_dim: int = 256
    in_channels: int = 1
    image_size: tuple = (28, 28)
    channels: tuple = (32, 64, 128, 256)
    hidden: int = 256
    kernel: int = 3
    epsilon: float = 1e-4
    slope: float = 0.01
    classifier_init: str = "class"  # "class" (+1 own class, -0.5 others) or "uniform"
    prototype_init: str = "clustered"  # "clustered" or "normal" (i.i.d. standard normal)
    center_scale: float = 2.0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.channels = tuple(int(v) for v in self.channels)
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.classifier_init not in ("class", "uniform"):
            raise ValueError(f"unknown classifier_init {self.classifier_init!r}")
        if self.prototype_init not in ("clustered", "normal"):
            raise ValueError(f"unknown prototype_init {self.prototype_init!r}")

    @property
    def num_prototypes(self):
        return self.num_classes * self.protos_per_class

    def to_dict(self):
        return asdict(self)


class ForwardOutput(NamedTuple):
    mu: nx.Tensor
    sigma: nx.Tensor
    z: nx.Tensor
    xhat: nx.Tensor
    s: nx.Tensor  # N x K x M
    yhat: nx.Tensor  # N x K
    log_sigma: nx.Tensor
    logits: nx.Tensor


def similarity(z, prototypes, epsilon=1e-4):
    """``log((|z - phi|^2 + 1) / (|z - phi|^2 + eps))`` for every prototype.

    ``z`` is (N, d); ``prototypes`` is (K, M, d) or (P, d). Returns (N, K, M)
    or (N, P) respectively.
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    z, prototypes = nx.as_tensor(z), nx.as_tensor(prototypes)
    flat = prototypes.reshape(-1, prototypes.shape[-1]) if prototypes.ndim == 3 else prototypes
    sq = nx.pairwise_sqdist(z, flat)
    # same value as log(sq + 1) - log(sq + eps), but stays positive (no
    # cancellation to 0) when the squared distance is huge
    s = nx.log1p((1.0 - epsilon) / (sq + epsilon))
    if prototypes.ndim == 3:
        s = s.reshape(z.shape[0], prototypes.shape[0], prototypes.shape[1])
    return s


def reparameterize(mu, sigma, rng):
    """``mu + sigma * noise`` with standard normal noise drawn from ``rng``."""
    mu, sigma = nx.as_tensor(mu), nx.as_tensor(sigma)
    noise = rng.standard_normal(mu.shape).astype(mu.dtype)
    return mu + sigma * noise


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(nx.get_default_dtype())


class ProtoVAE:
    """Encoder ``f``, decoder ``g``, prototype bank and glass-box classifier."""

    def __init__(self, config: ModelConfig | None = None, seed=0):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        k = config.kernel
        self.params: dict[str, nx.Tensor] = {}

        sizes = [config.image_size]
        cin = config.in_channels
        for i, cout in enumerate(config.channels):
            fan_in = cin * k * k
            self._add(f"encoder.conv{i}.weight", _uniform(rng, fan_in**-0.5, (cout, cin, k, k)))
            self._add(f"encoder.conv{i}.bias", _uniform(rng, fan_in**-0.5, (cout,)))
            h, w = sizes[-1]
            sizes.append((nx.conv_output_size(h, k, 2, 1), nx.conv_output_size(w, k, 2, 1)))
            cin = cout
        self._sizes = sizes
        flat = cin * sizes[-1][0] * sizes[-1][1]
        d, hid = config.latent_dim, config.hidden
        self._add("encoder.fc.weight", _uniform(rng, flat**-0.5, (hid, flat)))
        self._add("encoder.fc.bias", _uniform(rng, flat**-0.5, (hid,)))
        for head in ("mu", "log_sigma"):
            self._add(f"encoder.{head}.weight", _uniform(rng, hid**-0.5, (d, hid)))
            self._add(f"encoder.{head}.bias", _uniform(rng, hid**-0.5, (d,)))

        self._add("decoder.fc0.weight", _uniform(rng, d**-0.5, (hid, d)))
        self._add("decoder.fc0.bias", _uniform(rng, d**-0.5, (hid,)))
        self._add("decoder.fc1.weight", _uniform(rng, hid**-0.5, (flat, hid)))
        self._add("decoder.fc1.bias", _uniform(rng, hid**-0.5, (flat,)))
        widths = list(config.channels[::-1]) + [config.in_channels]
        for i in range(len(config.channels)):
            cin, cout = widths[i], widths[i + 1]
            fan_in = cin * k * k
            self._add(f"decoder.deconv{i}.weight", _uniform(rng, fan_in**-0.5, (cin, cout, k, k)))
            self._add(f"decoder.deconv{i}.bias", _uniform(rng, fan_in**-0.5, (cout,)))

        shape = (config.num_classes, config.protos_per_class, d)
        if config.prototype_init == "clustered":
            # one N(0, c^2 I) center per class plus N(0, I/d) offsets: centered
            # columns start with norm ~1 and near-orthogonal, i.e. close to the
            # minimizer of the orthonormality loss
            centers = config.center_scale * rng.standard_normal((shape[0], 1, d))
            protos = centers + d**-0.5 * rng.standard_normal(shape)
        else:
            protos = rng.standard_normal(shape)
        self._add("prototypes", protos.astype(nx.get_default_dtype()))
        kp = config.num_prototypes
        if config.classifier_init == "class":
            owner = np.repeat(np.arange(config.num_classes), config.protos_per_class)
            w = np.where(owner[None, :] == np.arange(config.num_classes)[:, None], 1.0, -0.5)
            self._add("classifier.weight", w.astype(nx.get_default_dtype()))
        else:
            self._add("classifier.weight", _uniform(rng, kp**-0.5, (config.num_classes, kp)))

    def _add(self, name, array):
        self.params[name] = nx.parameter(array)

    # -- parameter access ---------------------------------------------------

    def parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @property
    def prototypes(self):
        return self.params["prototypes"]

    @property
    def classifier_weight(self):
        return self.params["classifier.weight"]

    def load_arrays(self, arrays):
        """Replace parameter values from a ``name -> ndarray`` mapping."""
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, value in arrays.items():
            if name not in self.params:
                raise KeyError(f"unexpected parameter {name!r}")
            if tuple(value.shape) != self.params[name].shape:
                raise ShapeError(
                    f"parameter {name}: shape {tuple(value.shape)} != {self.params[name].shape}"
                )
            self.params[name] = nx.parameter(np.array(value, dtype=self.params[name].dtype))

    # -- network pieces -----------------------------------------------------

    def _check_input(self, x):
        x = nx.as_tensor(x)
        expected = (self.config.in_channels, *self.config.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input of shape (N, {expected}), got {x.shape}", dim=1)
        return x

    def encode(self, x):
        """Return ``(mu, sigma, log_sigma)`` for an (N, C, H, W) batch."""
        h = self._check_input(x)
        p, slope = self.params, self.config.slope
        for i in range(len(self.config.channels)):
            h = nx.conv2d(h, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"], 2, 1)
            h = nx.leaky_relu(h, slope)
        h = h.reshape(h.shape[0], -1)
        h = nx.leaky_relu(nx.linear(h, p["encoder.fc.weight"], p["encoder.fc.bias"]), slope)
        mu = nx.linear(h, p["encoder.mu.weight"], p["encoder.mu.bias"])
        log_sigma = nx.linear(h, p["encoder.log_sigma.weight"], p["encoder.log_sigma.bias"])
        return mu, nx.exp(log_sigma), log_sigma

    def decode(self, z):
        z = nx.as_tensor(z)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        if z.shape[-1] != self.config.latent_dim:
            raise ShapeError(f"latent has {z.shape[-1]} dims, expected {self.config.latent_dim}", dim=1)
        p, slope, k = self.params, self.config.slope, self.config.kernel
        h = nx.leaky_relu(nx.linear(z, p["decoder.fc0.weight"], p["decoder.fc0.bias"]), slope)
        h = nx.leaky_relu(nx.linear(h, p["decoder.fc1.weight"], p["decoder.fc1.bias"]), slope)
        bottom = self._sizes[-1]
        h = h.reshape(z.shape[0], self.config.channels[-1], *bottom)
        n_layers = len(self.config.channels)
        for i in range(n_layers):
            target = self._sizes[n_layers - 1 - i]
            extra = target[0] - nx.conv_transpose_output_size(h.shape[2], k, 2, 1)
            h = nx.conv_transpose2d(
                h, p[f"decoder.deconv{i}.weight"], p[f"decoder.deconv{i}.bias"], 2, 1, extra
            )
            h = nx.tanh(h) if i == n_layers - 1 else nx.leaky_relu(h, slope)
        return h

    def similarity(self, z):
        return similarity(z, self.prototypes, self.config.epsilon)

    def logits(self, s):
        s = nx.as_tensor(s)
        return nx.linear(s.reshape(s.shape[0], -1), self.classifier_weight)

    def classify(self, s):
        """Class probabilities ``softmax(W . flatten(s))``."""
        return nx.softmax(self.logits(s), axis=-1)

    def forward(self, x, rng=None, mode="train"):
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        mu, sigma, log_sigma = self.encode(x)
        if mode == "train":
            if rng is None:
                raise ValueError("train mode needs an rng for the reparameterization")
            z = reparameterize(mu, sigma, rng)
        else:
            z = mu
        xhat = self.decode(z)
        s = self.similarity(z)
        logits = self.logits(s)
        yhat = nx.softmax(logits, axis=-1)
        return ForwardOutput(mu, sigma, z, xhat, s, yhat, log_sigma, logits)

    __call__ = forward

    # -- inference helpers (no graph, eval mode) -------------------------------

    def _batched(self, fn, x, batch_size):
        outs = []
        with nx.no_grad():
            for start in range(0, len(x), batch_size):
                outs.append(fn(x[start : start + batch_size]))
        return np.concatenate(outs) if outs else np.zeros((0,))

    def embed(self, x, batch_size=512):
        """Posterior means ``mu`` as an (N, d) array."""
        return self._batched(lambda b: self.encode(b)[0].data, x, batch_size)

    def similarities(self, x, batch_size=512):
        """Eval-mode similarity scores as an (N, K, M) array."""
        return self._batched(lambda b: self.similarity(self.encode(b)[0]).data, x, batch_size)

    def predict_proba(self, x, batch_size=512):
        """Eval-mode class probabilities as an (N, K) array (decoder skipped)."""
        return self._batched(
            lambda b: self.classify(self.similarity(self.encode(b)[0])).data, x, batch_size
        )

    def decode_prototype(self, k, j):
        """Decode prototype ``j`` of class ``k`` to a (C, H, W) image."""
        cfg = self.config
        if not (0 <= k < cfg.num_classes and 0 <= j < cfg.protos_per_class):
            raise IndexError(f"prototype ({k}, {j}) out of range")
        with nx.no_grad():
            return self.decode(self.prototypes.data[k, j][None]).data[0]

    def decode_all_prototypes(self):
        cfg = self.config
        with nx.no_grad():
            flat = self.prototypes.data.reshape(cfg.num_prototypes, -1)
            imgs = self.decode(flat).data
        return imgs.reshape(cfg.num_classes, cfg.protos_per_class, *imgs.shape[1:])

    def interpolate(self, phi_a, phi_b, steps):
        """Decode ``(1 - t) phi_a + t phi_b`` on a uniform grid of ``steps`` points."""
        if steps < 2:
            raise ValueError("steps must be at least 2")
        path = interpolation_path(phi_a, phi_b, steps).astype(self.prototypes.dtype)
        with nx.no_grad():
            return list(self.decode(path).data)


def interpolation_path(phi_a, phi_b, steps):
    """Latent points ``(1 - t) phi_a + t phi_b``; endpoints are copied exactly."""
    phi_a, phi_b = np.asarray(phi_a), np.asarray(phi_b)
    t = np.linspace(0.0, 1.0, steps)[:, None]
    path = (1.0 - t) * phi_a[None] + t * phi_b[None]
    path[0], path[-1] = phi_a, phi_b
    return path
