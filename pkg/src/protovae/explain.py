"""Pixel-wise explanations of prototype similarities by layer-wise relevance propagation.

Relevance starts at the posterior-mean layer as the per-dimension similarity
``gamma = 1 / ((mu - phi)^2 + eta)`` and is walked back through the recorded
encoder operations. Linear and convolution layers use the alpha-beta rule;
the layer touching the pixels uses the z^B rule with box bounds; average
pooling splits relevance in proportion to each input's contribution.
Pointwise nonlinearities pass relevance through unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import NumericalError
from .numerics.conv import avg_pool2d_array, avg_pool2d_input_grad, conv2d_array, conv2d_input_grad

STABILIZER = 1e-9


@dataclass
class LRPConfig:
    alpha: float = 1.0
    beta: float = 0.0
    eta: float = 1e-6
    low: float = -1.0
    high: float = 1.0
    input_rule: str = "zb"  # "zb" or "alphabeta" at the pixel layer

    def __post_init__(self):
        if abs(self.alpha - self.beta - 1.0) > 1e-12:
            raise ValueError(f"alpha - beta must equal 1, got {self.alpha} - {self.beta}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.input_rule not in ("zb", "alphabeta"):
            raise ValueError(f"unknown input rule {self.input_rule!r}")


@dataclass
class RelevanceMap:
    values: np.ndarray  # H x W, signed
    prototype: tuple  # (k, j)
    image_id: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError(f"relevance map must be H x W, got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape

    def scaled(self, c):
        return RelevanceMap(self.values * c, self.prototype, self.image_id, dict(self.meta))


def pointwise_similarity(mu, phi, eta=1e-6):
    """``1 / ((mu - phi)^2 + eta)`` elementwise (broadcasting over leading axes)."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    diff = np.asarray(mu, dtype=np.float64) - np.asarray(phi, dtype=np.float64)
    return 1.0 / (diff * diff + eta)


# -- per-layer rules ----------------------------------------------------------
#
# The forward pass is replayed for a single image, so the batch axis of every
# relevance array is reused as a "map" axis of size P: all prototypes of one
# image are explained in one sweep, with activations broadcasting against it.


def _safe_divide(r, z):
    z = np.where(z >= 0, z + STABILIZER, z - STABILIZER)
    return r / z


def _split(a):
    return np.maximum(a, 0), np.minimum(a, 0)


class _Linear:
    """``y = x @ W.T`` (bias handled by the caller)."""

    def __init__(self, w):
        self.w = w

    def forward(self, x, w):
        return x @ w.T

    def backward(self, s, w, x_shape):
        return s @ w


class _Conv:
    def __init__(self, w, stride, padding):
        self.w, self.stride, self.padding = w, stride, padding

    def forward(self, x, w):
        return conv2d_array(x, w, None, self.stride, self.padding)

    def backward(self, s, w, x_shape):
        return conv2d_input_grad(s, w, (s.shape[0], *x_shape[1:]), self.stride, self.padding)


class _Pool:
    """Average pooling as a linear map with one shared positive weight."""

    def __init__(self, kernel, stride):
        self.kernel, self.stride = kernel, stride
        self.w = np.float64(1.0)

    def forward(self, x, w):
        return w * avg_pool2d_array(x, self.kernel, self.stride)

    def backward(self, s, w, x_shape):
        return w * avg_pool2d_input_grad(s, (s.shape[0], *x_shape[1:]), self.kernel, self.stride)


def _alpha_beta(layer, x, bias, relevance, alpha, beta):
    """alpha-beta rule for a layer with (possibly signed) inputs ``x``.

    Positive contributions are ``x+ w+`` and ``x- w-``; negative ones are
    ``x+ w-`` and ``x- w+``. Positive bias parts join the positive
    denominator (and negative parts the negative one), absorbing relevance.
    A unit with no positive contribution at all would swallow its relevance;
    it passes it on in proportion to its negative contributions instead.
    """
    xp, xn = _split(x)
    wp, wn = _split(layer.w)

    def denominator(xa, wa, xb, wb, b):
        z = layer.forward(xa, wa) + layer.forward(xb, wb)
        if b is not None:
            z = z + (b[:, None, None] if z.ndim == 4 else b)
        return z

    def spread(xa, wa, xb, wb, z, r):
        s = _safe_divide(r, z)
        return xa * layer.backward(s, wa, x.shape) + xb * layer.backward(s, wb, x.shape)

    bp = bn = None
    if bias is not None:
        bp, bn = _split(bias)
    zp = denominator(xp, wp, xn, wn, bp)
    zn = denominator(xp, wn, xn, wp, bn)
    dead = zp == 0  # exact: zp is a sum of non-negative terms
    live = np.where(dead, 0.0, relevance)
    out = alpha * spread(xp, wp, xn, wn, zp, live)
    if beta:
        out = out - beta * spread(xp, wn, xn, wp, zn, live)
    if dead.any():
        out = out + spread(xp, wn, xn, wp, zn, np.where(dead, relevance, 0.0))
    return out


def _proportional(layer, x, relevance):
    """Plain ``R_i = x_i w_ij / z_j R_j``; used for pooling, whose weights are all equal."""
    s = _safe_divide(relevance, layer.forward(x, layer.w))
    return x * layer.backward(s, layer.w, x.shape)


def _zb(layer, x, relevance, low, high):
    """z^B rule: ``R_i = sum_j (x_i w_ij - l w+_ij - h w-_ij) / z_j * R_j``."""
    wp, wn = _split(layer.w)
    lo = np.full_like(x, low)
    hi = np.full_like(x, high)
    z = layer.forward(x, layer.w) - layer.forward(lo, wp) - layer.forward(hi, wn)
    s = _safe_divide(relevance, z)
    return (
        x * layer.backward(s, layer.w, x.shape)
        - lo * layer.backward(s, wp, x.shape)
        - hi * layer.backward(s, wn, x.shape)
    )


PASS_THROUGH = {"leaky_relu", "relu", "tanh"}


@dataclass
class LRPTrace:
    input_relevance: np.ndarray  # P x input shape without its batch axis
    layer_sums: list  # [(op, per-map relevance total at that op's input)]


def lrp_backward(tape, output, relevance, inputs, config: LRPConfig | None = None):
    """Propagate ``relevance`` (P x output.shape[1:]) from ``output`` back to ``inputs``.

    ``tape`` must hold a forward pass of batch size 1. Returns an
    :class:`LRPTrace` whose ``layer_sums`` lists the per-map relevance totals
    after each rule, in backward order, starting with the initial relevance.
    """
    config = config or LRPConfig()
    if output.shape[0] != 1:
        raise ValueError("LRP replays one image at a time")
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.ndim != output.ndim or relevance.shape[1:] != output.shape[1:]:
        raise ValueError(f"relevance shape {relevance.shape} does not match output {output.shape}")
    rel = {id(output): relevance}
    sums = [("init", relevance.reshape(len(relevance), -1).sum(axis=1))]
    input_ids = {id(t) for t in inputs}
    for rec in reversed(tape.records):
        r = rel.pop(id(rec.output), None)
        if r is None:
            continue
        x = rec.inputs[0]
        a = x.data.astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite activations entering {rec.op}")
        if rec.op in PASS_THROUGH:
            out = r
        elif rec.op == "reshape":
            out = r.reshape(len(r), *x.shape[1:])
        elif rec.op in ("linear", "conv2d", "avg_pool2d"):
            if rec.op == "linear":
                layer = _Linear(rec.inputs[1].data.astype(np.float64))
            elif rec.op == "conv2d":
                layer = _Conv(rec.inputs[1].data.astype(np.float64), rec.attrs["stride"], rec.attrs["padding"])
            else:
                layer = _Pool(rec.attrs["kernel"], rec.attrs["stride"])
            bias = rec.inputs[2].data.astype(np.float64) if len(rec.inputs) > 2 else None
            if isinstance(layer, _Pool):
                out = _proportional(layer, a, r)
            elif id(x) in input_ids and config.input_rule == "zb":
                out = _zb(layer, a, r, config.low, config.high)
            else:
                out = _alpha_beta(layer, a, bias, r, config.alpha, config.beta)
        else:
            raise NotImplementedError(f"no relevance rule for operation {rec.op!r}")
        sums.append((rec.op, out.reshape(len(out), -1).sum(axis=1)))
        rel[id(x)] = rel.get(id(x), 0) + out
    missing = [t for t in inputs if id(t) not in rel]
    if missing:
        raise ValueError("relevance never reached the requested input")
    return LRPTrace(rel[id(inputs[0])], sums)


# -- ProtoVAE front end -------------------------------------------------------


def _encode_on_tape(model, image):
    x = nx.Tensor(np.asarray(image, dtype=model.prototypes.dtype)[None])
    with nx.no_grad(), nx.Tape() as tape:
        mu, _, _ = model.encode(x)
    return tape, x, mu


def explain_all(model, image, config: LRPConfig | None = None, prototypes=None, image_id=None):
    """Relevance maps for one (C, H, W) image against several prototypes.

    ``prototypes`` is a list of ``(k, j)`` pairs (default: all ``K * M``).
    Returns a list of :class:`RelevanceMap` in the same order.
    """
    config = config or LRPConfig()
    cfg = model.config
    if prototypes is None:
        prototypes = [(k, j) for k in range(cfg.num_classes) for j in range(cfg.protos_per_class)]
    tape, x, mu = _encode_on_tape(model, image)
    phi = model.prototypes.data.astype(np.float64)
    for k, j in prototypes:
        if not (0 <= k < cfg.num_classes and 0 <= j < cfg.protos_per_class):
            raise IndexError(f"prototype ({k}, {j}) out of range")
    targets = np.stack([phi[k, j] for k, j in prototypes])  # P x d
    gamma = pointwise_similarity(mu.data[0].astype(np.float64), targets, config.eta)  # P x d
    trace = lrp_backward(tape, mu, gamma, [x], config)
    maps = trace.input_relevance.sum(axis=1)  # P x H x W, channels summed
    if not np.all(np.isfinite(maps)):
        raise NumericalError("relevance map is not finite")
    return [RelevanceMap(m, (k, j), image_id) for m, (k, j) in zip(maps, prototypes)]


def lrp_explain(model, image, prototype, config: LRPConfig | None = None, image_id=None):
    """Relevance map of one image for prototype ``(k, j)``."""
    return explain_all(model, image, config, [tuple(prototype)], image_id)[0]


def top_prototypes(model, image, top):
    """The ``top`` most similar prototypes as ``[((k, j), s), ...]``, descending."""
    s = model.similarities(np.asarray(image)[None])[0]
    flat = s.ravel()
    order = np.argsort(-flat, kind="stable")[:top]
    m = model.config.protos_per_class
    return [((int(i) // m, int(i) % m), float(flat[i])) for i in order]


# -- masking --------------------------------------------------------------------


def mask_pixels(image, relevance, fraction, fill="zero", rng=None):
    """Replace the ``floor(fraction * H * W)`` least relevant pixels of a (C, H, W) image.

    Ties are broken by pixel index (stable sort). ``fill`` is ``"zero"`` or
    ``"uniform"`` (i.i.d. values in [-1, 1] drawn from ``rng``).
    """
    if not 0 <= fraction <= 1:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    values = relevance.values if isinstance(relevance, RelevanceMap) else np.asarray(relevance)
    image = np.array(image, copy=True)
    h, w = image.shape[-2:]
    if values.shape != (h, w):
        raise ValueError(f"map shape {values.shape} does not match image {(h, w)}")
    count = int(np.floor(fraction * h * w))
    idx = np.argsort(values.ravel(), kind="stable")[:count]
    rows, cols = np.unravel_index(idx, (h, w))
    if fill == "zero":
        image[..., rows, cols] = 0
    elif fill == "uniform":
        rng = rng if rng is not None else np.random.default_rng(0)
        image[..., rows, cols] = rng.uniform(-1, 1, size=image[..., rows, cols].shape)
    else:
        raise ValueError(f"unknown fill policy {fill!r}")
    return image


# -- export ---------------------------------------------------------------------


def write_pgm(path, gray):
    """Binary (P5) 8-bit PGM."""
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(gray.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(raw[len(raw) - w * h :], dtype=np.uint8).reshape(h, w)


def rescale_map(values):
    """Affine min->0, max->255 rescale (a constant map becomes all zeros)."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def image_to_gray(image):
    """[-1, 1] image (C, H, W) or (H, W) -> uint8, channel-averaged."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image.mean(axis=0)
    return np.clip(np.rint(255.0 * (image + 1.0) / 2.0), 0, 255).astype(np.uint8)


def save_map_pgm(path, rmap: RelevanceMap):
    write_pgm(path, rescale_map(rmap.values))


def save_map_csv(path, rmap: RelevanceMap):
    """Raw float map, one image row per CSV row (``repr`` keeps values exact)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in rmap.values:
            writer.writerow([repr(float(v)) for v in row])


def load_map_csv(path, prototype=(0, 0), image_id=None):
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return RelevanceMap(np.array(rows), tuple(prototype), image_id)
