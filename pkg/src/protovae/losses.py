"""Training objective: prediction, prototype orthonormality and mixture-of-VAEs terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    pred: float = 1.0
    orth: float = 1.0
    recon: float = 1.0
    kl: float = 1.0

    def __post_init__(self):
        for name in ("pred", "orth", "recon", "kl"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class LossBreakdown:
    pred: nx.Tensor
    orth: nx.Tensor
    recon: nx.Tensor
    kl: nx.Tensor
    total: nx.Tensor

    def values(self):
        """Plain floats, in CSV column order."""
        return {k: float(getattr(self, k).item()) for k in ("pred", "orth", "recon", "kl", "total")}


def loss_pred(yhat, y):
    """Mean cross-entropy of probability rows ``yhat`` against one-hot ``y``."""
    yhat = nx.as_tensor(yhat)
    y = np.asarray(y, dtype=yhat.dtype)
    logp = nx.log(nx.clamp_min(yhat, PROB_FLOOR))
    return -(logp * y).sum() * (1.0 / y.shape[0])


def center_prototypes(prototypes):
    """Subtract each class's arithmetic mean prototype: (K, M, d) -> (K, M, d)."""
    prototypes = nx.as_tensor(prototypes)
    return prototypes - prototypes.mean(axis=1, keepdims=True)


def orth_residual(columns):
    """Per-class ``|C^T C - I_M|_F^2`` for (K, M, d) stacks of M vectors each.

    Returns a length-K tensor. Zero iff each class's vectors are orthonormal.
    """
    columns = nx.as_tensor(columns)
    k, m, _ = columns.shape
    gram = nx.matmul(columns, nx.swapaxes(columns, 1, 2))  # K x M x M
    eye = np.broadcast_to(np.eye(m, dtype=columns.dtype), (k, m, m))
    return nx.square(gram - eye).sum(axis=(1, 2))


def loss_orth(prototypes):
    """Sum over classes of the orthonormality residual of the centered prototypes.

    Centered vectors of one class sum to zero, so for ``M >= 2`` the residual
    is bounded below by 1 per class (reached when the Gram matrix equals
    ``I - 11^T / M``); for ``M = 1`` it is exactly 1.
    """
    return orth_residual(center_prototypes(prototypes)).sum()


def kl_unit_gaussian(mu, sigma, phi):
    """``KL(N(mu, diag sigma^2) || N(phi, I))`` summed over the last axis."""
    mu, sigma = nx.as_tensor(mu), nx.as_tensor(sigma)
    inner = nx.square(sigma) + nx.square(mu - phi) - 1.0 - 2.0 * nx.log(sigma)
    return 0.5 * inner.sum(axis=-1)


def mixture_weights(s, y):
    """Similarities normalized over each class's prototypes, masked to the true class.

    Returns an (N, K, M) array whose row for the true class sums to 1 and
    whose other rows are 0.
    """
    s = np.asarray(s.data if isinstance(s, nx.Tensor) else s)
    y = np.asarray(y, dtype=s.dtype)
    return y[:, :, None] * (s / s.sum(axis=2, keepdims=True))


def loss_vae(x, xhat, mu, sigma, s, y, prototypes, log_sigma=None, detach_weights=True):
    """Reconstruction and similarity-weighted KL terms, each averaged over the batch.

    The KL of sample ``i`` against prototype ``(k, j)`` is weighted by
    ``y_i(k) * s_i(k, j) / sum_l s_i(k, l)``. With ``detach_weights`` (the
    default) those weights are treated as constants.
    """
    x, xhat, mu, sigma = (nx.as_tensor(t) for t in (x, xhat, mu, sigma))
    n = x.shape[0]
    recon = nx.square(xhat - x).sum() * (1.0 / n)

    if log_sigma is None:
        log_sigma = nx.log(sigma)
    prototypes = nx.as_tensor(prototypes)
    k, m, d = prototypes.shape
    # KL(mu, sigma || phi, I) = 0.5 |mu - phi|^2 + 0.5 sum(sigma^2 - 1 - 2 log sigma)
    spread = 0.5 * (nx.square(sigma) - 1.0 - 2.0 * log_sigma).sum(axis=1)  # N
    dist = nx.pairwise_sqdist(mu, prototypes.reshape(k * m, d)).reshape(n, k, m)
    kl_all = 0.5 * dist + spread.reshape(n, 1, 1)
    y = np.asarray(y, dtype=mu.dtype)
    if detach_weights:
        weights = mixture_weights(s, y)
    else:
        s = nx.as_tensor(s)
        weights = (s / s.sum(axis=2, keepdims=True)) * y[:, :, None]
    kl = (kl_all * weights).sum() * (1.0 / n)
    return recon, kl


def mixture_recon(x, xhat, s, y):
    """Reconstruction term with the explicit per-prototype mixture weights.

    Equal to the plain batch-mean squared error because each sample's
    weights over its class prototypes sum to one.
    """
    w = mixture_weights(s, y)  # N x K x M
    err = ((np.asarray(xhat, dtype=np.float64) - np.asarray(x, dtype=np.float64)) ** 2)
    err = err.reshape(len(err), -1).sum(axis=1)
    return float((w * err[:, None, None]).sum() / len(err))


def total_loss(x, y, out, model, weights: LossWeights | None = None, detach_weights=True):
    """Weighted sum of all terms for the forward ``out`` of ``model`` on batch ``(x, y)``."""
    weights = weights or LossWeights()
    pred = loss_pred(out.yhat, y)
    orth = loss_orth(model.prototypes)
    recon, kl = loss_vae(
        x, out.xhat, out.mu, out.sigma, out.s, y, model.prototypes,
        log_sigma=out.log_sigma, detach_weights=detach_weights,
    )
    # a switched-off term is left out rather than multiplied by zero, so an
    # overflowing term that is not being trained cannot turn the total into NaN
    terms = [(t, w) for t, w in ((pred, weights.pred), (orth, weights.orth),
                                 (recon, weights.recon), (kl, weights.kl)) if w != 0] or [(pred, 0.0)]
    total = terms[0][0] * terms[0][1]
    for t, w in terms[1:]:
        total = total + t * w
    return LossBreakdown(pred, orth, recon, kl, total)
