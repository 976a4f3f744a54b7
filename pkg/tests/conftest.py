import os
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(os.environ.get("PROTOVAE_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_path(key):
    return MNIST_DIR / MNIST_FILES[key]


def have_mnist():
    return all(mnist_path(k).exists() for k in MNIST_FILES)


requires_mnist = pytest.mark.skipif(
    not have_mnist(), reason=f"MNIST IDX files not found in {MNIST_DIR}"
)


def central_difference(f, arrays, step=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            hi = f()
            arr[idx] = orig - step
            lo = f()
            arr[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(a, b, floor=1e-6):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TOY_CONFIG = dict(
    num_classes=2, protos_per_class=2, latent_dim=4, in_channels=1,
    image_size=(6, 6), channels=(3, 3, 3, 3), hidden=5,
)


def toy_batch(seed=0, n=3, num_classes=2):
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, size=(n, 1, 6, 6))
    y = np.eye(num_classes)[r.integers(0, num_classes, size=n)]
    return x, y


def norm_rel_error(a, b):
    """``|a - b|_2 / max(|a|_2, |b|_2)``; zero when both are zero."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def model_gradcheck(model, x, y, noise_seed=0, step=1e-5, weights=None):
    """Analytic vs central-difference gradients of the total loss for every parameter.

    The reparameterization noise is re-drawn from the same seed on every
    evaluation so the loss is a deterministic function of the parameters.
    The mixture weights stay attached to the graph: with them detached the
    analytic gradient is not the derivative of the reported loss.
    Returns ``{name: norm-wise relative error}`` (element-wise ratios are
    dominated by roundoff on entries near zero).
    """
    from protovae import numerics as nx
    from protovae.losses import total_loss

    def loss(grad):
        out = model.forward(x, rng=np.random.default_rng(noise_seed), mode="train")
        if grad:
            return total_loss(x, y, out, model, weights, detach_weights=False)
        return float(total_loss(x, y, out, model, weights, detach_weights=False).total.item())

    model.zero_grad()
    loss(True).total.backward()
    analytic = {k: p.grad.copy() for k, p in model.parameters().items()}
    errors = {}
    with nx.no_grad():
        for name, p in model.parameters().items():
            (numeric,) = central_difference(lambda: loss(False), [p.data], step)
            errors[name] = norm_rel_error(analytic[name], numeric)
    return errors


# -- acceptance reporting ------------------------------------------------------------
# test_acceptance.py records each criterion's parts here; the summary hook
# prints one PASS/FAIL line per criterion at the end of the session.

ACCEPTANCE: dict = {}


def record_criterion(number, title, part, passed, detail=""):
    entry = ACCEPTANCE.setdefault(number, {"title": title, "parts": []})
    entry["parts"].append((part, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[number]
        ok = all(p for _, p, _ in entry["parts"])
        details = "; ".join(f"{name}: {detail}" if detail else name for name, _, detail in entry["parts"])
        terminalreporter.write_line(
            f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {entry['title']}  [{details}]"
        )
