"""Faithfulness metrics for relevance maps: Average Drop, Average Increase and
the relevance-ordering (pixel insertion from a random image) curve."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .explain import RelevanceMap, explain_all, mask_pixels

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class MetricsRecord:
    name: str
    dataset: str
    value: float
    fingerprint: dict = field(default_factory=dict)


@dataclass
class OrderingCurve:
    grid: np.ndarray
    mean_prob: np.ndarray
    baseline: str  # "lrp" or "random"

    def area(self):
        return float(_trapezoid(self.mean_prob, self.grid))


# -- Average Drop / Average Increase --------------------------------------------


def average_drop(s, s_masked):
    """``100 / n * sum(max(0, s - s_masked) / s)`` over all entries."""
    s, s_masked = np.asarray(s, dtype=np.float64), np.asarray(s_masked, dtype=np.float64)
    if s.shape != s_masked.shape:
        raise ValueError("similarity arrays must have the same shape")
    return float(100.0 * np.mean(np.maximum(0.0, s - s_masked) / s))


def average_increase(s, s_masked):
    """Fraction of entries whose masked similarity strictly exceeds the original."""
    s, s_masked = np.asarray(s), np.asarray(s_masked)
    if s.shape != s_masked.shape:
        raise ValueError("similarity arrays must have the same shape")
    return float(np.mean(s_masked > s))


def _map_values(m):
    return m.values if isinstance(m, RelevanceMap) else np.asarray(m)


def masked_similarities(model, images, maps, fraction=0.5, fill="zero", rng=None):
    """Original and masked similarities for every (image, prototype) pair.

    ``maps[i]`` holds the ``K * M`` maps of image ``i`` in prototype order
    (class-major). The image masked with map ``(k, j)`` is scored against
    prototype ``(k, j)`` only. Returns two (N, K, M) arrays.
    """
    cfg = model.config
    k, m = cfg.num_classes, cfg.protos_per_class
    images = np.asarray(images)
    s = model.similarities(images)
    s_masked = np.empty_like(s)
    rows = np.arange(k * m)
    for i, image in enumerate(images):
        if len(maps[i]) != k * m:
            raise ValueError(f"image {i}: expected {k * m} maps, got {len(maps[i])}")
        batch = np.stack([mask_pixels(image, _map_values(mp), fraction, fill, rng) for mp in maps[i]])
        scores = model.similarities(batch).reshape(k * m, k * m)
        s_masked[i] = scores[rows, rows].reshape(k, m)
    return s, s_masked


def ad_ai(model, images, maps, fraction=0.5, fill="zero", rng=None):
    s, s_masked = masked_similarities(model, images, maps, fraction, fill, rng)
    return average_drop(s, s_masked), average_increase(s, s_masked)


def lrp_maps(model, images, config=None):
    """All ``K * M`` LRP maps for each image (list of lists)."""
    return [explain_all(model, image, config, image_id=i) for i, image in enumerate(images)]


def random_maps(shape, count, rng, per_image):
    """``count`` lists of ``per_image`` i.i.d. uniform maps of spatial ``shape``."""
    return [[rng.uniform(size=shape) for _ in range(per_image)] for _ in range(count)]


# -- relevance ordering ---------------------------------------------------------------


def ordering_grid(points=30, geometric=12, start=1e-3, knee=0.1):
    """``0``, then ``geometric`` log-spaced fractions in ``[start, knee]``, then a
    linear ramp to 1 filling the remaining points."""
    if points < geometric + 3:
        raise ValueError("too few points for the requested geometric section")
    linear = points - geometric - 1
    head = np.geomspace(start, knee, geometric)
    tail = np.linspace(knee, 1.0, linear + 1)[1:]
    return np.concatenate([[0.0], head, tail])


def reveal_order(values):
    """Pixel indices by descending relevance, ties broken by index."""
    return np.argsort(-np.asarray(values).ravel(), kind="stable")


def insertion_images(image, start, order, grid):
    """Copies of ``start`` with the first ``ceil(p * H * W)`` pixels of ``order``
    taken from ``image`` for each ``p`` in ``grid``."""
    h, w = image.shape[-2:]
    n = h * w
    out = np.empty((len(grid), *image.shape), dtype=image.dtype)
    flat_src = image.reshape(image.shape[0], n)
    for g, p in enumerate(grid):
        count = min(n, math.ceil(p * n - 1e-9))
        cur = start.reshape(image.shape[0], n).copy()
        idx = order[:count]
        cur[:, idx] = flat_src[:, idx]
        out[g] = cur.reshape(image.shape)
    return out


def relevance_ordering_curve(model, image, label, rmap, grid, rng, start=None):
    """Predicted probability of ``label`` as pixels are revealed.

    Starts from ``start`` (default: uniform noise in [-1, 1] drawn from
    ``rng``) and inserts the true pixels in decreasing relevance order.
    Returns ``(lrp_curve, random_curve)`` arrays over ``grid``; the random
    baseline uses a shuffled ordering drawn from ``rng``.
    """
    image = np.asarray(image)
    if start is None:
        start = rng.uniform(-1, 1, size=image.shape).astype(image.dtype)
    values = _map_values(rmap)
    curves = []
    for order in (reveal_order(values), rng.permutation(values.size)):
        probs = model.predict_proba(insertion_images(image, start, order, grid))
        curves.append(probs[:, label])
    return curves[0], curves[1]


def ordering_curves(model, images, labels, maps, grid=None, seed=0):
    """Mean LRP and random-baseline curves over all images and all their maps.

    One random start image is drawn per test image and shared by all of
    that image's maps and both orderings.
    """
    grid = ordering_grid() if grid is None else np.asarray(grid)
    rng = np.random.default_rng(seed)
    lrp_sum = np.zeros(len(grid))
    rand_sum = np.zeros(len(grid))
    count = 0
    for image, label, image_maps in zip(images, labels, maps):
        start = rng.uniform(-1, 1, size=np.shape(image)).astype(np.asarray(image).dtype)
        for rmap in image_maps:
            a, b = relevance_ordering_curve(model, image, int(label), rmap, grid, rng, start)
            lrp_sum += a
            rand_sum += b
            count += 1
    return (
        OrderingCurve(grid, lrp_sum / count, "lrp"),
        OrderingCurve(grid, rand_sum / count, "random"),
    )


# -- CSV --------------------------------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def write_ad_ai_csv(path, rows):
    """``rows``: iterable of (dataset, seed, AD, AI)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "seed", "AD", "AI"])
        for dataset, seed, ad, ai in rows:
            writer.writerow([dataset, seed, _fmt(ad), _fmt(ai)])


def write_ordering_csv(path, curves):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["p", "mean_prob", "baseline"])
        for curve in curves:
            for p, v in zip(curve.grid, curve.mean_prob):
                writer.writerow([_fmt(p), _fmt(v), curve.baseline])


def write_maps_csv(path, maps):
    """Long-form map table: one row per (image, k, j) with the H*W values flattened."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        first = maps[0][0].values
        writer.writerow(["image", "k", "j", "height", "width", "values..."])
        for i, image_maps in enumerate(maps):
            for m in image_maps:
                k, j = m.prototype
                writer.writerow([i, k, j, *first.shape, *map(_fmt, m.values.ravel())])


def read_maps_csv(path, num_classes, protos_per_class):
    """Read maps written by :func:`write_maps_csv` (or a third-party method).

    Returns a list (per image) of ``K * M`` maps in class-major order.
    """
    table = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            if not row:
                continue
            i, k, j, h, w = (int(v) for v in row[:5])
            values = np.array([float(v) for v in row[5:]]).reshape(h, w)
            table.setdefault(i, {})[(k, j)] = RelevanceMap(values, (k, j), i)
    out = []
    for i in sorted(table):
        try:
            out.append([table[i][(k, j)] for k in range(num_classes) for j in range(protos_per_class)])
        except KeyError as exc:
            raise ValueError(f"image {i} is missing the map for prototype {exc.args[0]}") from None
    return out
