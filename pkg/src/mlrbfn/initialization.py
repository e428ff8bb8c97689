"""Data-driven initialization of centroids and inverse-widths.

Centroids come from an online (streaming) k-means with k-means++
seeding run on half of the first batch; inverse-widths come from a 95%
quantile of nearest-neighbour distances on the other half, so that the
bulk of the batch sits within one RBF width of a centroid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff import inverse_softplus
from .errors import InsufficientDataError

logger = logging.getLogger(__name__)

# Quantile of nearest-neighbour distances used to size the widths; the
# Gaussian 2-sigma rule covers ~95% of in-cluster points.
WIDTH_QUANTILE = 0.95
DEFAULT_KMEANS_PASSES = 100


def _pairwise_pow(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    if k == 2:
        return cdist(a, b, "sqeuclidean")
    if k == 1:
        return cdist(a, b, "cityblock")
    return cdist(a, b, "minkowski", p=k) ** k


def minibatch_kmeans(
    data: np.ndarray,
    num_centroids: int,
    k: float,
    passes: int = DEFAULT_KMEANS_PASSES,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Online k-means over one batch, seeded k-means++ style.

    Seeding: the first centroid is data row 0; each further centroid is
    a data row sampled with probability proportional to its k-powered
    distance to the nearest centroid chosen so far, then jittered by
    1e-5 standard-normal noise so repeated picks stay distinct.

    Refinement: ``passes`` sweeps where all points are assigned to
    their nearest centroid, then each point pulls its centroid with the
    streaming-mean step c <- (1 - 1/v) c + (1/v) x, v counting points
    routed to that centroid so far (across passes).

    Fewer rows than centroids is allowed: sampling then revisits rows
    and the jitter keeps the seeds apart.
    """
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < 1 or num_centroids < 1:
        raise InsufficientDataError(
            f"need at least one row and one centroid, got {n} and {num_centroids}"
        )
    if n < num_centroids:
        logger.warning(
            "seeding %d centroids from only %d rows; duplicates will be jittered",
            num_centroids,
            n,
        )
    rng = rng if rng is not None else np.random.default_rng()

    centroids = np.empty((num_centroids, data.shape[1]))
    centroids[0] = data[0]
    nearest = None
    for c in range(1, num_centroids):
        new_dist = _pairwise_pow(data, centroids[c - 1 : c], k)[:, 0]
        nearest = new_dist if nearest is None else np.minimum(nearest, new_dist)
        total = nearest.sum()
        if total > 0:
            probs = nearest / total
            draw = rng.random()
            idx = int(np.argmax(np.cumsum(probs) > draw))
        else:
            idx = 0  # all rows coincide with a centroid already
        centroids[c] = data[idx] + 1e-5 * rng.standard_normal(data.shape[1])

    counts = np.zeros(num_centroids)
    for _ in range(passes):
        assignments = np.argmin(_pairwise_pow(data, centroids, k), axis=1)
        for i in range(n):
            c = assignments[i]
            counts[c] += 1.0
            eta = 1.0 / counts[c]
            centroids[c] = (1.0 - eta) * centroids[c] + eta * data[i]
    return centroids


def fit_inverse_widths(
    data: np.ndarray, centroids: np.ndarray, k: float
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """One shared inverse-width per layer from nearest-distance quantiles.

    Returns (raw, init_raw, d_power, target) where ``raw`` fills both
    the trainable and the frozen pre-softplus vectors with a single
    scalar, ``d_power`` is the distance scale (in k-powered units) and
    ``target`` = 4 / d_power is the resulting positive inverse-width.
    """
    data = np.asarray(data, dtype=np.float64)
    dist = _pairwise_pow(data, centroids, k)
    per_point = np.quantile(dist.min(axis=1), WIDTH_QUANTILE)
    per_centroid = np.quantile(dist.min(axis=0), WIDTH_QUANTILE)
    d_power = max(per_point, per_centroid)
    if d_power < 1e-12:
        logger.warning("all width-fit rows sit on centroids; clamping scale")
        d_power = 1e-12
    target = 4.0 / d_power
    raw = inverse_softplus(target)  # passthrough for target >= 5
    num = centroids.shape[0]
    return np.full(num, raw), np.full(num, raw), float(d_power), float(target)


@dataclass
class LayerInitReport:
    layer: int
    num_centroids: int
    d_power: float
    inverse_width: float
    raw_value: float

    def log_line(self) -> str:
        return (
            f"layer {self.layer}: {self.num_centroids} centroids, "
            f"distance scale {self.d_power:.6g}, "
            f"inverse-width {self.inverse_width:.6g} (raw {self.raw_value:.6g})"
        )


@dataclass
class InitReport:
    """Per-layer record of what the batch-driven initialization chose."""

    layers: list[LayerInitReport] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [entry.log_line() for entry in self.layers]
