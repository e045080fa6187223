"""Teacher input gradients reduced to per-point (optionally clustered) saliency.

The saliency scalar for a point is the L2 norm of the gradient of the target
class logit with respect to that point's coordinates. Cluster mode replaces
each point's score by the mean score of its k-means cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorgraph as tg
from .errors import ConfigError
from .pointcloud import PointCloud


@dataclass
class SaliencyMap:
    scores: np.ndarray               # N nonnegative scalars, row-aligned
    ranking: np.ndarray              # permutation, descending score, ties by index
    cluster_ids: np.ndarray | None = None
    cluster_scores: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.scores.shape[0]


def rank_scores(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by descending score; ties broken by lower point index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def input_gradient(model, cloud: PointCloud, target: int) -> np.ndarray:
    """d(logit[target]) / d(points), an N x 3 array; model left untouched."""
    if not 0 <= target < model.n_classes:
        raise IndexError(f"target {target} out of range [0, {model.n_classes})")
    x = tg.Tensor(cloud.points, requires_grad=True)
    logits = model.forward_logits(x, n_points=cloud.n)
    picked = tg.gather_labels(logits, [target]).sum()
    picked.backward()
    grad = np.array(x.grad)
    model.zero_grad()
    return grad


def batch_input_gradients(model, clouds, targets=None, chunk: int = 64):
    """Per-cloud input gradients for equally sized clouds, batched for speed.

    targets defaults to each cloud's own label. Returns a list of N x 3
    arrays aligned with ``clouds``.
    """
    grads = []
    for start in range(0, len(clouds), chunk):
        group = clouds[start : start + chunk]
        n = group[0].n
        labels = [c.label for c in group] if targets is None else list(targets[start : start + chunk])
        x = tg.Tensor(np.concatenate([c.points for c in group], axis=0), requires_grad=True)
        logits = model.forward_logits(x, n_points=n)
        # each cloud only feeds its own logit row, so one backward gives all gradients
        tg.gather_labels(logits, labels).sum().backward()
        g = x.grad
        grads.extend(g[i * n : (i + 1) * n].copy() for i in range(len(group)))
        model.zero_grad()
    return grads


def saliency_scores(gradients: np.ndarray) -> SaliencyMap:
    """Reduce an N x 3 gradient array to per-point norms plus their ranking."""
    g = np.asarray(gradients, dtype=np.float64)
    scores = np.linalg.norm(g, axis=1)
    return SaliencyMap(scores=scores, ranking=rank_scores(scores))


def _kmeans_labels(points: np.ndarray, k: int, rng, max_iter: int = 50) -> np.ndarray:
    """Lloyd's iterations with k-means++ seeding; deterministic given rng."""
    n = points.shape[0]
    centers = np.empty((k, 3))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    labels = None
    for _ in range(max_iter):
        dists = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(dists, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
    return labels


def cluster_saliency(cloud: PointCloud, smap: SaliencyMap, k: int, seed: int = 0) -> SaliencyMap:
    """Aggregate point scores into k spatial clusters.

    The returned map carries the cluster assignment and replaces each point's
    effective score with its cluster mean, re-ranking accordingly.
    """
    n = cloud.n
    if not 1 <= k <= n:
        raise ConfigError(f"cluster count {k} outside [1, {n}]")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = _kmeans_labels(cloud.points, k, rng)
    cluster_scores = np.zeros(k)
    for j in range(k):
        members = smap.scores[labels == j]
        if members.size:
            cluster_scores[j] = members.mean()
    effective = cluster_scores[labels]
    return SaliencyMap(
        scores=effective,
        ranking=rank_scores(effective),
        cluster_ids=labels,
        cluster_scores=cluster_scores,
    )


def top_fraction(smap: SaliencyMap, fraction: float) -> np.ndarray:
    """First ceil(fraction * N) indices of the ranking."""
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must be in [0, 1], got {fraction}")
    count = math.ceil(fraction * smap.n - 1e-9)
    return smap.ranking[: max(count, 0)].copy()


def write_dump(smap: SaliencyMap, path: str) -> None:
    """Debug dump: one `point_index score cluster_id` line per point."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for i, s in enumerate(smap.scores):
            cid = -1 if smap.cluster_ids is None else int(smap.cluster_ids[i])
            fh.write(f"{i} {float(s)!r} {cid}\n")
