"""Point dropping, Gaussian corruption, and the severity curriculum.

Two perturbation primitives operate on single clouds; apply_stage composes
them (drop first, then noise) over the training split of a dataset at the
severity dictated by a curriculum stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SeverityError
from .pointcloud import MIN_CLOUD_POINTS, Dataset, PointCloud
from .saliency import SaliencyMap, _kmeans_labels, rank_scores

SCORE_FLOOR = 1e-8  # keeps zero-saliency points droppable in targeted mode
DEFAULT_LAMBDA_BIAS = 0.5
SPATIAL_GAP_CLUSTERS = 8  # granularity of occlusion-style region gaps


@dataclass
class PerturbationSpec:
    drop_fraction: float = 0.0
    sigma: float = 0.0
    targeted: bool = False
    spatial: bool = False  # data loss as an occlusion-style gap, not thinning
    bias: np.ndarray | None = None  # N x 3, rows unit length or zero

    def __post_init__(self):
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ConfigError(f"drop_fraction must be in [0, 1), got {self.drop_fraction}")
        if self.sigma < 0.0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.targeted and self.spatial:
            raise ConfigError("targeted and spatial drops are mutually exclusive")
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            norms = np.linalg.norm(b, axis=1)
            bad = ~((np.abs(norms - 1.0) <= 1e-9) | (norms == 0.0))
            if bad.any():
                raise ConfigError("bias rows must be unit length or zero")
            self.bias = b

    @property
    def is_noop(self) -> bool:
        return self.drop_fraction == 0.0 and self.sigma == 0.0


@dataclass
class CurriculumSchedule:
    stages: int
    sigma0: float
    delta_sigma: float
    frac_start: float = 0.9
    frac_end: float = 0.5

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if self.delta_sigma <= 0.0:
            raise ConfigError(f"delta_sigma must be > 0, got {self.delta_sigma}")
        if self.sigma0 < 0.0:
            raise ConfigError(f"sigma0 must be >= 0, got {self.sigma0}")
        if not 0.0 <= self.frac_end <= self.frac_start <= 1.0:
            raise ConfigError(
                f"need 0 <= frac_end <= frac_start <= 1, got {self.frac_end}, {self.frac_start}"
            )


def schedule_at(sched: CurriculumSchedule, t: int):
    """(fraction_t, sigma_t): linear fraction decay, additive sigma growth."""
    if not 0 <= t < sched.stages:
        raise IndexError(f"stage {t} out of range [0, {sched.stages})")
    sigma_t = sched.sigma0 + t * sched.delta_sigma
    if sched.stages == 1:
        fraction_t = sched.frac_start
    else:
        fraction_t = sched.frac_start - (sched.frac_start - sched.frac_end) * t / (sched.stages - 1)
    return fraction_t, sigma_t


def _count_from_fraction(fraction: float, n: int) -> int:
    return max(math.ceil(fraction * n - 1e-9), 0)


def _kept_indices(
    points: np.ndarray,
    spec: PerturbationSpec,
    smap: SaliencyMap | None,
    rng: np.random.Generator,
) -> np.ndarray | None:
    """Surviving row indices (ascending) after a drop, or None for no-op."""
    n = points.shape[0]
    n_drop = int(spec.drop_fraction * n + 0.5)
    if n_drop == 0:
        return None
    if n - n_drop < MIN_CLOUD_POINTS:
        raise SeverityError(
            f"dropping {n_drop} of {n} points would leave fewer than {MIN_CLOUD_POINTS}"
        )
    if spec.targeted:
        if smap is None:
            raise ConfigError("targeted drop requires a saliency map")
        if smap.cluster_ids is not None:
            dropped = _targeted_cluster_gap(smap, n_drop, rng)
        else:
            weights = smap.scores + SCORE_FLOOR
            dropped = rng.choice(n, size=n_drop, replace=False, p=weights / weights.sum())
    elif spec.spatial:
        dropped = spatial_gap_indices(points, n_drop, rng)
    else:
        dropped = rng.choice(n, size=n_drop, replace=False)
    keep = np.ones(n, dtype=bool)
    keep[dropped] = False
    return np.nonzero(keep)[0]


def spatial_gap_indices(points: np.ndarray, n_drop: int, rng, k: int = SPATIAL_GAP_CLUSTERS):
    """Occlusion-style data loss: remove whole random spatial regions.

    The cloud is partitioned into k spatial clusters; random clusters vanish
    in full until n_drop points are gone (the last one trimmed at random).
    """
    n = points.shape[0]
    labels = _kmeans_labels(points, min(k, n), rng)
    dropped = []
    for c in rng.permutation(min(k, n)):
        members = np.nonzero(labels == c)[0]
        remaining = n_drop - len(dropped)
        if remaining <= 0:
            break
        if members.size <= remaining:
            dropped.extend(members.tolist())
        else:
            dropped.extend(rng.choice(members, size=remaining, replace=False).tolist())
    return np.array(dropped[:n_drop], dtype=np.int64)


def _targeted_cluster_gap(smap: SaliencyMap, n_drop: int, rng):
    """Region-level targeting: whole clusters sampled by saliency weight."""
    k = smap.cluster_scores.shape[0]
    weights = smap.cluster_scores + SCORE_FLOOR
    order = rng.choice(k, size=k, replace=False, p=weights / weights.sum())
    dropped = []
    for c in order:
        members = np.nonzero(smap.cluster_ids == c)[0]
        remaining = n_drop - len(dropped)
        if remaining <= 0:
            break
        if members.size <= remaining:
            dropped.extend(members.tolist())
        else:
            dropped.extend(rng.choice(members, size=remaining, replace=False).tolist())
    return np.array(dropped[:n_drop], dtype=np.int64)


def drop_points(
    cloud: PointCloud,
    spec: PerturbationSpec,
    smap: SaliencyMap | None,
    rng: np.random.Generator,
) -> PointCloud:
    """Remove round(alpha * N) points; survivors keep their original order.

    Targeted mode samples removals without replacement with probability
    proportional to score + 1e-8; untargeted mode is uniform thinning;
    spatial mode removes a directional cap (an occlusion-like gap).
    """
    kept = _kept_indices(cloud.points, spec, smap, rng)
    if kept is None:
        return cloud
    return cloud.with_points(cloud.points[kept])


def add_noise(
    cloud: PointCloud,
    spec: PerturbationSpec,
    rng: np.random.Generator,
    lambda_bias: float = DEFAULT_LAMBDA_BIAS,
) -> PointCloud:
    """Displace every point by sigma * (sqrt(1-lambda^2) g + lambda bias).

    lambda is lambda_bias when a bias field is present, else 0, so the
    per-coordinate displacement keeps its sigma scaling in both modes.
    """
    if spec.sigma == 0.0:
        return cloud
    g = rng.standard_normal((cloud.n, 3))
    if spec.bias is None:
        delta = spec.sigma * g
    else:
        if spec.bias.shape != cloud.points.shape:
            raise ConfigError(
                f"bias shape {spec.bias.shape} does not match cloud {cloud.points.shape}"
            )
        lam = lambda_bias
        delta = spec.sigma * (math.sqrt(1.0 - lam * lam) * g + lam * spec.bias)
    return cloud.with_points(cloud.points + delta)


def noise_rows(
    points: np.ndarray,
    rows: np.ndarray,
    sigma: float,
    rng: np.random.Generator,
    bias: np.ndarray | None = None,
    lambda_bias: float = DEFAULT_LAMBDA_BIAS,
) -> np.ndarray:
    """Copy of points with Gaussian displacement applied to selected rows only."""
    out = points.copy()
    if sigma == 0.0 or rows.size == 0:
        return out
    g = rng.standard_normal((rows.size, 3))
    if bias is None:
        delta = sigma * g
    else:
        lam = lambda_bias
        delta = sigma * (math.sqrt(1.0 - lam * lam) * g + lam * bias[rows])
    out[rows] = out[rows] + delta
    return out


def stage_perturb_cloud(
    cloud: PointCloud,
    smap: SaliencyMap | None,
    fraction: float,
    sigma: float,
    drop_share: float,
    rng: np.random.Generator,
) -> PointCloud:
    """Drop-then-noise composition for one cloud at one stage severity.

    Drop alpha = drop_share * fraction (saliency-targeted when a map is
    given); Gaussian noise then hits the top `fraction` of the surviving
    points by score, or a random subset when no map is given.
    """
    n = cloud.n
    alpha = drop_share * fraction
    spec = PerturbationSpec(drop_fraction=alpha, targeted=smap is not None)
    kept = _kept_indices(cloud.points, spec, smap, rng)
    if kept is None:
        kept = np.arange(n)
    survivors = cloud.points[kept]
    n_surv = survivors.shape[0]

    count = _count_from_fraction(fraction, n_surv)
    if smap is not None:
        rows = rank_scores(smap.scores[kept])[:count]
    else:
        rows = rng.choice(n_surv, size=count, replace=False) if count else np.empty(0, dtype=np.int64)
    pts = noise_rows(survivors, np.asarray(rows, dtype=np.int64), sigma, rng)
    return cloud.with_points(pts)


def apply_stage(
    dataset: Dataset,
    maps: dict | None,
    sched: CurriculumSchedule,
    t: int,
    rng: np.random.Generator,
    drop_share: float = 0.2,
) -> Dataset:
    """Perturb every training cloud at stage t's severity; val/test untouched."""
    fraction, sigma = schedule_at(sched, t)
    replaced = {}
    for cloud in dataset.clouds_in("train"):
        smap = None if maps is None else maps.get(cloud.id)
        if maps is not None and smap is None:
            raise ConfigError(f"saliency maps missing cloud '{cloud.id}'")
        replaced[cloud.id] = stage_perturb_cloud(cloud, smap, fraction, sigma, drop_share, rng)
    return dataset.replaced(replaced)
