"""Point-cloud data model, synthetic shape sampling, and the on-disk formats.

Clouds are N x 3 float64 coordinate matrices with a class label and a stable
id. The generator samples uniformly on the surfaces of six unit-scale
geometric primitives and stands in for CAD/scan datasets at desk scale.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, EmptyInputError
from .seeding import derive_seed, make_rng

SHAPE_KINDS = ("sphere", "cube", "cylinder", "torus", "plane", "cone")
MIN_CLOUD_POINTS = 8
SPLIT_NAMES = ("train", "val", "test")

CLOUD_MAGIC = "INTACT-PC v1"
MANIFEST_MAGIC = "INTACT-DS v1"


@dataclass
class PointCloud:
    points: np.ndarray
    label: int
    id: str

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise DataError(f"cloud '{self.id}' points must be N x 3, got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyInputError(f"cloud '{self.id}' has no points")
        if not np.all(np.isfinite(pts)):
            raise DataError(f"cloud '{self.id}' contains non-finite coordinates")
        if any(ch.isspace() for ch in self.id):
            raise DataError(f"cloud id '{self.id}' must not contain whitespace")
        self.points = pts

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points=points, label=self.label, id=self.id)


@dataclass
class Dataset:
    clouds: list
    class_names: list
    split: dict = field(default_factory=dict)  # cloud id -> split name

    def clouds_in(self, split_name: str) -> list:
        return [c for c in self.clouds if self.split.get(c.id) == split_name]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def replaced(self, new_clouds: dict) -> "Dataset":
        """Copy of the dataset with some clouds swapped by id."""
        clouds = [new_clouds.get(c.id, c) for c in self.clouds]
        return Dataset(clouds=clouds, class_names=list(self.class_names), split=dict(self.split))


# -- surface samplers ---------------------------------------------------------


def _sample_sphere(n, rng):
    g = rng.standard_normal((n, 3))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return g / norms


def _sample_cube(n, rng):
    # six faces of [-1, 1]^3, equal areas
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        others = [d for d in range(3) if d != a]
        pts[m, a] = sign[m]
        pts[m, others[0]] = uv[m, 0]
        pts[m, others[1]] = uv[m, 1]
    return pts


def _sample_cylinder(n, rng, radius=1.0, half_h=0.5):
    # squat proportions keep the class near the cone and torus silhouettes
    lateral_area = 2.0 * math.pi * radius * (2.0 * half_h)
    cap_area = 2.0 * math.pi * radius * radius
    p_lateral = lateral_area / (lateral_area + cap_area)
    u = rng.uniform(0.0, 1.0, n)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    pts = np.empty((n, 3))
    lateral = u < p_lateral
    z = rng.uniform(-half_h, half_h, n)
    r_cap = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    cap_sign = np.where(rng.uniform(0.0, 1.0, n) < 0.5, 1.0, -1.0)
    pts[lateral, 0] = radius * np.cos(theta[lateral])
    pts[lateral, 1] = radius * np.sin(theta[lateral])
    pts[lateral, 2] = z[lateral]
    cap = ~lateral
    pts[cap, 0] = r_cap[cap] * np.cos(theta[cap])
    pts[cap, 1] = r_cap[cap] * np.sin(theta[cap])
    pts[cap, 2] = cap_sign[cap] * half_h
    return pts


def _sample_torus(n, rng, big_r=1.0, small_r=0.45):
    u = rng.uniform(0.0, 2.0 * math.pi, n)
    # rejection-sample the tube angle so area is uniform over the surface
    v = np.empty(n)
    todo = np.arange(n)
    while todo.size:
        cand = rng.uniform(0.0, 2.0 * math.pi, todo.size)
        accept = rng.uniform(0.0, 1.0, todo.size) < (
            (big_r + small_r * np.cos(cand)) / (big_r + small_r)
        )
        v[todo[accept]] = cand[accept]
        todo = todo[~accept]
    ring = big_r + small_r * np.cos(v)
    return np.stack([ring * np.cos(u), ring * np.sin(u), small_r * np.sin(v)], axis=1)


def _sample_plane(n, rng):
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-1.0, 1.0, (n, 2))
    return pts


def _sample_cone(n, rng, radius=1.0, height=1.0):
    # apex above a base disk; height matches the cylinder so taper is the cue
    slant = math.sqrt(radius * radius + height * height)
    lateral_area = math.pi * radius * slant
    base_area = math.pi * radius * radius
    p_lateral = lateral_area / (lateral_area + base_area)
    u = rng.uniform(0.0, 1.0, n)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    t = np.sqrt(rng.uniform(0.0, 1.0, n))  # area grows with distance from apex
    pts = np.empty((n, 3))
    lateral = u < p_lateral
    pts[lateral, 0] = radius * t[lateral] * np.cos(theta[lateral])
    pts[lateral, 1] = radius * t[lateral] * np.sin(theta[lateral])
    pts[lateral, 2] = height / 2.0 - height * t[lateral]
    base = ~lateral
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, base.sum()))
    pts[base, 0] = r * np.cos(theta[base])
    pts[base, 1] = r * np.sin(theta[base])
    pts[base, 2] = -height / 2.0
    return pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "plane": _sample_plane,
    "cone": _sample_cone,
}


def generate_shape(kind: str, n_points: int, seed: int, cloud_id: str | None = None) -> PointCloud:
    """Sample n_points uniformly on the surface of a unit-scale primitive."""
    if kind not in _SAMPLERS:
        raise ConfigError(f"unknown shape kind '{kind}', expected one of {SHAPE_KINDS}")
    if n_points < MIN_CLOUD_POINTS:
        raise ConfigError(f"n_points must be >= {MIN_CLOUD_POINTS}, got {n_points}")
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = _SAMPLERS[kind](n_points, rng)
    label = SHAPE_KINDS.index(kind)
    cid = cloud_id if cloud_id is not None else f"{kind}-{seed}"
    return PointCloud(points=pts, label=label, id=cid)


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the origin and scale so the farthest point has norm 1."""
    pts = cloud.points
    if not np.all(np.isfinite(pts)):
        raise DataError(f"cloud '{cloud.id}' contains non-finite coordinates")
    centered = pts - pts.mean(axis=0)
    for _ in range(4):
        max_norm = np.linalg.norm(centered, axis=1).max()
        if max_norm < 1e-15:
            return cloud.with_points(np.zeros_like(pts))
        if max_norm <= 1.0 and max_norm >= 1.0 - 1e-9:
            break
        centered = centered / max_norm
    return cloud.with_points(centered)


def make_dataset(
    class_names,
    per_class: int,
    n_points: int,
    seed: int,
) -> Dataset:
    """Balanced labeled dataset with a deterministic 70/15/15 split.

    Each cloud's RNG stream is derived from (seed, id), so generation order
    does not matter. Splits are drawn per class, keeping every class present
    in every split (counts equal across classes by construction).
    """
    names = list(class_names)
    if len(names) < 2:
        raise ConfigError(f"need at least 2 classes, got {len(names)}")
    for name in names:
        if name not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind '{name}', expected one of {SHAPE_KINDS}")
    if len(set(names)) != len(names):
        raise ConfigError("duplicate class names")
    if per_class < 3:
        raise ConfigError(f"per_class must be >= 3 so all splits are nonempty, got {per_class}")

    n_val = max(1, int(0.15 * per_class + 0.5))
    n_test = max(1, int(0.15 * per_class + 0.5))
    n_train = per_class - n_val - n_test
    if n_train < 1:
        raise ConfigError(f"per_class={per_class} leaves no training clouds")

    clouds = []
    split = {}
    for name in names:
        ids = [f"{name}-{i:04d}" for i in range(per_class)]
        for cid in ids:
            cloud = generate_shape(name, n_points, derive_seed(seed, "cloud", cid), cloud_id=cid)
            clouds.append(normalize(cloud))
        order = make_rng(seed, "split", name).permutation(per_class)
        for j, idx in enumerate(order):
            if j < n_train:
                split[ids[idx]] = "train"
            elif j < n_train + n_val:
                split[ids[idx]] = "val"
            else:
                split[ids[idx]] = "test"
    return Dataset(clouds=clouds, class_names=names, split=split)


# -- on-disk formats ----------------------------------------------------------


def save_cloud(cloud: PointCloud, path: str) -> None:
    lines = [f"{CLOUD_MAGIC} {cloud.n} {cloud.label} {cloud.id}"]
    for row in cloud.points:
        lines.append(f"{float(row[0])!r} {float(row[1])!r} {float(row[2])!r}")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cloud(path: str) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if header[:2] != CLOUD_MAGIC.split():
            raise DataError(f"{path}: not a {CLOUD_MAGIC} file")
        n, label, cid = int(header[2]), int(header[3]), header[4]
        pts = np.empty((n, 3))
        for i in range(n):
            parts = fh.readline().split()
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
    return PointCloud(points=pts, label=label, id=cid)


def save_dataset(dataset: Dataset, out_dir: str, config_hash: str = "-") -> str:
    """Write one .pc file per cloud plus a manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    lines = [
        f"{MANIFEST_MAGIC} {len(dataset.clouds)} {dataset.n_classes} {config_hash}",
        "classes " + " ".join(dataset.class_names),
    ]
    for cloud in dataset.clouds:
        fname = f"{cloud.id}.pc"
        save_cloud(cloud, os.path.join(out_dir, fname))
        lines.append(f"cloud {fname} {dataset.split.get(cloud.id, 'train')}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest_path: str) -> Dataset:
    base = os.path.dirname(manifest_path)
    with open(manifest_path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if header[:2] != MANIFEST_MAGIC.split():
            raise DataError(f"{manifest_path}: not a {MANIFEST_MAGIC} manifest")
        class_line = fh.readline().split()
        class_names = class_line[1:]
        clouds, split = [], {}
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] != "cloud" or parts[2] not in SPLIT_NAMES:
                raise DataError(f"{manifest_path}: bad manifest line: {line.strip()}")
            cloud = load_cloud(os.path.join(base, parts[1]))
            clouds.append(cloud)
            split[cloud.id] = parts[2]
    return Dataset(clouds=clouds, class_names=class_names, split=split)
