"""Phase-one teacher training: first-order meta-learning over noisy tasks.

A task is a small classification episode: a subset of classes, a noise
condition applied to its clouds, and disjoint support/query pools. The outer
loop moves the teacher's parameters toward the average of task-adapted
parameters (first-order, no second derivatives), so the final weights both
classify well and adapt quickly across noise conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorgraph as tg
from .errors import ConfigError, DataError
from .models import PointClassifier
from .perturb import PerturbationSpec, add_noise, drop_points
from .pointcloud import Dataset, PointCloud
from .seeding import derive_seed, make_rng


@dataclass
class Task:
    class_subset: tuple
    condition: PerturbationSpec
    support: list
    query: list


@dataclass
class TaskPool:
    """Sampling distribution over episodes, built from the training split."""

    clouds_by_class: dict
    conditions: list
    subset_size: int = 3
    k_support: int = 10
    k_query: int = 10

    def __post_init__(self):
        if len(self.clouds_by_class) < 2:
            raise ConfigError("task pool needs at least 2 classes")
        if not self.conditions:
            raise ConfigError("task pool needs at least 1 noise condition")
        if not 2 <= self.subset_size <= len(self.clouds_by_class):
            raise ConfigError(
                f"subset_size {self.subset_size} outside [2, {len(self.clouds_by_class)}]"
            )
        need = self.k_support + self.k_query
        for label, clouds in self.clouds_by_class.items():
            if len(clouds) < need:
                raise ConfigError(
                    f"class {label} has {len(clouds)} clouds, task needs {need}"
                )


def default_noise_conditions() -> list:
    """Clean plus the canonical drop/noise severities used for meta-tasks."""
    return [
        PerturbationSpec(),
        PerturbationSpec(drop_fraction=0.25, spatial=True),
        PerturbationSpec(drop_fraction=0.5, spatial=True),
        PerturbationSpec(sigma=0.05),
        PerturbationSpec(sigma=0.1),
    ]


def build_task_pool(dataset: Dataset, subset_size=3, k_support=10, k_query=10,
                    conditions=None) -> TaskPool:
    by_class: dict = {}
    for cloud in dataset.clouds_in("train"):
        by_class.setdefault(cloud.label, []).append(cloud)
    return TaskPool(
        clouds_by_class=by_class,
        conditions=conditions if conditions is not None else default_noise_conditions(),
        subset_size=subset_size,
        k_support=k_support,
        k_query=k_query,
    )


def _apply_condition(cloud: PointCloud, cond: PerturbationSpec, rng) -> PointCloud:
    out = drop_points(cloud, cond, None, rng) if cond.drop_fraction > 0 else cloud
    return add_noise(out, cond, rng)


def sample_task(pool: TaskPool, rng: np.random.Generator) -> Task:
    """Uniform class subset, one noise condition, disjoint support/query."""
    labels = sorted(pool.clouds_by_class)
    subset = tuple(sorted(rng.choice(len(labels), size=pool.subset_size, replace=False)))
    subset = tuple(labels[i] for i in subset)
    condition = pool.conditions[rng.integers(len(pool.conditions))]
    support, query = [], []
    for label in subset:
        clouds = pool.clouds_by_class[label]
        picks = rng.choice(len(clouds), size=pool.k_support + pool.k_query, replace=False)
        for j in picks[: pool.k_support]:
            support.append(_apply_condition(clouds[j], condition, rng))
        for j in picks[pool.k_support :]:
            query.append(_apply_condition(clouds[j], condition, rng))
    return Task(class_subset=subset, condition=condition, support=support, query=query)


def _batch(clouds):
    pts = np.concatenate([c.points for c in clouds], axis=0)
    labels = np.array([c.label for c in clouds], dtype=np.int64)
    return pts, labels, clouds[0].n


def batch_loss(model: PointClassifier, clouds) -> tg.Tensor:
    pts, labels, n = _batch(clouds)
    logits = model.forward_logits(tg.constant(pts), n)
    return tg.softmax_cross_entropy(logits, labels)


def inner_adapt(teacher: PointClassifier, task: Task, k_inner: int, lr_inner: float) -> PointClassifier:
    """Copy of the teacher after k_inner plain gradient steps on the support set."""
    adapted = teacher.copy()
    for _ in range(k_inner):
        adapted.zero_grad()
        loss = batch_loss(adapted, task.support)
        loss.backward()
        adapted.sgd_step(lr_inner)
    return adapted


def meta_update(teacher: PointClassifier, tasks, k_inner: int, lr_inner: float,
                lr_outer: float) -> PointClassifier:
    """Move the teacher toward the mean task-adapted parameters."""
    if not tasks:
        raise ConfigError("meta_update needs at least one task")
    adapted = [inner_adapt(teacher, task, k_inner, lr_inner) for task in tasks]
    for idx, p in enumerate(teacher.parameters()):
        displacement = np.mean(
            [a.parameters()[idx].data - p.data for a in adapted], axis=0
        )
        p.data = p.data + lr_outer * displacement
    return teacher


@dataclass
class TeacherTrainLog:
    query_losses: list = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["iteration\tmean_query_loss"]
        lines += [f"{i}\t{loss!r}" for i, loss in enumerate(self.query_losses)]
        return "\n".join(lines) + "\n"


def train_teacher(
    dataset: Dataset,
    seed: int,
    meta_iterations: int = 60,
    tasks_per_batch: int = 4,
    k_inner: int = 3,
    lr_inner: float = 0.05,
    lr_outer: float = 0.5,
    subset_size: int = 3,
    k_support: int = 10,
    k_query: int = 10,
    conditions=None,
):
    """Run the full meta-training phase; returns (teacher, log)."""
    pool = build_task_pool(dataset, subset_size, k_support, k_query, conditions)
    teacher = PointClassifier(dataset.n_classes, seed=derive_seed(seed, "teacher-init"))
    rng = make_rng(seed, "teacher-tasks")
    log = TeacherTrainLog()
    for it in range(meta_iterations):
        tasks = [sample_task(pool, rng) for _ in range(tasks_per_batch)]
        adapted = [inner_adapt(teacher, task, k_inner, lr_inner) for task in tasks]
        query_losses = [float(batch_loss(a, t.query).data) for a, t in zip(adapted, tasks)]
        mean_q = float(np.mean(query_losses))
        if not np.isfinite(mean_q):
            raise DataError(
                f"non-finite query loss at meta-iteration {it}: {query_losses}"
            )
        log.query_losses.append(mean_q)
        for idx, p in enumerate(teacher.parameters()):
            displacement = np.mean(
                [a.parameters()[idx].data - p.data for a in adapted], axis=0
            )
            p.data = p.data + lr_outer * displacement
    return teacher, log
