import numpy as np
import pytest

from intact import tensorgraph as tg
from intact.errors import ConfigError
from intact.metateacher import (
    batch_loss,
    build_task_pool,
    inner_adapt,
    meta_update,
    sample_task,
    train_teacher,
)
from intact.models import PointClassifier, params_fingerprint
from intact.pointcloud import make_dataset
from intact.seeding import make_rng


def _dataset(per_class=8, n_points=32, classes=("sphere", "cube", "cylinder"), seed=3):
    return make_dataset(list(classes), per_class=per_class, n_points=n_points, seed=seed)


def _pool(ds, **kw):
    defaults = dict(subset_size=2, k_support=2, k_query=2)
    defaults.update(kw)
    return build_task_pool(ds, **defaults)


def test_two_class_pool_always_samples_both():
    ds = _dataset(classes=("sphere", "cube"))
    pool = _pool(ds)
    for trial in range(20):
        task = sample_task(pool, make_rng(trial, "t"))
        assert task.class_subset == (0, 1)


def test_same_seed_same_task():
    ds = _dataset()
    pool = _pool(ds)
    t1 = sample_task(pool, make_rng(5, "task"))
    t2 = sample_task(pool, make_rng(5, "task"))
    assert t1.class_subset == t2.class_subset
    for a, b in zip(t1.support + t1.query, t2.support + t2.query):
        assert a.id == b.id
        assert np.array_equal(a.points, b.points)


def test_support_query_disjoint_and_cover_subset():
    ds = _dataset()
    pool = _pool(ds)
    for trial in range(10):
        task = sample_task(pool, make_rng(trial, "cov"))
        support_ids = {c.id for c in task.support}
        query_ids = {c.id for c in task.query}
        assert not support_ids & query_ids
        assert {c.label for c in task.support} == set(task.class_subset)
        assert {c.label for c in task.query} == set(task.class_subset)


def test_subset_sampling_is_uniform():
    ds = make_dataset(["sphere", "cube", "cylinder", "torus", "plane", "cone"],
                      per_class=5, n_points=16, seed=1)
    pool = build_task_pool(ds, subset_size=3, k_support=1, k_query=1)
    rng = make_rng(0, "freq")
    counts = np.zeros(6)
    trials = 1000
    for _ in range(trials):
        task = sample_task(pool, rng)
        for label in task.class_subset:
            counts[label] += 1
    freq = counts / trials
    assert np.all(np.abs(freq - 0.5) < 0.05)


def test_pool_validation():
    ds = _dataset(per_class=8)
    with pytest.raises(ConfigError):
        build_task_pool(ds, subset_size=1)
    with pytest.raises(ConfigError):
        build_task_pool(ds, k_support=50, k_query=50)
    with pytest.raises(ConfigError):
        build_task_pool(ds, conditions=[])


def test_inner_adapt_zero_steps_is_bitwise_copy():
    ds = _dataset()
    pool = _pool(ds)
    teacher = PointClassifier(3, seed=4)
    task = sample_task(pool, make_rng(1, "t"))
    adapted = inner_adapt(teacher, task, k_inner=0, lr_inner=0.1)
    assert params_fingerprint(adapted) == params_fingerprint(teacher)
    assert adapted is not teacher


def test_inner_adapt_single_step_is_exact_gradient_step():
    ds = _dataset()
    pool = _pool(ds)
    teacher = PointClassifier(3, seed=4)
    task = sample_task(pool, make_rng(2, "t"))
    grads = []
    probe = teacher.copy()
    loss = batch_loss(probe, task.support)
    loss.backward()
    expected = [p.data - 0.05 * p.grad for p in probe.parameters()]
    adapted = inner_adapt(teacher, task, k_inner=1, lr_inner=0.05)
    for got, exp in zip(adapted.parameters(), expected):
        assert np.array_equal(got.data, exp)


def test_inner_adapt_never_mutates_teacher():
    ds = _dataset()
    pool = _pool(ds)
    teacher = PointClassifier(3, seed=6)
    before = params_fingerprint(teacher)
    task = sample_task(pool, make_rng(3, "t"))
    inner_adapt(teacher, task, k_inner=3, lr_inner=0.2)
    assert params_fingerprint(teacher) == before


def test_inner_adapt_descends_support_loss():
    ds = _dataset(per_class=10, n_points=48)
    pool = _pool(ds, k_support=3, k_query=2)
    wins = 0
    for trial in range(20):
        teacher = PointClassifier(3, seed=trial)
        task = sample_task(pool, make_rng(trial, "desc"))
        before = float(batch_loss(teacher, task.support).data)
        adapted = inner_adapt(teacher, task, k_inner=5, lr_inner=0.3)
        after = float(batch_loss(adapted, task.support).data)
        wins += after <= before
    assert wins == 20


def test_meta_update_zero_inner_is_identity():
    ds = _dataset()
    pool = _pool(ds)
    teacher = PointClassifier(3, seed=8)
    before = params_fingerprint(teacher)
    tasks = [sample_task(pool, make_rng(i, "mu")) for i in range(3)]
    meta_update(teacher, tasks, k_inner=0, lr_inner=0.1, lr_outer=0.5)
    assert params_fingerprint(teacher) == before


def test_meta_update_full_outer_step_reaches_adapted_params():
    ds = _dataset()
    pool = _pool(ds)
    teacher = PointClassifier(3, seed=9)
    task = sample_task(pool, make_rng(4, "mu1"))
    adapted = inner_adapt(teacher, task, k_inner=2, lr_inner=0.1)
    meta_update(teacher, [task], k_inner=2, lr_inner=0.1, lr_outer=1.0)
    for got, exp in zip(teacher.parameters(), adapted.parameters()):
        assert np.allclose(got.data, exp.data, atol=1e-15)


def test_meta_update_requires_tasks():
    with pytest.raises(ConfigError):
        meta_update(PointClassifier(3, seed=0), [], 1, 0.1, 0.1)


def test_train_teacher_zero_iterations_returns_initialized_model():
    from intact.seeding import derive_seed

    ds = _dataset()
    teacher, log = train_teacher(ds, seed=5, meta_iterations=0, tasks_per_batch=2,
                                 k_inner=1, lr_inner=0.1, lr_outer=0.5,
                                 subset_size=2, k_support=2, k_query=2)
    assert log.query_losses == []
    fresh = PointClassifier(3, seed=derive_seed(5, "teacher-init"))
    assert params_fingerprint(teacher) == params_fingerprint(fresh)


def test_train_teacher_deterministic_and_finite():
    ds = _dataset(per_class=8, n_points=24)
    kwargs = dict(seed=7, meta_iterations=4, tasks_per_batch=2, k_inner=2,
                  lr_inner=0.2, lr_outer=0.5, subset_size=2, k_support=2, k_query=2)
    t1, log1 = train_teacher(ds, **kwargs)
    t2, log2 = train_teacher(ds, **kwargs)
    assert params_fingerprint(t1) == params_fingerprint(t2)
    assert log1.query_losses == log2.query_losses
    assert all(np.isfinite(v) for v in log1.query_losses)
    tsv = log1.to_tsv()
    assert tsv.startswith("iteration\tmean_query_loss")
    assert len(tsv.strip().splitlines()) == 5
