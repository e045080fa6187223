import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_of, max_rel_err
from intact import tensorgraph as tg
from intact.errors import DataError, EmptyInputError, RankError, ShapeError


def test_linear_identity_case():
    x = tg.Tensor([[1.0, 2.0]])
    w = tg.Tensor(np.eye(2))
    b = tg.Tensor([0.0, 0.0])
    assert np.array_equal(tg.linear(x, w, b).data, [[1.0, 2.0]])


def test_linear_hand_matrix_multiply():
    x = tg.Tensor([[1.0, 0.0], [0.0, 1.0]])
    w = tg.Tensor([[2.0, 0.0], [0.0, 3.0]])
    b = tg.Tensor([1.0, 1.0])
    assert np.array_equal(tg.linear(x, w, b).data, [[3.0, 1.0], [1.0, 4.0]])


def test_linear_bias_gradient_is_ones():
    x = tg.Tensor(np.arange(6.0).reshape(3, 2))
    w = tg.Tensor(np.ones((2, 4)))
    b = tg.Tensor(np.zeros(4), requires_grad=True)
    tg.linear(x, w, b).sum().backward()
    assert np.array_equal(b.grad, np.full(4, 3.0))  # three rows summed


def test_linear_shape_mismatch_names_both_shapes():
    x = tg.Tensor(np.zeros((2, 3)))
    w = tg.Tensor(np.zeros((4, 5)))
    b = tg.Tensor(np.zeros(5))
    with pytest.raises(ShapeError) as exc:
        tg.linear(x, w, b)
    assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)


def test_relu_values_and_gradient():
    x = tg.Tensor([-1.0, 0.0, 2.0])
    assert np.array_equal(tg.relu(x).data, [0.0, 0.0, 2.0])
    y = tg.Tensor([-1.0, 2.0], requires_grad=True)
    tg.relu(y).sum().backward()
    assert np.array_equal(y.grad, [0.0, 1.0])  # subgradient 0 at and below 0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=16))
def test_relu_idempotent(values):
    x = tg.Tensor(values)
    once = tg.relu(x).data
    twice = tg.relu(tg.relu(x)).data
    assert np.array_equal(once, twice)


def test_max_pool_points_value_and_symmetry():
    x = tg.Tensor([[1.0, 5.0], [3.0, 2.0]])
    assert np.array_equal(tg.max_pool_points(x).data, [3.0, 5.0])
    rng = np.random.default_rng(0)
    data = rng.normal(size=(17, 6))
    base = tg.max_pool_points(tg.Tensor(data)).data
    for _ in range(5):
        perm = rng.permutation(17)
        permuted = tg.max_pool_points(tg.Tensor(data[perm])).data
        assert np.array_equal(base, permuted)


def test_max_pool_points_backward_routing():
    x = tg.Tensor([[1.0, 5.0], [3.0, 2.0]], requires_grad=True)
    tg.max_pool_points(x).sum().backward()
    assert np.array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_max_pool_points_tie_routes_to_lowest_row():
    x = tg.Tensor([[2.0], [2.0], [2.0]], requires_grad=True)
    tg.max_pool_points(x).sum().backward()
    assert np.array_equal(x.grad, [[1.0], [0.0], [0.0]])


def test_max_pool_points_empty_cloud():
    with pytest.raises(EmptyInputError):
        tg.max_pool_points(tg.Tensor(np.zeros((0, 3))))


def test_max_pool_segments_matches_per_cloud_pooling():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(3 * 7, 5))
    batched = tg.max_pool_segments(tg.Tensor(data), 7).data
    for i in range(3):
        single = tg.max_pool_points(tg.Tensor(data[i * 7 : (i + 1) * 7])).data
        assert np.array_equal(batched[i], single)


def test_softmax_cross_entropy_uniform_logits():
    loss = tg.softmax_cross_entropy(tg.Tensor([[0.0, 0.0]]), [0])
    assert abs(float(loss.data) - np.log(2.0)) < 1e-12


def test_softmax_cross_entropy_stable_for_huge_logits():
    loss = tg.softmax_cross_entropy(tg.Tensor([[1000.0, 0.0]]), [0])
    assert 0.0 <= float(loss.data) < 1e-9


def test_softmax_cross_entropy_gradient_vs_finite_differences():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(3, 4))
    labels = [1, 3, 0]
    x = tg.Tensor(logits, requires_grad=True)
    tg.softmax_cross_entropy(x, labels).backward()
    fd = grad_of(lambda t: tg.softmax_cross_entropy(t, labels), logits, h=1e-5)
    assert max_rel_err(x.grad, fd) < 1e-4


def test_softmax_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        tg.softmax_cross_entropy(tg.Tensor([[0.0, 1.0]]), [2])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    probs = tg.softmax(rng.normal(scale=50.0, size=(20, 7)))
    assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9


def test_backward_of_sum_is_ones():
    x = tg.Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backward_of_sum_of_squares():
    x = tg.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = tg.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(RankError):
        (x * x).backward()


def test_backward_accumulates_across_calls():
    x = tg.Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2.0 * first)
    x.zero_grad()
    assert x.grad is None


def test_non_finite_result_raises():
    x = tg.Tensor([1e308])
    with np.errstate(over="ignore"), pytest.raises(DataError):
        _ = x + x
    with pytest.raises(DataError):
        tg.Tensor([np.nan])


def test_finite_difference_oracle_basics():
    fd = grad_of(lambda t: (t * t).sum(), np.array([1.0, 2.0]), h=1e-5)
    assert max_rel_err(fd, [2.0, 4.0]) < 1e-8
    const = grad_of(lambda t: tg.Tensor(3.0), np.array([1.0, 2.0]))
    assert np.array_equal(const, [0.0, 0.0])
    with pytest.raises(ValueError):
        tg.finite_difference_gradient(lambda t: t.sum(), tg.Tensor([1.0]), 0.0)


def test_two_layer_net_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    w1 = tg.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    b1 = tg.Tensor(rng.normal(size=5), requires_grad=True)
    w2 = tg.Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    b2 = tg.Tensor(rng.normal(size=2), requires_grad=True)
    x_data = rng.normal(size=(4, 3)) + 0.3  # away from relu kinks w.h.p.

    def net(x):
        return tg.linear(tg.relu(tg.linear(x, w1, b1)), w2, b2).sum()

    x = tg.Tensor(x_data, requires_grad=True)
    net(x).backward()
    fd = grad_of(net, x_data)
    assert max_rel_err(x.grad, fd) <= 1e-3


def test_gather_and_scatter_ops_gradients():
    rng = np.random.default_rng(9)
    logits_data = rng.normal(size=(4, 5))
    labels = [0, 2, 4, 2]

    x = tg.Tensor(logits_data, requires_grad=True)
    tg.gather_labels(x, labels).sum().backward()
    fd = grad_of(lambda t: tg.gather_labels(t, labels).sum(), logits_data)
    assert max_rel_err(x.grad, fd) < 1e-6

    w = tg.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    tg.take_columns(w, labels).sum().backward()
    fd_w = grad_of(lambda t: tg.take_columns(t, labels).sum(), w.data)
    assert max_rel_err(w.grad, fd_w) < 1e-6

    vals = tg.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    rows = np.array([[0, 3, 2], [5, 4, 6]])
    out = tg.scatter_pool_rows(vals * vals, rows, 8)
    out.sum().backward()
    fd_v = grad_of(lambda t: tg.scatter_pool_rows(t * t, rows, 8).sum(), vals.data)
    assert max_rel_err(vals.grad, fd_v, floor=1e-4) < 1e-3


def test_select_slice_and_row_unit_gradients():
    rng = np.random.default_rng(11)
    data = rng.normal(size=(6, 4)) + 0.5

    x = tg.Tensor(data, requires_grad=True)
    picked = tg.select_rows(x, [0, 2, 2, 5])
    (picked * picked).sum().backward()
    fd = grad_of(lambda t: (lambda s: (s * s).sum())(tg.select_rows(t, [0, 2, 2, 5])), data)
    assert max_rel_err(x.grad, fd, floor=1e-4) < 1e-3

    y = tg.Tensor(data, requires_grad=True)
    tg.slice_cols(y, 1, 3).sum().backward()
    fd_y = grad_of(lambda t: tg.slice_cols(t, 1, 3).sum(), data)
    assert max_rel_err(y.grad, fd_y) < 1e-6

    d = rng.normal(size=(5, 3)) * 2.0
    z = tg.Tensor(d, requires_grad=True)
    weights = tg.constant(rng.normal(size=(5, 3)))
    (tg.row_unit(z) * weights).sum().backward()
    fd_z = grad_of(lambda t: (tg.row_unit(t) * weights).sum(), d)
    assert max_rel_err(z.grad, fd_z, floor=1e-4) < 1e-3


def test_row_unit_zero_rows_stay_zero():
    x = tg.Tensor([[0.0, 0.0, 0.0], [3.0, 0.0, 4.0]])
    out = tg.row_unit(x).data
    assert np.array_equal(out[0], [0.0, 0.0, 0.0])
    assert np.allclose(np.linalg.norm(out[1]), 1.0, atol=1e-12)


def test_trace_is_topological_and_visits_once():
    x = tg.Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = (y + y).sum()
    order = tg.trace(z)
    assert len(order) == len({id(n) for n in order})
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_bitwise_determinism_of_graph_and_gradients():
    def run():
        rng = np.random.default_rng(123)
        x = tg.Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        w = tg.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = tg.Tensor(rng.normal(size=4), requires_grad=True)
        pooled = tg.max_pool_points(tg.relu(tg.linear(x, w, b)))
        loss = (pooled * pooled).sum()
        loss.backward()
        return float(loss.data), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)
