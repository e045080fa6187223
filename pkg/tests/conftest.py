"""Shared test helpers: relative-error metric and kink-free gradcheck inputs."""

import numpy as np

from intact import tensorgraph as tg


def max_rel_err(a, b, floor=1e-6) -> float:
    """Coordinate-wise relative error, guarded against 0/0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def classifier_margins_ok(model, points, n_points, h=1e-4) -> bool:
    """True when the forward pass sits away from relu kinks and pool ties.

    Finite differences only measure the derivative where the function is
    differentiable. A +-h bump of one input coordinate moves a pre-activation
    by at most h times the layer's slope, so margins are required at
    layer-scaled multiples of h; instances inside a switching band are
    rejected and the caller draws a fresh one.
    """
    h1p = points @ model.w1.data + model.b1.data
    if np.abs(h1p).min() < 1.0 * h:
        return False
    h1 = np.maximum(h1p, 0.0)
    h2p = h1 @ model.w2.data + model.b2.data
    if np.abs(h2p).min() < 2.0 * h:
        return False
    h2 = np.maximum(h2p, 0.0)
    b = points.shape[0] // n_points
    view = h2.reshape(b, n_points, -1)
    part = np.partition(view, -2, axis=1)
    top1, top2 = part[:, -1, :], part[:, -2, :]
    # dead features tie at exactly 0; that tie cannot flip under a bump
    live = top1 > 0
    if np.any(live & (top1 - top2 < 4.0 * h)):
        return False
    pooled = view.max(axis=1)
    h3p = pooled @ model.w3.data + model.b3.data
    return bool(np.abs(h3p).min() >= 4.0 * h)


def grad_of(f, x_data, h=1e-4):
    """Central finite differences of a scalar graph function, as an array."""
    return tg.finite_difference_gradient(f, tg.Tensor(x_data), h).data
