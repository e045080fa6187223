"""Network architectures built on the tensorgraph engine, plus checkpoint I/O.

The classifier is a per-point shared MLP (3 -> 64 -> 128), a symmetric max
pool over points, and a small head (128 -> 64 -> C). The discriminator maps
each point's coordinates plus its saliency score to a drop logit and a 3-d
noise direction. Checkpoints are a versioned text container with hex floats,
so write/read round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensorgraph as tg
from .errors import DataError
from .seeding import make_rng

CKPT_MAGIC = "INTACT-CKPT v1"


def _init_param(rng, fan_in: int, shape) -> tg.Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return tg.Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _init_bias(shape) -> tg.Tensor:
    # nonzero bias init drowns the unit-ball coordinates and stalls plain GD
    return tg.Tensor(np.zeros(shape), requires_grad=True)


class _MLPBase:
    """Shared parameter bookkeeping for the two architectures."""

    param_names: tuple = ()

    def parameters(self):
        return [getattr(self, name) for name in self.param_names]

    def named_parameters(self):
        return [(name, getattr(self, name)) for name in self.param_names]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_values(self):
        return [p.data.copy() for p in self.parameters()]

    def set_param_values(self, values):
        for p, v in zip(self.parameters(), values):
            if p.data.shape != v.shape:
                raise DataError(f"parameter shape {v.shape} does not match {p.data.shape}")
            p.data = np.array(v, dtype=np.float64)

    def sgd_step(self, lr: float):
        for p in self.parameters():
            if p.grad is not None:
                p.data = p.data - lr * p.grad

    def ascent_step(self, lr: float):
        for p in self.parameters():
            if p.grad is not None:
                p.data = p.data + lr * p.grad


class PointClassifier(_MLPBase):
    """Point-set classifier: shared layers, max pool, classification head."""

    kind = "point_classifier"
    param_names = ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4")

    def __init__(self, n_classes: int, seed: int = 0, hidden=(64, 128, 64), _init=True):
        self.n_classes = int(n_classes)
        self.hidden = tuple(int(h) for h in hidden)
        if _init:
            h1, h2, h3 = self.hidden
            rng = make_rng(seed, "point_classifier-init")
            self.w1 = _init_param(rng, 3, (3, h1))
            self.b1 = _init_bias((h1,))
            self.w2 = _init_param(rng, h1, (h1, h2))
            self.b2 = _init_bias((h2,))
            self.w3 = _init_param(rng, h2, (h2, h3))
            self.b3 = _init_bias((h3,))
            self.w4 = _init_param(rng, h3, (h3, self.n_classes))
            self.b4 = _init_bias((self.n_classes,))

    def descriptor(self) -> dict:
        return {"n_classes": self.n_classes, "hidden": self.hidden}

    def copy(self) -> "PointClassifier":
        clone = PointClassifier(self.n_classes, hidden=self.hidden, _init=False)
        for name, p in self.named_parameters():
            setattr(clone, name, tg.Tensor(p.data.copy(), requires_grad=True))
        return clone

    def forward_logits(self, x: tg.Tensor, n_points: int) -> tg.Tensor:
        h1 = tg.relu(tg.linear(x, self.w1, self.b1))
        h2 = tg.relu(tg.linear(h1, self.w2, self.b2))
        pooled = tg.max_pool_segments(h2, n_points)
        h3 = tg.relu(tg.linear(pooled, self.w3, self.b3))
        return tg.linear(h3, self.w4, self.b4)

    def forward_cached(self, x_data: np.ndarray, n_points: int):
        """Forward pass that also records relu masks and pool routing.

        The cache freezes the network's active paths at this input; the
        input-gradient graph below reuses it.
        """
        x = tg.constant(x_data)
        a1 = tg.linear(x, self.w1, self.b1)
        h1 = tg.relu(a1)
        a2 = tg.linear(h1, self.w2, self.b2)
        h2 = tg.relu(a2)
        pooled = tg.max_pool_segments(h2, n_points)
        a3 = tg.linear(pooled, self.w3, self.b3)
        h3 = tg.relu(a3)
        logits = tg.linear(h3, self.w4, self.b4)
        cache = {
            "m1": a1.data > 0,
            "m2": a2.data > 0,
            "m3": a3.data > 0,
            "pool_rows": tg.segment_argmax(h2.data, n_points),
            "n_rows": x_data.shape[0],
        }
        return logits, cache

    def input_gradient_graph(self, cache: dict, labels) -> tg.Tensor:
        """d(logit[label_b]) / d(input) as a graph over the parameters.

        Relu masks and pool routing are frozen from the cached forward, which
        makes the result a first-order function of the weights whose value
        equals the true input gradient at that input.
        """
        d3 = tg.take_columns(self.w4, labels) * tg.constant(cache["m3"].astype(np.float64))
        dp = d3 @ self.w3.T
        dh2 = tg.scatter_pool_rows(dp, cache["pool_rows"], cache["n_rows"])
        da2 = dh2 * tg.constant(cache["m2"].astype(np.float64))
        dh1 = da2 @ self.w2.T
        da1 = dh1 * tg.constant(cache["m1"].astype(np.float64))
        return da1 @ self.w1.T

    def predict(self, points: np.ndarray, n_points: int) -> np.ndarray:
        """Argmax class per cloud, graph-free for speed."""
        h1 = np.maximum(points @ self.w1.data + self.b1.data, 0.0)
        h2 = np.maximum(h1 @ self.w2.data + self.b2.data, 0.0)
        b = points.shape[0] // n_points
        pooled = h2.reshape(b, n_points, -1).max(axis=1)
        h3 = np.maximum(pooled @ self.w3.data + self.b3.data, 0.0)
        logits = h3 @ self.w4.data + self.b4.data
        return np.argmax(logits, axis=1)


class Discriminator(_MLPBase):
    """Per-point head emitting a drop logit and a unit noise direction."""

    kind = "discriminator"
    param_names = ("w1", "b1", "w2", "b2", "w3", "b3")
    in_dim = 4  # xyz + saliency score channel
    out_dim = 4  # drop logit + 3-d direction

    def __init__(self, seed: int = 0, hidden=(32, 32), _init=True):
        self.hidden = tuple(int(h) for h in hidden)
        if _init:
            h1, h2 = self.hidden
            rng = make_rng(seed, "discriminator-init")
            self.w1 = _init_param(rng, self.in_dim, (self.in_dim, h1))
            self.b1 = _init_bias((h1,))
            self.w2 = _init_param(rng, h1, (h1, h2))
            self.b2 = _init_bias((h2,))
            self.w3 = _init_param(rng, h2, (h2, self.out_dim))
            self.b3 = _init_bias((self.out_dim,))

    def descriptor(self) -> dict:
        return {"hidden": self.hidden}

    def copy(self) -> "Discriminator":
        clone = Discriminator(hidden=self.hidden, _init=False)
        for name, p in self.named_parameters():
            setattr(clone, name, tg.Tensor(p.data.copy(), requires_grad=True))
        return clone

    def forward(self, feats: tg.Tensor):
        """(drop_logits B*N x 1, unit directions B*N x 3) as graph tensors."""
        h1 = tg.relu(tg.linear(feats, self.w1, self.b1))
        h2 = tg.relu(tg.linear(h1, self.w2, self.b2))
        out = tg.linear(h2, self.w3, self.b3)
        return tg.slice_cols(out, 0, 1), tg.row_unit(tg.slice_cols(out, 1, 4))

    def forward_values(self, feats: np.ndarray):
        """Graph-free forward: (drop logits (N,), unit-or-zero directions N x 3)."""
        h1 = np.maximum(feats @ self.w1.data + self.b1.data, 0.0)
        h2 = np.maximum(h1 @ self.w2.data + self.b2.data, 0.0)
        out = h2 @ self.w3.data + self.b3.data
        raw = out[:, 1:4]
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        safe = norms >= 1e-8
        dirs = np.where(safe, raw / np.where(safe, norms, 1.0), 0.0)
        return out[:, 0], dirs


# -- checkpoint container -----------------------------------------------------


def save_checkpoint(model, path: str, config_hash: str = "-") -> None:
    lines = [CKPT_MAGIC, f"kind {model.kind}", f"config_hash {config_hash}"]
    desc = model.descriptor()
    if model.kind == PointClassifier.kind:
        lines.append(f"arch n_classes {desc['n_classes']} hidden " + " ".join(map(str, desc["hidden"])))
    else:
        lines.append("arch hidden " + " ".join(map(str, desc["hidden"])))
    for name, p in model.named_parameters():
        shape = " ".join(str(d) for d in p.data.shape)
        lines.append(f"param {name} {p.data.ndim} {shape}")
        rows = p.data.reshape(-1, p.data.shape[-1]) if p.data.ndim == 2 else p.data.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(float(v).hex() for v in row))
    lines.append("end")
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str):
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != CKPT_MAGIC:
            raise DataError(f"{path}: not a {CKPT_MAGIC} checkpoint")
        kind = fh.readline().split()[1]
        fh.readline()  # config_hash line; informational
        arch = fh.readline().split()
        if kind == PointClassifier.kind:
            n_classes = int(arch[2])
            hidden = tuple(int(v) for v in arch[4:])
            model = PointClassifier(n_classes, hidden=hidden, _init=False)
        elif kind == Discriminator.kind:
            hidden = tuple(int(v) for v in arch[2:])
            model = Discriminator(hidden=hidden, _init=False)
        else:
            raise DataError(f"{path}: unknown checkpoint kind '{kind}'")
        line = fh.readline().split()
        while line and line[0] == "param":
            name, ndim = line[1], int(line[2])
            shape = tuple(int(v) for v in line[3 : 3 + ndim])
            n_rows = shape[0] if ndim == 2 else 1
            rows = []
            for _ in range(n_rows):
                rows.append([float.fromhex(tok) for tok in fh.readline().split()])
            data = np.array(rows, dtype=np.float64).reshape(shape)
            setattr(model, name, tg.Tensor(data, requires_grad=True))
            line = fh.readline().split()
        if not line or line[0] != "end":
            raise DataError(f"{path}: truncated checkpoint")
    for name in model.param_names:
        if not hasattr(model, name):
            raise DataError(f"{path}: checkpoint missing parameter '{name}'")
    return model


def checkpoint_hash(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def params_fingerprint(model) -> str:
    """sha256 over raw parameter bytes; stable identity for in-memory models."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode("ascii"))
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
