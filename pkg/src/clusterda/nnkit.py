"""MLP encoder + linear head with hand-written backprop, in float64.

Parameters are kept as a flat list ``[W1, b1, ..., WL, bL, Wh, bh]`` so a
gradient is simply a list of arrays with the same shapes. Weights are stored
``(out, in)`` and applied to row batches as ``x @ W.T + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Model:
    params: tuple

    @property
    def n_encoder_layers(self) -> int:
        return len(self.params) // 2 - 1

    @property
    def encoder(self) -> list[tuple[np.ndarray, np.ndarray]]:
        p = self.params
        return [(p[2 * i], p[2 * i + 1]) for i in range(self.n_encoder_layers)]

    @property
    def head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.params[-2], self.params[-1]

    @property
    def input_dim(self) -> int:
        return self.params[0].shape[1]

    @property
    def embed_dim(self) -> int:
        return self.params[-2].shape[1]

    @property
    def num_classes(self) -> int:
        return self.params[-2].shape[0]

    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w, _ in self.encoder]

    def with_params(self, params) -> "Model":
        return Model(tuple(np.asarray(p, dtype=np.float64) for p in params))

    def copy(self) -> "Model":
        return self.with_params([p.copy() for p in self.params])

    def equals(self, other: "Model") -> bool:
        return len(self.params) == len(other.params) and all(
            np.array_equal(a, b) for a, b in zip(self.params, other.params)
        )


def _glorot(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def init_model(input_dim: int, num_classes: int, hidden=(64,), embed_dim: int = 32, seed: int = 0) -> Model:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    sizes = [input_dim, *hidden, embed_dim]
    params = []
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        params += [_glorot(rng, fi, fo), np.zeros(fo)]
    params += [_glorot(rng, embed_dim, num_classes), np.zeros(num_classes)]
    return Model(tuple(params))


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, model expects {model.input_dim}")
    return x


def _encode(model: Model, x: np.ndarray):
    """Forward through the encoder keeping the activations backprop needs."""
    acts = [x]
    layers = model.encoder
    h = x
    for i, (w, b) in enumerate(layers):
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def _encode_backward(model: Model, acts, grad_out: np.ndarray) -> list[np.ndarray]:
    layers = model.encoder
    grads = [None] * (2 * len(layers))
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        if i < len(layers) - 1:
            g = g * (acts[i + 1] > 0)
        grads[2 * i] = g.T @ acts[i]
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = g @ w
    return grads


def embed(model: Model, x) -> np.ndarray:
    x = _check_input(model, x)
    single = x.ndim == 1
    h, _ = _encode(model, np.atleast_2d(x))
    return h[0] if single else h


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def logits(model: Model, x) -> np.ndarray:
    w, b = model.head
    return embed(model, x) @ w.T + b


def classify(model: Model, x) -> np.ndarray:
    return softmax(logits(model, x))


def predict(model: Model, x) -> np.ndarray:
    return np.argmax(logits(model, np.atleast_2d(x)), axis=1)


def zero_grads(model: Model) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in model.params]


def cross_entropy(model: Model, x, y) -> tuple[float, list[np.ndarray]]:
    """Mean negative log-likelihood of ``y`` and its gradient for every parameter."""
    x = _check_input(model, np.atleast_2d(x))
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= model.num_classes):
        raise ValueError("labels must lie in 0..C-1")
    n = len(y)
    h, acts = _encode(model, x)
    w, b = model.head
    z = h @ w.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads = _encode_backward(model, acts, dz @ w)
    grads += [dz.T @ h, dz.sum(axis=0)]
    return float(loss), grads


def triplet_loss(fa, fp, fn, margin: float) -> float:
    """Hinge on squared distances: ``max(|fa-fp|^2 - |fa-fn|^2 + margin, 0)``."""
    fa, fp, fn = (np.asarray(v, dtype=np.float64) for v in (fa, fp, fn))
    if not fa.shape == fp.shape == fn.shape:
        raise ValueError("anchor, positive and negative embeddings differ in shape")
    dp = np.sum((fa - fp) ** 2, axis=-1)
    dn = np.sum((fa - fn) ** 2, axis=-1)
    return np.maximum(dp - dn + margin, 0.0)


def triplet_backward(model: Model, xa, xp, xn, margin: float) -> tuple[float, list[np.ndarray]]:
    """Mean triplet loss over a batch and its gradient through the shared encoder.

    The classifier head gets zero gradient. Inactive hinges contribute nothing.
    """
    xa, xp, xn = (_check_input(model, np.atleast_2d(v)) for v in (xa, xp, xn))
    n = len(xa)
    ha, acts_a = _encode(model, xa)
    hp, acts_p = _encode(model, xp)
    hn, acts_n = _encode(model, xn)
    losses = triplet_loss(ha, hp, hn, margin)
    active = (losses > 0).astype(np.float64)[:, None] / n

    grads = zero_grads(model)
    if not np.any(active):
        return float(losses.mean()), grads
    branches = (
        (acts_a, 2.0 * (hn - hp) * active),
        (acts_p, 2.0 * (hp - ha) * active),
        (acts_n, 2.0 * (ha - hn) * active),
    )
    for acts, g in branches:
        for i, gi in enumerate(_encode_backward(model, acts, g)):
            grads[i] += gi
    return float(losses.mean()), grads


def add_scaled(a: list[np.ndarray], b: list[np.ndarray], scale: float) -> list[np.ndarray]:
    return [x + scale * y for x, y in zip(a, b)]


class SGD:
    """Heavy-ball momentum: ``v = momentum*v + g``, ``p -= lr*v``."""

    def __init__(self, learning_rate: float = 1e-2, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = None

    def step(self, model: Model, grads) -> Model:
        if len(grads) != len(model.params) or any(
            g.shape != p.shape for g, p in zip(grads, model.params)
        ):
            raise ValueError("gradient shapes do not match the model")
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged("non-finite gradient")
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in model.params]
        self.velocity = [self.momentum * v + g for v, g in zip(self.velocity, grads)]
        new = [p - self.learning_rate * v for p, v in zip(model.params, self.velocity)]
        if not all(np.all(np.isfinite(p)) for p in new):
            raise TrainingDiverged("parameters became non-finite")
        return model.with_params(new)


def sgd_step(model: Model, grads, optimizer: SGD) -> Model:
    return optimizer.step(model, grads)


def checkpoint_dict(model: Model, extra: dict | None = None) -> dict:
    out = {
        "format": "clusterda-mlp",
        "version": CHECKPOINT_VERSION,
        "layer_sizes": model.layer_sizes(),
        "num_classes": model.num_classes,
        "params": [{"shape": list(p.shape), "values": p.ravel().tolist()} for p in model.params],
    }
    if extra:
        out.update(extra)
    return out


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, extra), indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path, expect_input_dim: int | None = None, expect_classes: int | None = None) -> Model:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from None
    if raw.get("format") != "clusterda-mlp" or raw.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} clusterda checkpoint")
    sizes = raw["layer_sizes"]
    c = raw["num_classes"]
    expected = [(o, i) for i, o in zip(sizes[:-1], sizes[1:])]
    shapes = []
    for o, i in expected:
        shapes += [(o, i), (o,)]
    shapes += [(c, sizes[-1]), (c,)]
    if len(raw["params"]) != len(shapes):
        raise CheckpointError(f"{path}: expected {len(shapes)} parameter arrays, found {len(raw['params'])}")
    params = []
    for k, (entry, shape) in enumerate(zip(raw["params"], shapes)):
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"{path}: parameter {k} has shape {tuple(entry['shape'])}, expected {shape}")
        arr = np.asarray(entry["values"], dtype=np.float64)
        if arr.size != math.prod(shape):
            raise CheckpointError(f"{path}: parameter {k} has {arr.size} values, expected {math.prod(shape)}")
        params.append(arr.reshape(shape))
    model = Model(tuple(params))
    if expect_input_dim is not None and model.input_dim != expect_input_dim:
        raise CheckpointError(f"{path}: model takes d={model.input_dim}, data has d={expect_input_dim}")
    if expect_classes is not None and model.num_classes != expect_classes:
        raise CheckpointError(f"{path}: model has C={model.num_classes}, data has C={expect_classes}")
    return model
