"""Small numpy network: MLP feature extractor, softmax classifier, momentum SGD.

Backpropagation is written out by hand. The classifier can be rebuilt with a
different number of output units while the feature extractor is kept.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError
from .numkit import Rng, as_matrix

ACTIVATIONS = ("relu", "tanh", "identity", "l2norm")
# radius of the sphere that "l2norm" projects onto
L2NORM_RADIUS = 4.0
CHECKPOINT_FORMAT = "scda-checkpoint"
CHECKPOINT_VERSION = 1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "l2norm":
        return L2NORM_RADIUS * z / np.linalg.norm(z, axis=1, keepdims=True).clip(1e-12)
    return z


def _act_grad(name, z, a, g):
    if name == "relu":
        return g * (z > 0.0)
    if name == "tanh":
        return g * (1.0 - a * a)
    if name == "l2norm":
        norm = np.linalg.norm(z, axis=1, keepdims=True).clip(1e-12)
        u = a / L2NORM_RADIUS
        return (L2NORM_RADIUS / norm) * (g - u * np.sum(u * g, axis=1, keepdims=True))
    return g


@dataclass
class Layer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray
    activation: str = "relu"


class Mlp:
    """Feature extractor: a chain of dense layers."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ContractError("an MLP needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weights.shape[1] != nxt.weights.shape[0]:
                raise ShapeError("layer dimensions do not chain")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ContractError(f"unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weights.shape[1],):
                raise ShapeError("bias length must equal layer width")
        self.layers = layers
        self.version = 0

    @classmethod
    def build(cls, sizes, activations, rng: Rng) -> "Mlp":
        """``sizes = [input_dim, h1, ..., feature_dim]``; fan-in uniform init."""
        if len(activations) != len(sizes) - 1:
            raise ContractError("need one activation per layer")
        layers = []
        for i, act in enumerate(activations):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            s = 1.0 / np.sqrt(fan_in)
            r = rng.child("layer", i)
            layers.append(
                Layer(r.uniform(-s, s, (fan_in, fan_out)), r.uniform(-s, s, fan_out), act)
            )
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].weights.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def __call__(self, x):
        return forward_features(self, x)


class SoftmaxClassifier:
    """Linear layer plus softmax; ``out_dim = num_known + k``."""

    def __init__(self, weights, bias, num_known: int):
        weights = as_matrix(weights, "weights")
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (weights.shape[1],):
            raise ShapeError("bias length must equal out_dim")
        if weights.shape[1] < num_known + 1:
            raise ContractError("classifier needs at least num_known + 1 outputs")
        self.weights = weights
        self.bias = bias
        self.num_known = int(num_known)
        self.version = 0

    @classmethod
    def build(cls, feature_dim: int, num_known: int, k: int, rng: Rng):
        if k < 1:
            raise ContractError("k must be >= 1")
        out_dim = num_known + k
        s = 1.0 / np.sqrt(feature_dim)
        w = rng.uniform(-s, s, (feature_dim, out_dim))
        b = rng.uniform(-s, s, out_dim)
        return cls(w, b, num_known)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.out_dim - self.num_known

    def params(self) -> list[np.ndarray]:
        return [self.weights, self.bias]


@dataclass(frozen=True)
class GradScale:
    """Identity on the forward pass; multiplies the gradient by ``lam`` going back."""

    lam: float = -1.0

    def __call__(self, x):
        return x

    def backward(self, g):
        return self.lam * g


@dataclass
class Model:
    f: Mlp
    c: SoftmaxClassifier

    def params(self) -> list[np.ndarray]:
        return self.f.params() + self.c.params()


@dataclass
class Cache:
    x: np.ndarray
    pre: list  # pre-activations per layer
    post: list  # activations per layer
    features: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    token: tuple


@dataclass
class Grads:
    mlp: list  # [(dW, db), ...] per layer
    weights: np.ndarray
    bias: np.ndarray
    d_input: np.ndarray | None

    def flat(self) -> list[np.ndarray]:
        out = []
        for dw, db in self.mlp:
            out += [dw, db]
        return out + [self.weights, self.bias]

    def __add__(self, other: "Grads") -> "Grads":
        d_in = None
        if self.d_input is not None and other.d_input is not None:
            # grads from different batches have no common input gradient
            if self.d_input.shape == other.d_input.shape:
                d_in = self.d_input + other.d_input
        return Grads(
            [(a + c, b + d) for (a, b), (c, d) in zip(self.mlp, other.mlp)],
            self.weights + other.weights,
            self.bias + other.bias,
            d_in,
        )


def softmax(z) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_features(f: Mlp, x):
    x = as_matrix(x, "x")
    if x.shape[1] != f.input_dim:
        raise ShapeError(f"expected {f.input_dim} input columns, got {x.shape[1]}")
    h = x
    for layer in f.layers:
        h = _act(layer.activation, h @ layer.weights + layer.bias)
    return h


def _token(f, c):
    return (id(f), f.version, id(c), c.version, c.out_dim)


def forward(f: Mlp, c: SoftmaxClassifier, x):
    """Returns ``(features, probs, cache)`` for a batch ``x``."""
    x = as_matrix(x, "x")
    if x.shape[1] != f.input_dim:
        raise ShapeError(f"expected {f.input_dim} input columns, got {x.shape[1]}")
    if c.feature_dim != f.feature_dim:
        raise ShapeError("classifier input width differs from feature_dim")
    pre, post = [], []
    h = x
    for layer in f.layers:
        z = h @ layer.weights + layer.bias
        h = _act(layer.activation, z)
        pre.append(z)
        post.append(h)
    logits = h @ c.weights + c.bias
    probs = softmax(logits)
    return h, probs, Cache(x, pre, post, h, logits, probs, _token(f, c))


def backward(f, c, cache: Cache, d_probs=None, d_logits=None, scale: GradScale | None = None):
    """Reverse pass for a scalar loss whose gradient w.r.t. probs or logits is given.

    ``scale`` sits between C and F: classifier gradients are untouched, the
    gradient flowing into the features is multiplied by ``scale.lam``.
    """
    if cache.token != _token(f, c):
        raise ContractError("cache does not belong to the current model parameters")
    if (d_probs is None) == (d_logits is None):
        raise ContractError("pass exactly one of d_probs / d_logits")
    if d_probs is not None:
        g = np.asarray(d_probs, dtype=np.float64)
        p = cache.probs
        d_logits = p * (g - np.sum(g * p, axis=1, keepdims=True))
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != cache.logits.shape:
        raise ShapeError("upstream gradient shape differs from the logits")

    gw = cache.features.T @ d_logits
    gb = d_logits.sum(axis=0)
    dh = d_logits @ c.weights.T
    if scale is not None:
        dh = scale.backward(dh)

    mlp_grads = []
    for i in range(len(f.layers) - 1, -1, -1):
        layer = f.layers[i]
        dz = _act_grad(layer.activation, cache.pre[i], cache.post[i], dh)
        below = cache.post[i - 1] if i > 0 else cache.x
        mlp_grads.append((below.T @ dz, dz.sum(axis=0)))
        dh = dz @ layer.weights.T
    mlp_grads.reverse()
    return Grads(mlp_grads, gw, gb, dh)


def restructure(c: SoftmaxClassifier, new_k: int, rng: Rng) -> SoftmaxClassifier:
    """Fresh classifier with ``num_known + new_k`` outputs; nothing is carried over."""
    if new_k < 1:
        raise ContractError("new_k must be >= 1")
    return SoftmaxClassifier.build(c.feature_dim, c.num_known, new_k, rng)


@dataclass
class SgdState:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: list = field(default_factory=list)

    def reset(self):
        self.velocity = []


def sgd_step(params, grads, s: SgdState):
    """In-place classic momentum step.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    """
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not s.velocity:
        s.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, s.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError("param, grad and velocity shapes must match")
        v *= s.momentum
        v += g
        if s.weight_decay:
            v += s.weight_decay * p
        p -= s.learning_rate * v
    return params


def apply_step(model: Model, grads: Grads, f_state: SgdState, c_state: SgdState):
    """SGD on F and C with separate momentum buffers (C's are dropped on restructure)."""
    flat = grads.flat()
    n_f = 2 * len(model.f.layers)
    sgd_step(model.f.params(), flat[:n_f], f_state)
    sgd_step(model.c.params(), flat[n_f:], c_state)
    model.f.version += 1
    model.c.version += 1


# -- checkpoint -----------------------------------------------------------
#
# JSON document:
#   {"format": "scda-checkpoint", "version": 1,
#    "input_dim": int, "feature_dim": int, "num_known": int, "out_dim": int,
#    "layers": [{"in": int, "out": int, "activation": str,
#                "weights": [row-major floats], "bias": [floats]}, ...],
#    "classifier": {"weights": [row-major floats], "bias": [floats]}}
# Floats are written with repr(), which round-trips float64 exactly.


def checkpoint_dict(model: Model) -> dict:
    f, c = model.f, model.c
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_dim": f.input_dim,
        "feature_dim": f.feature_dim,
        "num_known": c.num_known,
        "out_dim": c.out_dim,
        "layers": [
            {
                "in": layer.weights.shape[0],
                "out": layer.weights.shape[1],
                "activation": layer.activation,
                "weights": layer.weights.ravel().tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in f.layers
        ],
        "classifier": {"weights": c.weights.ravel().tolist(), "bias": c.bias.tolist()},
    }


def checkpoint_bytes(model: Model) -> bytes:
    return json.dumps(checkpoint_dict(model), separators=(",", ":")).encode("utf-8")


def model_from_dict(doc: dict) -> Model:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ContractError("not a version-1 scda checkpoint")
    layers = []
    for spec in doc["layers"]:
        w = np.array(spec["weights"], dtype=np.float64).reshape(spec["in"], spec["out"])
        layers.append(Layer(w, np.array(spec["bias"], dtype=np.float64), spec["activation"]))
    f = Mlp(layers)
    cw = np.array(doc["classifier"]["weights"], dtype=np.float64)
    cw = cw.reshape(doc["feature_dim"], doc["out_dim"])
    c = SoftmaxClassifier(cw, np.array(doc["classifier"]["bias"]), doc["num_known"])
    return Model(f, c)


def save_checkpoint(path, model: Model) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    return path


def load_checkpoint(path) -> Model:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
