"""Softmax classifiers trained by mini-batch SGD with an optional cyclic learning rate.

Two architectures are supported: ``linear`` (softmax regression) and ``mlp``
(one ReLU hidden layer with inverted dropout on the hidden activations).
Everything runs in float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ascpool.errors import DivergenceError, FormatError, ShapeError

EPS = 1e-12
MODEL_MAGIC = b"ASCM"
MODEL_VERSION = 1
_ARCH_TAGS = {"linear": 0, "mlp": 1}
_MODEL_HEADER = struct.Struct("<4sHBIII")

# (batch features, batch targets) -> augmented batch; owns its own randomness
Augmenter = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class ClassifierModel:
    architecture: str
    input_dim: int
    class_count: int
    hidden_units: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.architecture not in _ARCH_TAGS:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "mlp" and self.hidden_units < 1:
            raise ValueError("mlp needs at least one hidden unit")
        expected = self.param_shapes()
        if not self.params:
            self.params = {k: np.zeros(s) for k, s in expected.items()}
        if set(self.params) != set(expected):
            raise ShapeError(f"parameters {sorted(self.params)} do not match {self.architecture}")
        for k, s in expected.items():
            self.params[k] = np.asarray(self.params[k], dtype=np.float64)
            if self.params[k].shape != s:
                raise ShapeError(f"parameter {k} has shape {self.params[k].shape}, expected {s}")
            if not np.all(np.isfinite(self.params[k])):
                raise ValueError(f"parameter {k} contains non-finite values")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        P, C, H = self.input_dim, self.class_count, self.hidden_units
        if self.architecture == "linear":
            return {"W": (P, C), "b": (C,)}
        return {"W1": (P, H), "b1": (H,), "W2": (H, C), "b2": (C,)}

    def copy(self) -> ClassifierModel:
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError(f"expected inputs of width {self.input_dim}, got shape {X.shape}")
        return softmax(_logits(self, X)[0])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    base_lr: float = 0.01
    max_lr: float = 0.1
    clr_step_size: int = 100
    clr_enabled: bool = False
    weight_decay: float = 0.0
    dropout_rate: float = 0.0
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("learning rates must satisfy 0 < base_lr <= max_lr")
        if self.clr_step_size < 1:
            raise ValueError("clr_step_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainResult:
    model: ClassifierModel
    history: list[float]


def init_model(
    architecture: str,
    input_dim: int,
    class_count: int,
    hidden_units: int = 0,
    seed: int = 0,
) -> ClassifierModel:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    model = ClassifierModel(architecture, input_dim, class_count, hidden_units)
    for name, shape in model.param_shapes().items():
        if name.startswith("W"):
            bound = 1.0 / math.sqrt(shape[0])
            model.params[name] = rng.uniform(-bound, bound, size=shape)
    return model


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _logits(model: ClassifierModel, X: np.ndarray, mask: np.ndarray | None = None):
    p = model.params
    if model.architecture == "linear":
        return X @ p["W"] + p["b"], None
    pre = X @ p["W1"] + p["b1"]
    hidden = np.maximum(pre, 0.0)
    if mask is not None:
        hidden = hidden * mask
    return hidden @ p["W2"] + p["b2"], (pre, hidden)


def forward(model: ClassifierModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise ShapeError(f"expected a vector of length {model.input_dim}, got shape {x.shape}")
    return model.predict_proba(x[None, :])[0]


def predict_batch(model: ClassifierModel, features: Sequence) -> list[np.ndarray]:
    if len(features) == 0:
        return []
    return list(model.predict_proba(np.stack([np.asarray(f, dtype=np.float64) for f in features])))


def cross_entropy(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(-np.sum(target * np.log(np.maximum(pred, EPS))))


def clr_learning_rate(t: int, config: TrainConfig) -> float:
    """Triangular cyclic learning rate at iteration ``t`` (base_lr when CLR is off)."""
    if not config.clr_enabled:
        return config.base_lr
    step = config.clr_step_size
    cycle = math.floor(1 + t / (2 * step))
    x = abs(t / step - 2 * cycle + 1)
    return config.base_lr + (config.max_lr - config.base_lr) * max(0.0, 1.0 - x)


def loss_and_grads(
    model: ClassifierModel,
    X: np.ndarray,
    Y: np.ndarray,
    weight_decay: float = 0.0,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean soft-target cross-entropy plus 0.5*weight_decay*||W||^2, and its gradient."""
    n = X.shape[0]
    mask = None
    if model.architecture == "mlp" and dropout_rate > 0:
        if rng is None:
            raise ValueError("dropout needs a random generator")
        keep = 1.0 - dropout_rate
        mask = (rng.random((n, model.hidden_units)) < keep) / keep
    logits, cache = _logits(model, X, mask)
    probs = softmax(logits)
    loss = float(-np.sum(Y * np.log(np.maximum(probs, EPS)))) / n
    # softmax + cross-entropy gradient; assumes targets sum to one per row
    dlogits = (probs - Y) / n
    p = model.params
    grads: dict[str, np.ndarray] = {}
    if model.architecture == "linear":
        grads["W"] = X.T @ dlogits
        grads["b"] = dlogits.sum(axis=0)
    else:
        pre, hidden = cache
        grads["W2"] = hidden.T @ dlogits
        grads["b2"] = dlogits.sum(axis=0)
        dhidden = dlogits @ p["W2"].T
        if mask is not None:
            dhidden = dhidden * mask
        dpre = dhidden * (pre > 0)
        grads["W1"] = X.T @ dpre
        grads["b1"] = dpre.sum(axis=0)
    if weight_decay:
        for name in p:
            if name.startswith("W"):
                loss += 0.5 * weight_decay * float(np.sum(p[name] ** 2))
                grads[name] = grads[name] + weight_decay * p[name]
    return loss, grads


def gradient_check(
    model: ClassifierModel,
    X,
    Y,
    h: float = 1e-5,
    weight_decay: float = 0.0,
) -> float:
    """Largest relative gap between backprop and central finite differences.

    Every parameter entry is perturbed; the relative error is
    ``|ga - gn| / max(|ga| + |gn|, 1e-8)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    _, analytic = loss_and_grads(model, X, Y, weight_decay)
    probe = model.copy()
    worst = 0.0
    for name, values in probe.params.items():
        flat = values.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = loss_and_grads(probe, X, Y, weight_decay)
            flat[i] = orig - h
            down, _ = loss_and_grads(probe, X, Y, weight_decay)
            flat[i] = orig
            gn = (up - down) / (2 * h)
            rel = abs(ga[i] - gn) / max(abs(ga[i]) + abs(gn), 1e-8)
            worst = max(worst, rel)
    return worst


def train(
    model: ClassifierModel,
    X,
    Y,
    config: TrainConfig,
    rng: np.random.Generator | None = None,
    augment: Augmenter | None = None,
) -> TrainResult:
    """Mini-batch SGD on soft targets ``Y``; the input model is not modified.

    The history holds, per epoch, the sample-weighted mean of the mini-batch
    losses seen during that epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty 2-D array")
    if X.shape[1] != model.input_dim or Y.shape != (X.shape[0], model.class_count):
        raise ShapeError(
            f"data shapes {X.shape}/{Y.shape} do not fit model ({model.input_dim} -> {model.class_count})"
        )
    if rng is None:
        rng = np.random.default_rng(config.seed)
    model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    history: list[float] = []
    n = X.shape[0]
    t = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb, yb = X[idx], Y[idx]
            if augment is not None:
                xb, yb = augment(xb, yb)
            lr = clr_learning_rate(t, config)
            loss, grads = loss_and_grads(model, xb, yb, config.weight_decay, config.dropout_rate, rng)
            if not math.isfinite(loss):
                raise DivergenceError(t, lr, loss)
            for k, g in grads.items():
                velocity[k] = config.momentum * velocity[k] - lr * g
                model.params[k] += velocity[k]
            total += loss * len(idx)
            t += 1
        history.append(total / n)
    for k, v in model.params.items():
        if not np.all(np.isfinite(v)):
            raise DivergenceError(t, clr_learning_rate(t, config), float("nan"))
    return TrainResult(model, history)


def save_model(model: ClassifierModel, path: str | Path) -> None:
    header = _MODEL_HEADER.pack(
        MODEL_MAGIC,
        MODEL_VERSION,
        _ARCH_TAGS[model.architecture],
        model.input_dim,
        model.class_count,
        model.hidden_units,
    )
    body = b"".join(model.params[k].astype("<f8").tobytes(order="C") for k in model.param_shapes())
    Path(path).write_bytes(header + body)


def load_model(path: str | Path) -> ClassifierModel:
    data = Path(path).read_bytes()
    if len(data) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated model header", offset=len(data))
    magic, version, tag, P, C, H = _MODEL_HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}", offset=4)
    arch = {v: k for k, v in _ARCH_TAGS.items()}.get(tag)
    if arch is None:
        raise FormatError(f"{path}: unknown architecture tag {tag}", offset=6)
    shell = ClassifierModel(arch, P, C, H)
    offset = _MODEL_HEADER.size
    params = {}
    for name, shape in shell.param_shapes().items():
        count = int(np.prod(shape))
        if len(data) < offset + 8 * count:
            raise FormatError(f"{path}: truncated parameter {name}", offset=len(data))
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise FormatError(f"{path}: trailing bytes after parameters", offset=offset)
    return ClassifierModel(arch, P, C, H, params)
