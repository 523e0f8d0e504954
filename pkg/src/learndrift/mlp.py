"""Feedforward network ``v_{i+1} = f(v_i, u_i)`` written directly in numpy.

Forward pass, reverse-mode input Jacobian, backprop parameter gradients,
L1/L2/relative losses and a seeded Adam trainer. Inputs and outputs are
standardized; the last layer is linear.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import ndtr

from learndrift.dataset import Pairs

FORMAT_VERSION = 1
N_IN, N_OUT = 5, 3
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
# max of d/dx [x * Phi(x)], attained at x = sqrt(2)
GELU_LIPSCHITZ = float(ndtr(math.sqrt(2.0)) + math.sqrt(2.0) * _INV_SQRT_2PI * math.exp(-1.0))


class Activation(str, Enum):
    RELU = "relu"
    GELU = "gelu"


class LossKind(str, Enum):
    L1 = "l1"
    L2 = "l2"
    RELATIVE = "relative"


def activation(kind, x):
    kind = Activation(kind)
    if kind is Activation.RELU:
        return np.maximum(x, 0.0)
    return x * ndtr(x)


def activation_deriv(kind, x):
    """Derivative of :func:`activation`; ReLU'(0) is taken as 0."""
    kind = Activation(kind)
    if kind is Activation.RELU:
        return (np.asarray(x) > 0).astype(float)
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.GELU
    seed: int = 0
    linear: bool = False

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(sizes) < 2 or sizes[0] != N_IN or sizes[-1] != N_OUT:
            raise ValueError(f"layer sizes must start with {N_IN} and end with {N_OUT}, got {sizes}")
        if any(s < 1 for s in sizes):
            raise ValueError("all layer sizes must be >= 1")
        if len(sizes) < 3 and not self.linear:
            raise ValueError("an MLP needs at least one hidden layer")

    @classmethod
    def hidden(cls, layers: int, width: int, activation=Activation.GELU, seed: int = 0) -> "MlpSpec":
        return cls((N_IN, *([width] * layers), N_OUT), activation, seed)

    @classmethod
    def linear_map(cls, seed: int = 0) -> "MlpSpec":
        """Single affine layer 5 -> 3 (used for closed-form checks)."""
        return cls((N_IN, N_OUT), Activation.RELU, seed, linear=True)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[k + 1] * (s[k] + 1) for k in range(len(s) - 1))

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation.value, "seed": self.seed, "linear": self.linear}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["layer_sizes"]), Activation(d["activation"]), int(d.get("seed", 0)), bool(d.get("linear", False)))


@dataclass
class MlpWeights:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def check(self, spec: MlpSpec) -> None:
        s = spec.layer_sizes
        if len(self.weights) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise ValueError("layer count does not match spec")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (s[k + 1], s[k]) or b.shape != (s[k + 1],):
                raise ValueError(f"layer {k} has shape {W.shape}/{b.shape}, spec wants {(s[k + 1], s[k])}")
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {k} has non-finite entries")

    @classmethod
    def init(cls, spec: MlpSpec) -> "MlpWeights":
        """He-scaled normal init for hidden layers, 1/fan_in variance for the output layer."""
        rng = np.random.default_rng(spec.seed)
        s = spec.layer_sizes
        Ws, bs = [], []
        for k in range(spec.n_layers):
            gain = 1.0 if k == spec.n_layers - 1 else 2.0
            Ws.append(rng.standard_normal((s[k + 1], s[k])) * math.sqrt(gain / s[k]))
            bs.append(np.zeros(s[k + 1]))
        return cls(Ws, bs)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "MlpWeights":
        s = spec.layer_sizes
        return cls([np.zeros((s[k + 1], s[k])) for k in range(spec.n_layers)], [np.zeros(s[k + 1]) for k in range(spec.n_layers)])

    def copy(self) -> "MlpWeights":
        return MlpWeights([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])


@dataclass
class Normalizer:
    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_IN))
    in_scale: np.ndarray = field(default_factory=lambda: np.ones(N_IN))
    out_mean: np.ndarray = field(default_factory=lambda: np.zeros(N_OUT))
    out_scale: np.ndarray = field(default_factory=lambda: np.ones(N_OUT))

    def __post_init__(self):
        for name, n in (("in_mean", N_IN), ("in_scale", N_IN), ("out_mean", N_OUT), ("out_scale", N_OUT)):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(n)
            setattr(self, name, arr)
        if np.any(self.in_scale <= 0) or np.any(self.out_scale <= 0):
            raise ValueError("normalizer scales must be strictly positive")

    @classmethod
    def fit(cls, inputs, outputs, floor: float = 1e-6) -> "Normalizer":
        inputs, outputs = np.asarray(inputs), np.asarray(outputs)
        return cls(inputs.mean(0), np.maximum(inputs.std(0), floor), outputs.mean(0), np.maximum(outputs.std(0), floor))

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("in_mean", "in_scale", "out_mean", "out_scale")}


def _as_input(v, u) -> np.ndarray:
    return np.concatenate([np.asarray(v, dtype=float), np.asarray(u, dtype=float)], axis=-1)


def _forward_all(spec: MlpSpec, w: MlpWeights, norm: Normalizer, x: np.ndarray):
    """Forward pass on standardized-input batch; returns pre-activations and layer outputs."""
    a = (x - norm.in_mean) / norm.in_scale
    zs, acts = [], [a]
    last = spec.n_layers - 1
    for k, (W, b) in enumerate(zip(w.weights, w.biases)):
        z = a @ W.T + b
        if k < last:
            zs.append(z)
            a = activation(spec.activation, z)
        else:
            a = z
        acts.append(a)
    return zs, acts


def forward(spec: MlpSpec, weights: MlpWeights, normalizer: Normalizer, v, u) -> np.ndarray:
    """Predict the next body velocity for one or a batch of ``(v, u)``."""
    x = _as_input(v, u)
    if x.shape[-1] != N_IN:
        raise ValueError(f"expected {N_IN} inputs, got {x.shape[-1]}")
    flat = x.reshape(-1, N_IN)
    _, acts = _forward_all(spec, weights, normalizer, flat)
    y = acts[-1] * normalizer.out_scale + normalizer.out_mean
    return y.reshape(x.shape[:-1] + (N_OUT,))


def input_jacobian(spec: MlpSpec, weights: MlpWeights, normalizer: Normalizer, v, u) -> np.ndarray:
    """Exact ``d v_next / d (v, u)``, shape ``(..., 3, 5)``, by reverse accumulation."""
    x = _as_input(v, u)
    flat = x.reshape(-1, N_IN)
    zs, _ = _forward_all(spec, weights, normalizer, flat)
    G = np.broadcast_to(normalizer.out_scale[:, None] * weights.weights[-1], (len(flat), N_OUT, weights.weights[-1].shape[1]))
    for k in range(spec.n_layers - 2, -1, -1):
        G = (G * activation_deriv(spec.activation, zs[k])[:, None, :]) @ weights.weights[k]
    G = G / normalizer.in_scale
    return G.reshape(x.shape[:-1] + (N_OUT, N_IN))


def loss_value_and_grad(kind, epsilon: float, v_pred, v_true):
    """Per-sample loss and its gradient with respect to ``v_pred``.

    Works on single 3-vectors or ``(B, 3)`` batches (returning ``(B,)`` losses).
    ``|.|`` has subgradient 0 at 0.
    """
    kind = LossKind(kind)
    e = np.asarray(v_pred, dtype=float) - np.asarray(v_true, dtype=float)
    if kind is LossKind.L2:
        return np.sum(e * e, axis=-1), 2.0 * e
    l1 = np.sum(np.abs(e), axis=-1)
    if kind is LossKind.L1:
        return l1, np.sign(e)
    if not epsilon > 0:
        raise ValueError("relative loss needs epsilon > 0")
    denom = np.sum(np.abs(np.asarray(v_true, dtype=float)), axis=-1) + epsilon
    return l1 / denom, np.sign(e) / np.expand_dims(denom, -1)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossKind = LossKind.RELATIVE
    epsilon: float = 1e-2
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["loss"] = self.loss.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def _scaled_targets(norm: Normalizer, v_true):
    """Targets in the two coordinate systems the loss needs.

    Errors are measured in scale-only normalized units ``v / out_scale`` (zero
    stays zero, so the relative loss keeps its meaning); the standardized
    target is what the linear output layer is compared against.
    """
    v_true = np.asarray(v_true, dtype=float)
    return (v_true - norm.out_mean) / norm.out_scale, v_true / norm.out_scale


def batch_loss(spec, weights, normalizer, inputs, v_true, kind, epsilon) -> float:
    _, acts = _forward_all(spec, weights, normalizer, inputs)
    target_n, true_s = _scaled_targets(normalizer, v_true)
    # pred/out_scale - true/out_scale == out_n - target_n
    vals, _ = loss_value_and_grad(kind, epsilon, acts[-1] - target_n + true_s, true_s)
    return float(np.mean(vals))


def param_gradients(spec: MlpSpec, weights: MlpWeights, normalizer: Normalizer, batch: Pairs, loss: TrainConfig):
    """Gradient of the mean batch loss with respect to every weight and bias.

    Returns:
        ``(grad, mean_loss)`` with ``grad`` an :class:`MlpWeights` of matching shapes.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    return _param_gradients(spec, weights, normalizer, batch.inputs, batch.v_out, loss.loss, loss.epsilon)


def _param_gradients(spec, weights, normalizer, inputs, v_true, kind, epsilon):
    zs, acts = _forward_all(spec, weights, normalizer, inputs)
    target_n, true_s = _scaled_targets(normalizer, v_true)
    vals, dl = loss_value_and_grad(kind, epsilon, acts[-1] - target_n + true_s, true_s)
    B = len(inputs)
    delta = dl / B
    gW: list[np.ndarray] = [None] * spec.n_layers  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * spec.n_layers  # type: ignore[list-item]
    for k in range(spec.n_layers - 1, -1, -1):
        gW[k] = delta.T @ acts[k]
        gb[k] = delta.sum(0)
        if k > 0:
            delta = (delta @ weights.weights[k]) * activation_deriv(spec.activation, zs[k - 1])
    return MlpWeights(gW, gb), float(np.mean(vals))


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "test_loss"])
            for e, (a, b) in enumerate(zip(self.train_loss, self.test_loss)):
                w.writerow([e + 1, repr(a), repr(b)])

    def smoothed_train(self, window: int = 3) -> np.ndarray:
        """Trailing moving average of the per-epoch training loss."""
        x = np.asarray(self.train_loss)
        c = np.cumsum(np.insert(x, 0, 0.0))
        out = np.empty_like(x)
        for i in range(len(x)):
            lo = max(0, i - window + 1)
            out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
        return out


class MlpModel:
    """A trained network bundled as a transition model ``v_next = f(v, u)``."""

    def __init__(self, spec: MlpSpec, weights: MlpWeights, normalizer: Normalizer | None = None):
        weights.check(spec)
        self.spec = spec
        self.weights = weights
        self.normalizer = normalizer or Normalizer()

    def predict(self, v, u) -> np.ndarray:
        return forward(self.spec, self.weights, self.normalizer, v, u)

    def jacobian(self, v, u) -> np.ndarray:
        return input_jacobian(self.spec, self.weights, self.normalizer, v, u)

    def lipschitz_bound(self) -> float:
        """Upper bound on the Euclidean Lipschitz constant of ``predict`` w.r.t. ``(v, u)``."""
        L = np.max(self.normalizer.out_scale) / np.min(self.normalizer.in_scale)
        act = 1.0 if self.spec.activation is Activation.RELU else GELU_LIPSCHITZ
        for k, W in enumerate(self.weights.weights):
            L *= np.linalg.norm(W, 2)
            if k < self.spec.n_layers - 1:
                L *= act
        return float(L)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "layers": [
                {"shape": list(W.shape), "weights": W.ravel().tolist(), "bias": b.tolist()}
                for W, b in zip(self.weights.weights, self.weights.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')}")
        spec = MlpSpec.from_dict(d["spec"])
        Ws = [np.asarray(L["weights"], dtype=float).reshape(L["shape"]) for L in d["layers"]]
        bs = [np.asarray(L["bias"], dtype=float) for L in d["layers"]]
        return cls(spec, MlpWeights(Ws, bs), Normalizer(**d["normalizer"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MlpModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def validate_model_document(d: dict) -> None:
    """Raise ``ValueError`` if ``d`` is not a well-formed model file."""
    for key in ("format_version", "spec", "normalizer", "layers"):
        if key not in d:
            raise ValueError(f"model document missing '{key}'")
    MlpModel.from_dict(d)


def train(spec: MlpSpec, dataset: Pairs | tuple[Pairs, Pairs], config: TrainConfig, log=None):
    """Fit a network with seeded mini-batch Adam.

    Args:
        spec: Architecture; ``spec.seed`` seeds the initialization.
        dataset: Training pairs, or ``(train, test)``.
        config: Loss and optimizer settings; ``config.seed`` seeds batching.
        log: Optional callable receiving one progress string per epoch.

    Returns:
        ``(model, history)``.
    """
    train_set, test_set = dataset if isinstance(dataset, tuple) else (dataset, None)
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    t0 = time.perf_counter()
    norm = Normalizer.fit(train_set.inputs, train_set.v_out)
    w = MlpWeights.init(spec)
    m = [np.zeros_like(a) for a in w.weights + w.biases]
    s = [np.zeros_like(a) for a in w.weights + w.biases]
    rng = np.random.default_rng(config.seed)
    X, Y = train_set.inputs, train_set.v_out
    history = TrainHistory()
    t = 0
    b1, b2 = config.beta1, config.beta2
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total, count = 0.0, 0
        for start in range(0, len(X), config.batch_size):
            idx = order[start : start + config.batch_size]
            g, val = _param_gradients(spec, w, norm, X[idx], Y[idx], config.loss, config.epsilon)
            total += val * len(idx)
            count += len(idx)
            t += 1
            params = w.weights + w.biases
            grads = g.weights + g.biases
            lr_t = config.learning_rate * math.sqrt(1 - b2**t) / (1 - b1**t)
            for p, gr, mm, ss in zip(params, grads, m, s):
                mm *= b1
                mm += (1 - b1) * gr
                ss *= b2
                ss += (1 - b2) * gr * gr
                p -= lr_t * mm / (np.sqrt(ss) + config.adam_eps)
        history.train_loss.append(total / count)
        if test_set is not None and len(test_set):
            history.test_loss.append(batch_loss(spec, w, norm, test_set.inputs, test_set.v_out, config.loss, config.epsilon))
        else:
            history.test_loss.append(float("nan"))
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} train {history.train_loss[-1]:.5g} test {history.test_loss[-1]:.5g}")
    history.wall_time = time.perf_counter() - t0
    return MlpModel(spec, w, norm), history
