"""Layers, networks, losses and SGD with hand-written backward passes.

Activations are batched ``N x H x W x C`` (spatial layers) or ``N x D``
(dense layers). Each layer caches what its backward pass needs during
``forward`` and consumes that cache in ``backward``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Prng,
    ShapeError,
    conv2d,
    conv2d_backward,
    maxpool2d,
    maxpool2d_backward,
    same_padding,
)

LOG_CLAMP = 1e-12


class BackwardError(RuntimeError):
    """backward() called without a matching forward()."""


class NonFiniteGradient(FloatingPointError):
    pass


def glorot_uniform(rng: Prng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardError(f"{self.kind}: backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def config(self) -> dict:
        return {}

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({cfg})"


class Conv(Layer):
    kind = "conv"

    def __init__(self, in_channels: int, filters: int, kernel: int = 5, stride: int = 1,
                 padding: str = "same"):
        super().__init__()
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.params = {
            "W": np.zeros((kernel, kernel, in_channels, filters)),
            "b": np.zeros(filters),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def init(self, rng: Prng):
        k, c, f = self.kernel, self.in_channels, self.filters
        self.params["W"][...] = glorot_uniform(rng, self.params["W"].shape, k * k * c, k * k * f)
        self.params["b"][...] = 0.0

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        if self.padding == "same":
            (pt, pb), (pl, pr) = same_padding(h, self.kernel, self.stride), same_padding(
                w, self.kernel, self.stride)
        else:
            pt = pb = pl = pr = 0
        if self.kernel > h + pt + pb or self.kernel > w + pl + pr:
            raise ShapeError(f"conv kernel {self.kernel} larger than padded input {input_shape}")
        ho = (h + pt + pb - self.kernel) // self.stride + 1
        wo = (w + pl + pr - self.kernel) // self.stride + 1
        return (ho, wo, self.filters)

    def forward(self, x, train=False):
        out, cols = conv2d(x, self.params["W"], self.params["b"], self.stride, self.padding,
                           return_cols=True)
        self._cache = (x, cols)
        return out

    def backward(self, dout, need_dx: bool = True):
        x, cols = self._take_cache()
        dx, dw, db = conv2d_backward(dout, x, self.params["W"], self.stride, self.padding, cols,
                                     need_dx)
        self.grads["W"] = dw
        self.grads["b"] = db
        return dx

    def config(self):
        return {"in_channels": self.in_channels, "filters": self.filters, "kernel": self.kernel,
                "stride": self.stride, "padding": self.padding}


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, window: int = 2, stride: int = 2):
        super().__init__()
        self.window = window
        self.stride = stride

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if self.window > h or self.window > w:
            raise ShapeError(f"pool window {self.window} exceeds input {input_shape}")
        return ((h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1, c)

    def forward(self, x, train=False):
        out, arg = maxpool2d(x, self.window, self.stride)
        self._cache = (x.shape, arg)
        return out

    def backward(self, dout):
        shape, arg = self._take_cache()
        return maxpool2d_backward(dout, arg, shape, self.window, self.stride)

    def config(self):
        return {"window": self.window, "stride": self.stride}


class ReLU(Layer):
    """max(0, x); the subgradient at exactly 0 is 0."""

    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dout):
        mask = self._take_cache()
        return np.where(mask, dout, 0.0)


class Dense(Layer):
    """Fully connected layer; flattens any trailing input dimensions."""

    kind = "fc"

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.params = {"W": np.zeros((in_features, out_features)), "b": np.zeros(out_features)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def init(self, rng: Prng):
        self.params["W"][...] = glorot_uniform(
            rng, self.params["W"].shape, self.in_features, self.out_features)
        self.params["b"][...] = 0.0

    def output_shape(self, input_shape):
        d = int(np.prod(input_shape))
        if d != self.in_features:
            raise ShapeError(f"fc expects {self.in_features} inputs, got {input_shape} ({d})")
        return (self.out_features,)

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        self._cache = (x.shape, flat)
        return flat @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        shape, flat = self._take_cache()
        self.grads["W"] = flat.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return (dout @ self.params["W"].T).reshape(shape)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features}


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1/(1 - rate) in training."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng: Prng | None = None

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._cache = 1.0
            return x
        if self.rng is None:
            raise RuntimeError("dropout layer has no PRNG attached")
        keep = 1.0 - self.rate
        scale = (self.rng.random(x.shape) < keep) / keep
        self._cache = scale
        return x * scale

    def backward(self, dout):
        scale = self._take_cache()
        return dout * scale

    def config(self):
        return {"rate": self.rate}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False):
        p = softmax(x)
        self._cache = p
        return p

    def backward(self, dout):
        p = self._take_cache()
        return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


LAYER_TYPES = {cls.kind: cls for cls in (Conv, MaxPool, ReLU, Dense, Dropout, Softmax)}


class Network:
    """Ordered stack of layers ending in a softmax over ``num_classes``.

    Shapes are checked symbolically when the network is built.
    """

    def __init__(self, input_shape, layers: list[Layer], num_classes: int | None = None,
                 seed: int = 0):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        self.shapes = [self.input_shape]
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
            self.shapes.append(shape)
        if len(shape) != 1:
            raise ShapeError(f"network output must be a vector, got {shape}")
        self.num_classes = shape[0] if num_classes is None else num_classes
        if shape[0] != self.num_classes:
            raise ShapeError(f"network emits {shape[0]} outputs for {self.num_classes} classes")
        self.reseed(seed)

    def reseed(self, seed: int):
        """Reset the dropout mask stream."""
        self.seed = seed
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                layer.rng = Prng.derive(seed, f"dropout/{i}")

    def init_params(self, seed: int):
        for i, layer in enumerate(self.layers):
            if hasattr(layer, "init"):
                layer.init(Prng.derive(seed, f"init/{i}"))

    def parameters(self):
        """Yield ``(layer_index, name, array)`` for every parameter."""
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield i, name, p

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"layer 0: batch shape {x.shape[1:]} != network input {self.input_shape}")
        train = mode == "train"
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x, train)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return x

    def logits_backward_start(self) -> int:
        if not isinstance(self.layers[-1], Softmax):
            raise TypeError("network must end in a softmax layer")
        return len(self.layers) - 1

    def backward(self, prob: np.ndarray, labels) -> dict:
        """Populate gradients of mean cross-entropy for every parameter.

        The softmax and the loss are differentiated together: the gradient at
        the logits is ``(prob - onehot) / B``.
        """
        labels = _check_labels(labels, prob.shape[1])
        if len(labels) != prob.shape[0]:
            raise ShapeError(f"{len(labels)} labels for a batch of {prob.shape[0]}")
        last = self.logits_backward_start()
        self.layers[last]._take_cache()
        d = prob.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        d /= len(labels)
        return self.backward_from(d, last)

    def backward_from(self, dout: np.ndarray, stop: int) -> dict:
        """Backpropagate ``dout`` given at the output of layer ``stop - 1``."""
        for i in range(stop - 1, -1, -1):
            layer = self.layers[i]
            if i == 0 and isinstance(layer, Conv):
                layer.backward(dout, need_dx=False)
            else:
                dout = layer.backward(dout)
        return self.gradients()

    def gradients(self) -> dict:
        return {(i, name): layer.grads[name] for i, layer in enumerate(self.layers)
                for name in layer.params}

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[s : s + batch_size], "eval") for s in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.num_classes))
        return np.concatenate(out)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return self.predict_proba(x, batch_size).argmax(axis=1)

    def features(self, x: np.ndarray, upto: int, batch_size: int = 256) -> np.ndarray:
        """Activations after layer ``upto - 1`` in eval mode, flattened per example."""
        chunks = []
        for s in range(0, len(x), batch_size):
            a = np.asarray(x[s : s + batch_size], dtype=np.float64)
            for layer in self.layers[:upto]:
                a = layer.forward(a, False)
            chunks.append(a.reshape(len(a), -1))
        for layer in self.layers[:upto]:
            layer._cache = None
        return np.concatenate(chunks)

    def summary(self) -> str:
        lines = [f"input {self.input_shape}"]
        for layer, shape in zip(self.layers, self.shapes[1:]):
            lines.append(f"{layer!r:<60} -> {shape}  params={layer.num_params()}")
        lines.append(f"total params {self.num_params()}")
        return "\n".join(lines)


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-d sequence")
    labels = labels.astype(np.int64)
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        raise ValueError(f"label {int(labels[bad][0])} outside [0, {k})")
    return labels


def cross_entropy(prob: np.ndarray, labels) -> float:
    prob = np.asarray(prob, dtype=np.float64)
    labels = _check_labels(labels, prob.shape[1])
    picked = prob[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, LOG_CLAMP))))


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class SGD:
    """Momentum SGD: ``v <- momentum * v - lr * g``; ``w <- w + v``."""

    lr: float
    momentum: float = 0.0
    velocity: dict = field(default_factory=dict)

    def step(self, net: Network, grads: dict | None = None):
        grads = net.gradients() if grads is None else grads
        for i, name, p in net.parameters():
            g = grads[(i, name)]
            if g.shape != p.shape:
                raise ShapeError(f"layer {i} {name}: gradient {g.shape} vs parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient in layer {i} ({net.layers[i].kind}) {name}")
            v = self.velocity.get((i, name))
            if v is None:
                v = np.zeros_like(p)
            v = self.momentum * v - self.lr * g
            self.velocity[(i, name)] = v
            p += v


def sgd_step(net: Network, grads: dict, config: TrainConfig, velocity: dict) -> Network:
    SGD(config.lr, config.momentum, velocity).step(net, grads)
    return net


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kinks: int

    def __float__(self):
        return self.max_rel_error


def _branch_state(net: Network) -> list:
    # ReLU masks and pool argmaxes from the most recent forward
    state = []
    for layer in net.layers:
        if isinstance(layer, ReLU):
            state.append(layer._cache)
        elif isinstance(layer, MaxPool):
            state.extend(layer._cache[1])
    return state


def _same_branches(a: list, b: list) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(net: Network, x: np.ndarray, labels, h: float = 1e-5, per_param: int | None = 50,
               seed: int = 0) -> GradCheckResult:
    """Compare backprop gradients with central differences.

    Runs in eval mode, so dropout is the identity. ``per_param`` limits how
    many entries of each parameter tensor are perturbed (``None`` checks all).
    Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.

    A perturbation that flips any ReLU mask or max-pool selection straddles a
    kink, where the loss is not differentiable and the central difference is
    not an estimate of the gradient; such entries are counted in ``kinks`` and
    left out of the maximum.
    """
    prob = net.forward(x, "eval")
    base = _branch_state(net)
    net.backward(prob, labels)
    analytic = {key: g.copy() for key, g in net.gradients().items()}
    rng = Prng(seed)
    worst = 0.0
    checked = kinks = 0
    for i, name, p in net.parameters():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if per_param is not None and flat.size > per_param:
            idx = rng.permutation(flat.size)[:per_param]
        ga = analytic[(i, name)].reshape(-1)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            lp = cross_entropy(net.forward(x, "eval"), labels)
            smooth = _same_branches(base, _branch_state(net))
            flat[j] = old - h
            lm = cross_entropy(net.forward(x, "eval"), labels)
            smooth = smooth and _same_branches(base, _branch_state(net))
            flat[j] = old
            checked += 1
            if not smooth:
                kinks += 1
                continue
            num = (lp - lm) / (2 * h)
            err = abs(ga[j] - num) / max(1e-8, abs(ga[j]) + abs(num))
            worst = max(worst, err)
    for layer in net.layers:
        layer._cache = None
    return GradCheckResult(worst, checked, kinks)
