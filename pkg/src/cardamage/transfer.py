"""Linear heads over frozen feature vectors, and probability ensembles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureSet
from .nn import softmax
from .tensor import Prng

# Augmented-data softmax-head test accuracies of the six pretrained extractors.
TABLE_III_SOFTMAX_AUGMENTED = {
    "Cars": 68.26,
    "Inception": 75.57,
    "Alexnet": 76.95,
    "VGG-19": 85.95,
    "VGG-16": 86.78,
    "Resnet": 88.95,
}
TABLE_III_DIMS = {"Cars": 1024, "Inception": 2048, "Alexnet": 4096, "VGG-19": 4096,
                  "VGG-16": 4096, "Resnet": 2048}


@dataclass
class HeadConfig:
    lr: float = 0.1
    l2: float = 1e-4
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    standardize: bool = True

    def __post_init__(self):
        if not self.lr > 0 or self.l2 < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError(f"invalid head hyperparameters {self}")


@dataclass
class LinearHead:
    kind: str  # "softmax" or "svm"
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    config: HeadConfig = field(default_factory=HeadConfig)
    extractor: str = ""

    @property
    def num_classes(self) -> int:
        return self.W.shape[1]

    def scores(self, x: np.ndarray) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return z @ self.W + self.b

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Class probabilities; SVM margins are mapped through a softmax."""
        return softmax(self.scores(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.scores(x).argmax(axis=1)

    def accuracy(self, fs: FeatureSet) -> float:
        return float(np.mean(self.predict(fs.features) == fs.labels))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "extractor": self.extractor,
            "config": asdict(self.config),
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearHead":
        return cls(d["kind"], np.array(d["W"], dtype=np.float64), np.array(d["b"], dtype=np.float64),
                   np.array(d["mean"], dtype=np.float64), np.array(d["scale"], dtype=np.float64),
                   HeadConfig(**d["config"]), d.get("extractor", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "LinearHead":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_classes(fs: FeatureSet):
    if len(fs) == 0:
        raise ValueError("empty feature set")
    present = np.bincount(fs.labels, minlength=fs.num_classes)
    missing = np.flatnonzero(present == 0)
    if len(missing):
        raise ValueError(f"class {int(missing[0])} absent from training set")


def _standardizer(x: np.ndarray, on: bool):
    d = x.shape[1]
    if not on:
        return np.zeros(d), np.ones(d)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def _fit(fs: FeatureSet, config: HeadConfig, kind: str, grad_fn) -> LinearHead:
    _check_classes(fs)
    mean, scale = _standardizer(fs.features, config.standardize)
    z = (fs.features - mean) / scale
    n, d = z.shape
    k = fs.num_classes
    W = np.zeros((d, k))
    b = np.zeros(k)
    rng = Prng.derive(config.seed, f"head/{kind}")
    shrink = 1.0 / (1.0 + config.lr * config.l2)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            g = grad_fn(z[idx] @ W + b, fs.labels[idx])
            # proximal step for the L2 term keeps large penalties stable
            W = (W - config.lr * (z[idx].T @ g)) * shrink
            b = b - config.lr * g.sum(axis=0)
    return LinearHead(kind, W, b, mean, scale, config, fs.extractor)


def _softmax_grad(scores, labels):
    g = softmax(scores)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def _ovr_targets(labels, k):
    y = -np.ones((len(labels), k))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def _hinge_grad(scores, labels):
    y = _ovr_targets(labels, scores.shape[1])
    active = (y * scores) < 1.0
    return np.where(active, -y, 0.0) / len(labels)


def train_softmax_head(fs: FeatureSet, config: HeadConfig = HeadConfig()) -> LinearHead:
    """Multinomial logistic regression, mini-batch SGD on cross-entropy + L2."""
    return _fit(fs, config, "softmax", _softmax_grad)


def train_svm_head(fs: FeatureSet, config: HeadConfig = HeadConfig()) -> LinearHead:
    """One-vs-rest linear SVMs, subgradient SGD on L2-regularized hinge loss."""
    return _fit(fs, config, "svm", _hinge_grad)


def hinge_loss(head: LinearHead, fs: FeatureSet) -> float:
    """Mean over examples of the summed one-vs-rest hinge losses (no penalty)."""
    y = _ovr_targets(fs.labels, head.num_classes)
    return float(np.maximum(0.0, 1.0 - y * head.scores(fs.features)).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


def select_top_k(scores, k: int) -> list[int]:
    """Indices of the ``k`` highest scores in member order; ties go to the lower index."""
    scores = list(scores)
    if not 1 <= k <= len(scores):
        raise ValueError(f"k={k} but there are {len(scores)} members")
    return sorted(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k])


def select_top_k_heads(heads: list[LinearHead], validation: list[FeatureSet], k: int) -> list[int]:
    if len(heads) != len(validation):
        raise ValueError("need one validation set per head")
    return select_top_k([h.accuracy(v) for h, v in zip(heads, validation)], k)


@dataclass
class EnsembleSpec:
    """Member weights; ``selection`` is "all" or the k of a top-k selection."""

    weights: tuple
    selection: str | int = "all"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise ValueError("need at least one member weight")
        if (w < 0).any():
            raise ValueError("weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        if self.selection != "all" and not 1 <= int(self.selection) <= len(w):
            raise ValueError(f"top-{self.selection} of {len(w)} members")
        self.weights = tuple(float(v) for v in w)

    @classmethod
    def uniform(cls, m: int, selection="all") -> "EnsembleSpec":
        return cls(normalize([1.0] * m), selection)

    @classmethod
    def proportional(cls, accuracies, selection="all") -> "EnsembleSpec":
        return cls(normalize(accuracies), selection)


def normalize(weights) -> tuple:
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise ValueError("weights must have a positive sum")
    w = w / total
    # push the rounding residue onto the largest weight
    w[int(np.argmax(w))] += 1.0 - w.sum()
    return tuple(float(v) for v in w)


def ensemble_predict(spec: EnsembleSpec | tuple, member_probs) -> np.ndarray:
    """Weighted average of member probability rows.

    Evaluated as ``p_0 + sum_m w_m (p_m - p_0)``, algebraically equal to
    ``sum_m w_m p_m`` when the weights sum to one; identical members and
    one-hot weights then reproduce a member's row bit for bit.
    """
    weights = spec.weights if isinstance(spec, EnsembleSpec) else tuple(spec)
    probs = [np.asarray(p, dtype=np.float64) for p in member_probs]
    if len(probs) != len(weights):
        raise ValueError(f"{len(weights)} weights for {len(probs)} members")
    shape = probs[0].shape
    if any(p.shape != shape for p in probs):
        raise ValueError("member probability rows differ in shape")
    base = probs[0]
    out = base.copy()
    for w, p in zip(weights[1:], probs[1:]):
        if w != 0.0:
            out += w * (p - base)
    return out
