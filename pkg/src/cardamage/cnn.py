"""The four-stage damage CNN, its training loop, and layerwise CAE pretraining."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import (
    SGD,
    Conv,
    Dense,
    Dropout,
    MaxPool,
    Network,
    ReLU,
    Softmax,
    TrainConfig,
    cross_entropy,
)
from .tensor import Prng, ShapeError, maxpool2d

log = logging.getLogger(__name__)

NUM_STAGES = 4


@dataclass
class PaperCnnConfig:
    """Conv(16@5x5, same)-ReLU-Pool(2/2) x 4, then FC(128)-ReLU, Linear(K), softmax.

    With a 224x224x3 input and 8 classes this has 423,032 weights.
    """

    input_shape: tuple = (224, 224, 3)
    filters: int = 16
    kernel: int = 5
    pool: int = 2
    pool_stride: int = 2
    fc_hidden: int = 128
    num_classes: int = 8
    conv_dropout: float = 0.25
    fc_dropout: float = 0.5

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        h, w, c = self.input_shape
        div = self.pool_stride**NUM_STAGES
        if h % div or w % div:
            raise ValueError(f"input {h}x{w} must be divisible by {div}")
        if c < 1 or self.num_classes < 2:
            raise ValueError("need at least one channel and two classes")

    @property
    def flat_features(self) -> int:
        h, w, _ = self.input_shape
        div = self.pool_stride**NUM_STAGES
        return (h // div) * (w // div) * self.filters


def conv_layer_index(stage: int) -> int:
    return 4 * stage


FEATURE_LAYER = 4 * NUM_STAGES + 3  # output of FC(128)+ReLU+Dropout


def build_paper_cnn(config: PaperCnnConfig = PaperCnnConfig(), seed: int = 0) -> Network:
    layers = []
    c = config.input_shape[2]
    for _ in range(NUM_STAGES):
        layers += [
            Conv(c, config.filters, config.kernel),
            ReLU(),
            MaxPool(config.pool, config.pool_stride),
            Dropout(config.conv_dropout),
        ]
        c = config.filters
    layers += [
        Dense(config.flat_features, config.fc_hidden),
        ReLU(),
        Dropout(config.fc_dropout),
        Dense(config.fc_hidden, config.num_classes),
        Softmax(),
    ]
    net = Network(config.input_shape, layers, config.num_classes, seed=seed)
    net.init_params(seed)
    return net


def paper_cnn_param_count(h: int, w: int, c: int, k: int) -> int:
    """Closed form for the default filters=16, kernel=5, fc_hidden=128 topology."""
    return 16 * (25 * c + 1) + 3 * 16 * (25 * 16 + 1) + (h * w // 256 * 16) * 128 + 128 + 128 * k + k


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(net.predict(x) == np.asarray(y)))


def _check_dataset(net: Network, x: np.ndarray, y: np.ndarray):
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    if tuple(x.shape[1:]) != net.input_shape:
        raise ShapeError(f"images {x.shape[1:]} do not match network input {net.input_shape}")
    y = np.asarray(y)
    if y.min() < 0 or y.max() >= net.num_classes:
        raise ValueError(f"labels span [{y.min()}, {y.max()}] but network has {net.num_classes} classes")


def train_cnn(net: Network, x: np.ndarray, y: np.ndarray, config: TrainConfig,
              x_val: np.ndarray | None = None, y_val: np.ndarray | None = None):
    """Mini-batch momentum SGD on mean cross-entropy.

    Returns ``(net, history)``; history has one dict per epoch with the mean
    training loss and accuracy (and validation accuracy when given).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    history: list[dict] = []
    if config.epochs == 0:
        return net, history
    _check_dataset(net, x, y)
    net.reseed(config.seed)
    order_rng = Prng.derive(config.seed, "shuffle")
    opt = SGD(config.lr, config.momentum)
    n = len(x)
    for epoch in range(config.epochs):
        order = order_rng.permutation(n) if config.shuffle else np.arange(n)
        loss_sum = 0.0
        correct = 0
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            xb, yb = x[idx], y[idx]
            prob = net.forward(xb, "train")
            loss_sum += cross_entropy(prob, yb) * len(idx)
            correct += int(np.sum(prob.argmax(axis=1) == yb))
            net.backward(prob, yb)
            opt.step(net)
        rec = {"epoch": epoch + 1, "loss": loss_sum / n, "accuracy": correct / n}
        if x_val is not None:
            rec["val_accuracy"] = accuracy(net, x_val, y_val)
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.4f%s", rec["epoch"], rec["loss"], rec["accuracy"],
                 f" val {rec['val_accuracy']:.4f}" if "val_accuracy" in rec else "")
    return net, history


# ---------------------------------------------------------------------------
# Convolutional autoencoder pretraining
# ---------------------------------------------------------------------------


@dataclass
class CaeConfig:
    stages: int = NUM_STAGES
    pretrain_lr: float = 0.05
    finetune_lr: float = 0.01
    epochs: int = 20
    batch_size: int = 16
    momentum: float = 0.9
    seed: int = 0
    dropout: float = 0.0  # rate on encoder activations during pretraining updates
    rescale: bool = True  # match stage activation scale to the random init before fine-tuning
    rescale_samples: int = 256

    def __post_init__(self):
        if not 1 <= self.stages <= NUM_STAGES:
            raise ValueError(f"stages must be in [1, {NUM_STAGES}]")
        if not (self.pretrain_lr > 0 and self.finetune_lr > 0):
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.rescale_samples < 1:
            raise ValueError("rescale_samples must be >= 1")
        if not self.finetune_lr < self.pretrain_lr:
            raise ValueError(
                f"finetune_lr ({self.finetune_lr}) must be smaller than pretrain_lr ({self.pretrain_lr})")


@dataclass
class CaeStage:
    """Trained encoder of one stage; the decoder is dropped after training."""

    index: int
    W: np.ndarray
    b: np.ndarray
    mse_init: float = float("nan")
    mse_final: float = float("nan")
    history: list = field(default_factory=list)

    def encoder(self) -> Conv:
        k, _, c, f = self.W.shape
        conv = Conv(c, f, k)
        conv.params["W"][...] = self.W
        conv.params["b"][...] = self.b
        return conv


def encode(stages: list[CaeStage], x: np.ndarray, pool: int = 2, batch_size: int = 256) -> np.ndarray:
    """Frozen conv+ReLU+pool pipeline of the given stages."""
    out = []
    convs = [s.encoder() for s in stages]
    for s in range(0, len(x), batch_size):
        a = np.asarray(x[s : s + batch_size], dtype=np.float64)
        for conv in convs:
            a = np.maximum(conv.forward(a), 0.0)
            conv._cache = None
            a, _ = maxpool2d(a, pool, pool)
        out.append(a)
    return np.concatenate(out) if out else np.asarray(x, dtype=np.float64)


class _Autoencoder:
    def __init__(self, channels: int, filters: int, kernel: int, rng_enc: Prng, rng_dec: Prng,
                 dropout: float = 0.0, rng_drop: Prng | None = None):
        self.enc = Conv(channels, filters, kernel)
        self.dec = Conv(filters, channels, kernel)
        self.enc.init(rng_enc)
        self.dec.init(rng_dec)
        self.relu = ReLU()
        self.drop = Dropout(dropout)
        self.drop.rng = rng_drop

    def reconstruct(self, x, train: bool = False):
        h = self.relu.forward(self.enc.forward(x))
        return self.dec.forward(self.drop.forward(h, train))

    def clear(self):
        for layer in (self.enc, self.relu, self.drop, self.dec):
            layer._cache = None

    def mse(self, x, batch_size=256) -> float:
        total = 0.0
        for s in range(0, len(x), batch_size):
            xb = x[s : s + batch_size]
            total += float(np.sum((self.reconstruct(xb) - xb) ** 2))
        self.clear()
        return total / x.size


def cae_pretrain_stage(stage_index: int, images: np.ndarray, config: CaeConfig,
                       previous: list[CaeStage] = (), filters: int = 16,
                       kernel: int = 5) -> CaeStage:
    """Train one conv layer as the encoder of a conv autoencoder.

    The stage sees ``images`` passed through the frozen encoders in
    ``previous`` and minimizes per-pixel MSE through an untied linear
    decoder (a same-padded stride-1 convolution back to the input channels).
    """
    if stage_index != len(previous) or stage_index >= config.stages:
        raise ValueError(
            f"stage {stage_index} out of order: {len(previous)} stages pretrained, "
            f"{config.stages} configured")
    x = encode(list(previous), images)
    if len(x) == 0:
        raise ValueError("empty pretraining corpus")
    c = x.shape[-1]
    ae = _Autoencoder(c, filters, kernel, Prng.derive(config.seed, f"cae/{stage_index}/enc"),
                      Prng.derive(config.seed, f"cae/{stage_index}/dec"), config.dropout,
                      Prng.derive(config.seed, f"cae/{stage_index}/dropout"))
    for conv in (ae.enc, ae.dec):
        conv.params["b"][...] = 0.0
    mse_init = ae.mse(x)
    order_rng = Prng.derive(config.seed, f"cae/{stage_index}/shuffle")
    velocity = {}
    history = []
    n = len(x)
    for epoch in range(config.epochs):
        order = order_rng.permutation(n)
        for s in range(0, n, config.batch_size):
            xb = x[order[s : s + config.batch_size]]
            rec = ae.reconstruct(xb, train=True)
            d = 2.0 * (rec - xb) / xb.size
            d = ae.dec.backward(d)
            d = ae.drop.backward(d)
            d = ae.relu.backward(d)
            ae.enc.backward(d)
            for layer_name, layer in (("enc", ae.enc), ("dec", ae.dec)):
                for name, p in layer.params.items():
                    v = velocity.get((layer_name, name), 0.0)
                    v = config.momentum * v - config.pretrain_lr * layer.grads[name]
                    velocity[(layer_name, name)] = v
                    p += v
        history.append({"epoch": epoch + 1, "mse": ae.mse(x)})
        log.info("cae stage %d epoch %d mse %.6f", stage_index, epoch + 1, history[-1]["mse"])
    mse_final = history[-1]["mse"] if history else mse_init
    return CaeStage(stage_index, ae.enc.params["W"].copy(), ae.enc.params["b"].copy(),
                    mse_init, mse_final, history)


def cae_pretrain(images: np.ndarray, config: CaeConfig, filters: int = 16,
                 kernel: int = 5) -> list[CaeStage]:
    stages: list[CaeStage] = []
    for s in range(config.stages):
        stages.append(cae_pretrain_stage(s, images, config, stages, filters, kernel))
    return stages


def _stage_rms(net: Network, x: np.ndarray, upto: int = NUM_STAGES - 1) -> list[float]:
    """Root-mean-square of each stage's pooled output on ``x`` (eval mode)."""
    out = []
    h = x
    for layer in net.layers[: conv_layer_index(upto) + 3]:
        h = layer.forward(h)
        if isinstance(layer, MaxPool):
            out.append(float(np.sqrt(np.mean(h * h))))
    for layer in net.layers:
        layer._cache = None
    return out


def assemble_and_finetune(stages: list[CaeStage], x: np.ndarray, y: np.ndarray, cae_config: CaeConfig,
                          cnn_config: PaperCnnConfig, train_config: TrainConfig,
                          x_val=None, y_val=None):
    """Stack pretrained encoders into the classifier and fine-tune it end to end.

    Conv stages start from the encoder weights; FC layers are randomly
    initialized. Training uses ``cae_config.finetune_lr``.

    With ``cae_config.rescale`` each stage is multiplied by a positive
    constant (its bias by the running product, so every stage sees its
    pretraining input up to scale) until its pooled activations on the first
    ``rescale_samples`` training images have the same RMS as under the random
    initialization. ReLU and max-pooling commute with positive scaling, so the
    learned features are unchanged; only their magnitude, which the
    reconstruction loss leaves free, is set to the one the optimizer settings
    are tuned for.
    """
    if len(stages) != cae_config.stages:
        raise ValueError(f"missing stage: got {len(stages)} of {cae_config.stages}")
    for i, st in enumerate(stages):
        if st.index != i:
            raise ValueError(f"missing stage {i}")
    net = build_paper_cnn(cnn_config, seed=train_config.seed)
    probe = np.asarray(x[: cae_config.rescale_samples], dtype=np.float64)
    target = _stage_rms(net, probe) if cae_config.rescale else None
    cum = 1.0
    for st in stages:
        conv = net.layers[conv_layer_index(st.index)]
        if conv.params["W"].shape != st.W.shape:
            raise ShapeError(f"stage {st.index} weights {st.W.shape} do not fit {conv.params['W'].shape}")
        conv.params["W"][...] = st.W
        conv.params["b"][...] = st.b * cum
        if target is not None:
            rms = _stage_rms(net, probe, upto=st.index)[st.index]
            if rms > 0:
                a = target[st.index] / rms
                conv.params["W"][...] *= a
                conv.params["b"][...] *= a
                cum *= a
    return train_cnn(net, x, y, replace(train_config, lr=cae_config.finetune_lr), x_val, y_val)
