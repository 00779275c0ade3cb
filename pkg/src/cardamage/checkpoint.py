"""Binary "DNET" checkpoints for networks and CAE stages.

Layout (all integers little-endian)::

    b"DNET"  u32 version  u32 kind (0 network, 1 cae stage)  i32 stage (-1 for networks)
    u32 ndim  u32 dims[ndim]          input shape
    u32 num_classes                   0 for cae stages
    u32 n_layers
    per layer:
        u8 kind tag, layer hyperparameters (see _write_layer)
        u32 n_params
        per parameter: u8 name_len, name (utf-8), u8 ndim, u32 dims[ndim], f64 payload
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .cnn import CaeStage
from .nn import Conv, Dense, Dropout, MaxPool, Network, ReLU, Softmax

MAGIC = b"DNET"
VERSION = 1
KIND_NETWORK = 0
KIND_CAE_STAGE = 1

_TAGS = {"conv": 1, "maxpool": 2, "relu": 3, "fc": 4, "dropout": 5, "softmax": 6}
_KINDS = {v: k for k, v in _TAGS.items()}
_PADDING = {"valid": 0, "same": 1}


class CheckpointError(ValueError):
    pass


def _u32(f, *vals):
    f.write(struct.pack(f"<{len(vals)}I", *vals))


def _read(f, fmt):
    size = struct.calcsize(fmt)
    buf = f.read(size)
    if len(buf) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, buf)


def _write_layer(f, layer):
    f.write(struct.pack("<B", _TAGS[layer.kind]))
    if isinstance(layer, Conv):
        _u32(f, layer.in_channels, layer.filters, layer.kernel, layer.stride)
        f.write(struct.pack("<B", _PADDING[layer.padding]))
    elif isinstance(layer, MaxPool):
        _u32(f, layer.window, layer.stride)
    elif isinstance(layer, Dense):
        _u32(f, layer.in_features, layer.out_features)
    elif isinstance(layer, Dropout):
        f.write(struct.pack("<d", layer.rate))
    _u32(f, len(layer.params))
    for name, p in layer.params.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<B", len(raw)) + raw)
        f.write(struct.pack("<B", p.ndim))
        _u32(f, *p.shape)
        f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def _read_layer(f):
    (tag,) = _read(f, "<B")
    kind = _KINDS.get(tag)
    if kind is None:
        raise CheckpointError(f"unknown layer tag {tag}")
    if kind == "conv":
        c, nf, k, s = _read(f, "<4I")
        (pad,) = _read(f, "<B")
        layer = Conv(c, nf, k, s, "same" if pad else "valid")
    elif kind == "maxpool":
        layer = MaxPool(*_read(f, "<2I"))
    elif kind == "fc":
        layer = Dense(*_read(f, "<2I"))
    elif kind == "dropout":
        layer = Dropout(_read(f, "<d")[0])
    elif kind == "relu":
        layer = ReLU()
    else:
        layer = Softmax()
    (n,) = _read(f, "<I")
    for _ in range(n):
        (ln,) = _read(f, "<B")
        name = f.read(ln).decode("utf-8")
        (nd,) = _read(f, "<B")
        shape = _read(f, f"<{nd}I")
        count = int(np.prod(shape))
        buf = f.read(8 * count)
        if len(buf) != 8 * count:
            raise CheckpointError("truncated parameter payload")
        arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if name not in layer.params or layer.params[name].shape != arr.shape:
            raise CheckpointError(f"{kind} layer has no parameter {name} of shape {shape}")
        layer.params[name] = arr
        layer.grads[name] = np.zeros_like(arr)
    return layer


def _write(f, kind: int, stage: int, input_shape, num_classes: int, layers):
    f.write(MAGIC)
    _u32(f, VERSION, kind)
    f.write(struct.pack("<i", stage))
    _u32(f, len(input_shape), *input_shape)
    _u32(f, num_classes, len(layers))
    for layer in layers:
        _write_layer(f, layer)


def _read_all(f):
    if f.read(4) != MAGIC:
        raise CheckpointError("bad magic: not a DNET checkpoint")
    version, kind = _read(f, "<2I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (stage,) = _read(f, "<i")
    (nd,) = _read(f, "<I")
    input_shape = _read(f, f"<{nd}I")
    num_classes, n_layers = _read(f, "<2I")
    layers = [_read_layer(f) for _ in range(n_layers)]
    return kind, stage, tuple(input_shape), num_classes, layers


def network_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    _write(buf, KIND_NETWORK, -1, net.input_shape, net.num_classes, net.layers)
    return buf.getvalue()


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(network_bytes(net))


def load_network(path, seed: int = 0) -> Network:
    with open(path, "rb") as f:
        kind, _, input_shape, num_classes, layers = _read_all(f)
    if kind != KIND_NETWORK:
        raise CheckpointError(f"{path} holds a CAE stage, not a network")
    return Network(input_shape, layers, num_classes, seed=seed)


def save_stage(stage: CaeStage, input_shape, path) -> None:
    buf = io.BytesIO()
    _write(buf, KIND_CAE_STAGE, stage.index, tuple(input_shape), 0, [stage.encoder()])
    Path(path).write_bytes(buf.getvalue())


def load_stage(path) -> tuple[CaeStage, tuple]:
    """Returns the stage and the input shape it was trained on."""
    with open(path, "rb") as f:
        kind, index, input_shape, _, layers = _read_all(f)
    if kind != KIND_CAE_STAGE or len(layers) != 1 or not isinstance(layers[0], Conv):
        raise CheckpointError(f"{path} is not a CAE stage checkpoint")
    conv = layers[0]
    return CaeStage(index, conv.params["W"], conv.params["b"]), input_shape
