"""Neuron enumeration, stock architectures and checkpoint files.

Checkpoint layout (all integers little-endian)::

    b"NSEL" | version:u32 | header_len:u32 | header (UTF-8 JSON) | payload

The JSON header records the input shape, precision, the layer list with
hyper-parameters, and for every tensor its name, dtype and shape, in payload
order. The payload is the raw little-endian bytes of those tensors, nothing
else. Snapshot dumps use the same container with the magic ``b"NSNP"``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import (LAYER_KINDS, AvgPool2d, BatchNorm2d, Conv2d, Dense, Flatten, MaxPool2d,
                     ReLU, Sequential)
from .exceptions import ConfigError, FormatError, VersionError

CHECKPOINT_MAGIC = b"NSEL"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<4sII")


@dataclass(frozen=True)
class NeuronDescriptor:
    id: int
    layer_index: int
    channel_index: int
    param_cost: int
    has_bias: bool = True


def enumerate_neurons(model):
    """One descriptor per selectable neuron, layer-major, channel-ascending."""
    out = []
    for layer_index, start, n in model.neuron_slices():
        layer = model.layers[layer_index]
        cost = layer.neuron_cost()
        out.extend(NeuronDescriptor(start + c, layer_index, c, cost, layer.has_bias)
                   for c in range(n))
    return out


def neuron_costs(model):
    """Parameter cost of every neuron as an int64 array indexed by neuron id."""
    return np.asarray([d.param_cost for d in enumerate_neurons(model)], dtype=np.int64)


def classifier_neurons(model):
    """Ids of the last parameterised layer's neurons."""
    layer_index, start, n = model.neuron_slices()[-1]
    return frozenset(range(start, start + n))


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

ARCHITECTURES = ("mlp", "small_cnn", "small_cnn_bn")


def build_model(arch, input_shape, n_classes, seed=0, precision="f64", channels=(8, 16),
                hidden=32):
    """Construct one of the stock chains with seeded initial weights.

    ``small_cnn`` is conv-relu-pool twice, then two dense layers; the ``_bn``
    variant inserts a batch norm after each convolution.
    """
    ss = np.random.SeedSequence(seed)
    rngs = iter(np.random.default_rng(s) for s in ss.spawn(8))
    input_shape = tuple(input_shape)
    if arch == "mlp":
        fan_in = int(np.prod(input_shape))
        layers = [Flatten(), Dense(fan_in, hidden, rng=next(rngs)), ReLU(),
                  Dense(hidden, n_classes, rng=next(rngs))]
    elif arch in ("small_cnn", "small_cnn_bn"):
        c1, c2 = channels
        layers = [Conv2d(input_shape[0], c1, 3, padding=1, rng=next(rngs))]
        if arch == "small_cnn_bn":
            layers.append(BatchNorm2d(c1))
        layers += [ReLU(), MaxPool2d(2), Conv2d(c1, c2, 3, padding=1, rng=next(rngs))]
        if arch == "small_cnn_bn":
            layers.append(BatchNorm2d(c2))
        layers += [ReLU(), MaxPool2d(2), Flatten()]
        flat = Sequential(layers, input_shape).shapes()[-1][0]
        layers += [Dense(flat, hidden, rng=next(rngs)), ReLU(),
                   Dense(hidden, n_classes, rng=next(rngs))]
    else:
        raise ConfigError(f"unknown architecture {arch!r}, expected one of {ARCHITECTURES}")
    return Sequential(layers, input_shape, precision=precision)


def reinit_classifier(model, seed, n_classes=None):
    """Draw fresh weights for the last parameterised layer (new task head)."""
    i = model.param_layers()[-1]
    old = model.layers[i]
    if not isinstance(old, Dense):
        raise ConfigError("classifier re-initialisation needs a dense last layer")
    fan_out = old.fan_out if n_classes is None else int(n_classes)
    fresh = Dense(old.fan_in, fan_out, bias=old.has_bias, rng=np.random.default_rng(seed))
    fresh.cast(model.dtype)
    model.layers[i] = fresh
    return model


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------


def write_container(path, magic, header, arrays, version=CHECKPOINT_VERSION):
    """Write ``header`` (JSON-able dict) and ``arrays`` (name -> ndarray)."""
    tensors = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tensors.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(le).tobytes())
    body = json.dumps({**header, "tensors": tensors}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, version, len(body)))
        fh.write(body)
        for chunk in chunks:
            fh.write(chunk)


def read_container(path, magic, version=CHECKPOINT_VERSION):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated file ({len(raw)} bytes, header needs {_PREFIX.size})")
    got_magic, got_version, hlen = _PREFIX.unpack_from(raw, 0)
    if got_magic != magic:
        raise FormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise VersionError(f"{path}: unsupported format version {got_version} (this build reads {version})")
    offset = _PREFIX.size
    if offset + hlen > len(raw):
        raise FormatError(f"{path}: truncated header at byte {len(raw)}, expected {offset + hlen}")
    try:
        header = json.loads(raw[offset:offset + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from None
    offset += hlen
    arrays = {}
    for t in header.pop("tensors"):
        dt = np.dtype(t["dtype"])
        count = int(np.prod(t["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload in tensor {t['name']!r} at byte {offset}")
        arrays[t["name"]] = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(t["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return header, arrays


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def topology(model):
    return {"input_shape": list(model.input_shape), "precision": model.precision,
            "layers": [{"kind": l.kind, "hyper": l.hyper()} for l in model.layers]}


def save_checkpoint(model, path, epoch=0, rng_state=None, meta=None):
    header = {"topology": topology(model), "epoch": int(epoch), "rng_state": rng_state,
              "meta": meta or {}}
    write_container(path, CHECKPOINT_MAGIC, header, model.state())


def _layer_from_hyper(kind, hyper):
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise FormatError(f"unknown layer kind {kind!r}")
    if cls is Dense:
        return Dense(hyper["fan_in"], hyper["fan_out"], bias=hyper["bias"], rng=0)
    if cls is Conv2d:
        return Conv2d(hyper["c_in"], hyper["c_out"], hyper["kernel_size"], hyper["stride"],
                      hyper["padding"], bias=hyper["bias"], rng=0)
    if cls is BatchNorm2d:
        return BatchNorm2d(hyper["channels"], hyper["eps"], hyper["momentum"])
    if cls in (MaxPool2d, AvgPool2d):
        return cls(hyper["kernel_size"], hyper["stride"])
    return cls()


def load_checkpoint(path, with_header=False):
    """Rebuild a model from ``path``; optionally also return the header dict."""
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    try:
        topo = header["topology"]
        layers = [_layer_from_hyper(d["kind"], d["hyper"]) for d in topo["layers"]]
        model = Sequential(layers, topo["input_shape"], precision=topo["precision"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed topology ({exc})") from None
    expected = model.state()
    if set(expected) != set(arrays):
        raise FormatError(f"{path}: tensor set does not match topology")
    for key, arr in arrays.items():
        layer_index, name = key.split(".", 1)
        target = getattr(model.layers[int(layer_index)], name)
        if target.shape != arr.shape or target.dtype != arr.dtype:
            raise FormatError(f"{path}: tensor {key} has shape {arr.shape}/{arr.dtype}, "
                              f"expected {target.shape}/{target.dtype}")
        setattr(model.layers[int(layer_index)], name, arr)
    if with_header:
        return model, header
    return model
