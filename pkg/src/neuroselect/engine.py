"""Dense numpy layers with reverse-mode gradients and per-neuron masking.

A model is a :class:`Sequential` chain. Every parameterised layer exposes a
number of *neurons* (output units, output channels, or BN channels); the
neuron is the atom that can be frozen or trained. Frozen neurons never have
their weight gradient computed, and a layer's input gradient is only
propagated while some earlier layer still holds a trainable neuron.

Weight gradients are always computed one output channel at a time so that a
masked backward pass is bitwise identical to an unmasked pass followed by
zeroing the frozen rows.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import MaskError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_EMPTY = np.zeros(0, dtype=np.int64)


def resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}, expected one of {sorted(DTYPES)}")
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


class BackwardCounters:
    """Instrumentation filled by :func:`backward` when passed in.

    FLOP figures are totals for the batch, derived from the array shapes the
    engine actually touched.
    """

    def __init__(self):
        self.wgrad = Counter()  # (layer, channel) -> flops
        self.igrad = Counter()  # layer -> flops
        self.batch = 0

    def per_sample_total(self):
        if self.batch == 0:
            return 0.0
        return (sum(self.wgrad.values()) + sum(self.igrad.values())) / self.batch


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    kind = "layer"
    has_params = False

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def params(self):
        return {}

    def buffers(self):
        return {}

    def hyper(self):
        return {}

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, ctx, dy, wrows, brows, need_igrad, grads, counters):
        raise NotImplementedError

    def igrad_flops(self, in_shape):
        """Per-sample FLOPs of propagating the gradient through this layer."""
        return 0

    def forward_flops(self, in_shape):
        return int(np.prod(self.output_shape(in_shape)))

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.hyper().items())
        return f"{type(self).__name__}({args})"


class ParamLayer(Layer):
    has_params = True
    n_out: int

    def cast(self, dtype):
        for name, arr in {**self.params(), **self.buffers()}.items():
            setattr(self, name, arr.astype(dtype))

    @property
    def n_neurons(self):
        return self.n_out

    @property
    def has_bias(self):
        return getattr(self, "bias", None) is not None

    def weight_cost(self):
        """Scalar weights owned by one neuron, bias excluded."""
        return self.weight.size // self.n_out

    def neuron_cost(self):
        return self.weight_cost() + (1 if self.has_bias else 0)

    def spatial(self, in_shape):
        """Number of output positions per channel per sample."""
        out = self.output_shape(in_shape)
        return int(np.prod(out[1:])) if len(out) > 1 else 1

    def wgrad_flops(self, in_shape, bias_only=False):
        """Per-sample weight-gradient FLOPs for one neuron."""
        sp = self.spatial(in_shape)
        bias_part = sp if self.has_bias else 0
        if bias_only:
            return bias_part
        return 2 * self.weight_cost() * sp + bias_part


class Dense(ParamLayer):
    kind = "dense"

    def __init__(self, fan_in, fan_out, bias=True, rng=None, dtype=np.float64):
        self.fan_in, self.n_out = int(fan_in), int(fan_out)
        rng = np.random.default_rng(rng)
        bound = np.sqrt(6.0 / self.fan_in)
        self.weight = rng.uniform(-bound, bound, size=(self.n_out, self.fan_in)).astype(dtype)
        self.bias = np.zeros(self.n_out, dtype=dtype) if bias else None

    @property
    def fan_out(self):
        return self.n_out

    def hyper(self):
        return {"fan_in": self.fan_in, "fan_out": self.n_out, "bias": self.has_bias}

    def params(self):
        p = {"weight": self.weight}
        if self.has_bias:
            p["bias"] = self.bias
        return p

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.fan_in,):
            raise ShapeError(f"dense expects input ({self.fan_in},), got {tuple(in_shape)}")
        return (self.n_out,)

    def forward_flops(self, in_shape):
        return 2 * self.fan_in * self.n_out

    def igrad_flops(self, in_shape):
        return 2 * self.fan_in * self.n_out

    def forward(self, x, training=False):
        y = x @ self.weight.T
        if self.has_bias:
            y = y + self.bias
        return y, x

    def backward(self, x, dy, wrows, brows, need_igrad, grads, counters):
        n = dy.shape[0]
        for c in wrows:
            col = np.ascontiguousarray(dy[:, c])
            grads["weight"][c] = col @ x
            if self.has_bias:
                grads["bias"][c] = col.sum()
            if counters is not None:
                counters.wgrad[(counters.layer, int(c))] += 2 * n * self.fan_in + (n if self.has_bias else 0)
        if self.has_bias:
            for c in brows:
                grads["bias"][c] = dy[:, c].sum()
                if counters is not None:
                    counters.wgrad[(counters.layer, int(c))] += n
        if not need_igrad:
            return None
        if counters is not None:
            counters.igrad[counters.layer] += 2 * n * self.fan_in * self.n_out
        return dy @ self.weight


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


class Conv2d(ParamLayer):
    kind = "conv2d"

    def __init__(self, c_in, c_out, kernel_size, stride=1, padding=0, bias=True, rng=None,
                 dtype=np.float64):
        self.c_in, self.n_out = int(c_in), int(c_out)
        self.k, self.stride, self.padding = int(kernel_size), int(stride), int(padding)
        rng = np.random.default_rng(rng)
        fan_in = self.c_in * self.k * self.k
        bound = np.sqrt(6.0 / fan_in)
        self.weight = rng.uniform(-bound, bound,
                                  size=(self.n_out, self.c_in, self.k, self.k)).astype(dtype)
        self.bias = np.zeros(self.n_out, dtype=dtype) if bias else None

    @property
    def c_out(self):
        return self.n_out

    def hyper(self):
        return {"c_in": self.c_in, "c_out": self.n_out, "kernel_size": self.k,
                "stride": self.stride, "padding": self.padding, "bias": self.has_bias}

    def params(self):
        p = {"weight": self.weight}
        if self.has_bias:
            p["bias"] = self.bias
        return p

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ShapeError(f"conv2d expects input ({self.c_in}, H, W), got {tuple(in_shape)}")
        ho = _conv_out(in_shape[1], self.k, self.stride, self.padding)
        wo = _conv_out(in_shape[2], self.k, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d kernel {self.k} does not fit input {tuple(in_shape)}")
        return (self.n_out, ho, wo)

    def forward_flops(self, in_shape):
        _, ho, wo = self.output_shape(in_shape)
        return 2 * self.k * self.k * self.c_in * self.n_out * ho * wo

    igrad_flops = forward_flops

    def _cols(self, x):
        p, s, k = self.padding, self.stride, self.k
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return np.ascontiguousarray(cols), (ho, wo)

    def forward(self, x, training=False):
        cols, (ho, wo) = self._cols(x)
        n = x.shape[0]
        y = cols @ self.weight.reshape(self.n_out, -1).T
        if self.has_bias:
            y = y + self.bias
        y = np.ascontiguousarray(y.reshape(n, ho, wo, self.n_out).transpose(0, 3, 1, 2))
        return y, (cols, x.shape)

    def backward(self, ctx, dy, wrows, brows, need_igrad, grads, counters):
        cols, x_shape = ctx
        n, _, ho, wo = dy.shape
        m = n * ho * wo
        for c in wrows:
            col = dy[:, c].reshape(-1)
            grads["weight"][c] = (col @ cols).reshape(self.c_in, self.k, self.k)
            if self.has_bias:
                grads["bias"][c] = col.sum()
            if counters is not None:
                counters.wgrad[(counters.layer, int(c))] += (
                    2 * m * cols.shape[1] + (m if self.has_bias else 0))
        if self.has_bias:
            for c in brows:
                grads["bias"][c] = dy[:, c].reshape(-1).sum()
                if counters is not None:
                    counters.wgrad[(counters.layer, int(c))] += m
        if not need_igrad:
            return None
        if counters is not None:
            counters.igrad[counters.layer] += 2 * m * cols.shape[1] * self.n_out
        k, s, p = self.k, self.stride, self.padding
        dyf = dy.transpose(0, 2, 3, 1).reshape(m, self.n_out)
        dcols = (dyf @ self.weight.reshape(self.n_out, -1)).reshape(n, ho, wo, self.c_in, k, k)
        _, ci, h, w = x_shape
        dxp = np.zeros((n, ci, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(dxp)


class BatchNorm2d(ParamLayer):
    """Per-channel normalisation; each channel's (gamma, beta) pair is one neuron."""

    kind = "batchnorm2d"

    def __init__(self, channels, eps=1e-5, momentum=0.1, rng=None, dtype=np.float64):
        self.n_out = int(channels)
        self.eps, self.momentum = float(eps), float(momentum)
        self.weight = np.ones(self.n_out, dtype=dtype)
        self.bias = np.zeros(self.n_out, dtype=dtype)
        self.running_mean = np.zeros(self.n_out, dtype=dtype)
        self.running_var = np.ones(self.n_out, dtype=dtype)

    def hyper(self):
        return {"channels": self.n_out, "eps": self.eps, "momentum": self.momentum}

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.n_out:
            raise ShapeError(f"batchnorm2d expects input ({self.n_out}, H, W), got {tuple(in_shape)}")
        return tuple(in_shape)

    def forward_flops(self, in_shape):
        return 2 * int(np.prod(in_shape))

    def igrad_flops(self, in_shape):
        return 2 * int(np.prod(in_shape))

    def forward(self, x, training=False):
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = xhat * self.weight[None, :, None, None] + self.bias[None, :, None, None]
        return y, (xhat, inv_std, training, mean, var)

    def backward(self, ctx, dy, wrows, brows, need_igrad, grads, counters):
        xhat, inv_std, training, _, _ = ctx
        n, _, h, w = dy.shape
        m = n * h * w
        for c in wrows:
            dyc = dy[:, c].reshape(-1)
            grads["weight"][c] = dyc @ xhat[:, c].reshape(-1)
            grads["bias"][c] = dyc.sum()
            if counters is not None:
                counters.wgrad[(counters.layer, int(c))] += 3 * m
        for c in brows:
            grads["bias"][c] = dy[:, c].reshape(-1).sum()
            if counters is not None:
                counters.wgrad[(counters.layer, int(c))] += m
        if not need_igrad:
            return None
        if counters is not None:
            counters.igrad[counters.layer] += 2 * m * self.n_out
        scale = (self.weight * inv_std)[None, :, None, None]
        if not training:
            return dy * scale
        sum_dy = dy.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dy_xhat = (dy * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return scale * (dy - sum_dy / m - xhat * sum_dy_xhat / m)

class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        pos = x > 0
        return np.where(pos, x, 0).astype(x.dtype, copy=False), pos

    def backward(self, pos, dy, wrows, brows, need_igrad, grads, counters):
        if not need_igrad:
            return None
        if counters is not None:
            counters.igrad[counters.layer] += dy.size
        return dy * pos

    def igrad_flops(self, in_shape):
        return int(np.prod(in_shape))


class _Pool2d(Layer):
    def __init__(self, kernel_size=2, stride=None):
        self.k = int(kernel_size)
        self.stride = int(stride) if stride is not None else self.k

    def hyper(self):
        return {"kernel_size": self.k, "stride": self.stride}

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.kind} expects input (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        ho, wo = _conv_out(h, self.k, self.stride, 0), _conv_out(w, self.k, self.stride, 0)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.kind} window {self.k} does not fit input {tuple(in_shape)}")
        return (c, ho, wo)

    def igrad_flops(self, in_shape):
        return int(np.prod(in_shape))

    def _windows(self, x):
        win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))[:, :, ::self.stride, ::self.stride]
        return win.reshape(*win.shape[:4], self.k * self.k)


class MaxPool2d(_Pool2d):
    kind = "maxpool2d"

    def forward(self, x, training=False):
        win = self._windows(x)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(y), (idx, x.shape)

    def backward(self, ctx, dy, wrows, brows, need_igrad, grads, counters):
        if not need_igrad:
            return None
        idx, x_shape = ctx
        if counters is not None:
            counters.igrad[counters.layer] += int(np.prod(x_shape))
        ho, wo = dy.shape[2:]
        s = self.stride
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for i in range(self.k):
            for j in range(self.k):
                hit = idx == i * self.k + j
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(hit, dy, 0)
        return dx


class AvgPool2d(_Pool2d):
    kind = "avgpool2d"

    def forward(self, x, training=False):
        return self._windows(x).mean(axis=-1), x.shape

    def backward(self, x_shape, dy, wrows, brows, need_igrad, grads, counters):
        if not need_igrad:
            return None
        if counters is not None:
            counters.igrad[counters.layer] += int(np.prod(x_shape))
        ho, wo = dy.shape[2:]
        s = self.stride
        share = dy / (self.k * self.k)
        dx = np.zeros(x_shape, dtype=dy.dtype)
        for i in range(self.k):
            for j in range(self.k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += share
        return dx


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward_flops(self, in_shape):
        return 0

    def forward(self, x, training=False):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, x_shape, dy, wrows, brows, need_igrad, grads, counters):
        if not need_igrad:
            return None
        if counters is not None:
            counters.igrad[counters.layer] += 0
        return dy.reshape(x_shape)


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, BatchNorm2d, ReLU, MaxPool2d, AvgPool2d, Flatten)}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class Sequential:
    """A chain of layers applied to per-sample inputs of ``input_shape``."""

    def __init__(self, layers, input_shape, precision="f64"):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = resolve_dtype(precision)
        for layer in self.layers:
            if layer.has_params:
                layer.cast(self.dtype)
        self.shapes()  # validates the chain

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        inner = ",\n  ".join(repr(l) for l in self.layers)
        return f"Sequential(input_shape={self.input_shape},\n  {inner})"

    @property
    def precision(self):
        return "f64" if self.dtype == np.float64 else "f32"

    def shapes(self):
        """Per-sample input shape of every layer, plus the final output shape."""
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        return shapes

    def param_layers(self):
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    def neuron_slices(self):
        """``[(layer_index, first_id, count), ...]`` in layer-major order."""
        out, start = [], 0
        for i in self.param_layers():
            n = self.layers[i].n_neurons
            out.append((i, start, n))
            start += n
        return out

    @property
    def n_neurons(self):
        return sum(n for _, _, n in self.neuron_slices())

    def n_params(self):
        return sum(p.size for layer in self.layers for p in layer.params().values())

    def state(self):
        """Flat ``{"<layer>.<name>": array}`` view of parameters and buffers."""
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in {**layer.params(), **layer.buffers()}.items():
                out[f"{i}.{name}"] = arr
        return out

    def copy(self):
        import copy
        return copy.deepcopy(self)


@dataclass
class Cache:
    contexts: list
    training: bool
    batch: int
    outputs: list = field(default_factory=list)


@dataclass
class GradientBundle:
    grads: dict  # layer index -> {param name: array}
    mask_applied: bool

    def flat(self):
        return {f"{i}.{k}": g for i, d in self.grads.items() for k, g in d.items()}


def forward(model, batch, capture=None, training=False):
    """Run the chain on ``batch``.

    ``capture``, when given, must have an ``append(layer_index, outputs)``
    method; it receives the output of every parameterised layer.
    """
    x = np.asarray(batch)
    if x.ndim != len(model.input_shape) + 1 or x.shape[1:] != model.input_shape:
        raise ShapeError(f"layer 0 ({model.layers[0].kind if model.layers else 'none'}): "
                         f"expected batch of shape (N, {', '.join(map(str, model.input_shape))}), "
                         f"got {x.shape}")
    x = x.astype(model.dtype, copy=False)
    contexts = []
    for i, layer in enumerate(model.layers):
        x, ctx = layer.forward(x, training=training)
        contexts.append(ctx)
        if capture is not None and layer.has_params:
            capture.append(i, x)
    return x, Cache(contexts, training, len(batch))


def layer_masks(model, mask):
    """Translate a neuron mask into per-layer channel index arrays.

    ``mask`` is ``None`` (train everything) or an object with ``neurons`` and
    optionally ``bias_only`` collections of global neuron ids.
    Returns ``{layer_index: (full_channels, bias_only_channels)}``.
    """
    slices = model.neuron_slices()
    if mask is None:
        return {i: (np.arange(n), _EMPTY) for i, _, n in slices}
    total = sum(n for _, _, n in slices)
    full = np.asarray(sorted(mask.neurons), dtype=np.int64)
    bias = np.asarray(sorted(getattr(mask, "bias_only", ())), dtype=np.int64)
    for ids in (full, bias):
        bad = ids[(ids < 0) | (ids >= total)]
        if bad.size:
            raise MaskError(f"mask references unknown neuron id {int(bad[0])} (model has {total})")
    if np.intersect1d(full, bias).size:
        raise MaskError("a neuron cannot be both fully trainable and bias-only")
    out = {}
    for i, start, n in slices:
        f = full[(full >= start) & (full < start + n)] - start
        b = bias[(bias >= start) & (bias < start + n)] - start
        if b.size and not model.layers[i].has_bias:
            raise MaskError(f"layer {i} has no bias but bias-only neurons were requested")
        out[i] = (f, b)
    return out


def zero_grads(model):
    return {i: {k: np.zeros_like(v) for k, v in model.layers[i].params().items()}
            for i in model.param_layers()}


def backward(model, cache, loss_grad, mask=None, counters=None):
    """Reverse pass; returns parameter gradients for trainable neurons only."""
    masks = layer_masks(model, mask)
    grads = zero_grads(model)
    active = [i for i, (f, b) in masks.items() if f.size or b.size]
    if counters is not None:
        counters.batch += cache.batch
    if not active:
        return GradientBundle(grads, mask_applied=mask is not None)
    first = min(active)
    dy = np.asarray(loss_grad, dtype=model.dtype)
    for i in range(len(model.layers) - 1, first - 1, -1):
        layer = model.layers[i]
        wrows, brows = masks.get(i, (_EMPTY, _EMPTY))
        if counters is not None:
            counters.layer = i
        dy = layer.backward(cache.contexts[i], dy, wrows, brows, i > first,
                            grads.get(i), counters)
    return GradientBundle(grads, mask_applied=mask is not None)


def sgd_step(model, bundle, lr):
    """Plain SGD: no momentum, no weight decay. Updates ``model`` in place."""
    if not np.isfinite(lr) or lr < 0:
        raise ValueError(f"learning rate must be a finite value >= 0, got {lr}")
    if lr == 0:
        return model
    for i, grads in bundle.grads.items():
        layer = model.layers[i]
        for name, g in grads.items():
            p = getattr(layer, name)
            p -= model.dtype.type(lr) * g
    return model


def commit_batch_stats(model, cache, mask=None):
    """Fold the batch statistics of a training-mode pass into BN running stats.

    Only channels whose neuron is trainable (fully or bias-only) are touched.
    """
    if not cache.training:
        return
    masks = layer_masks(model, mask)
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, BatchNorm2d):
            continue
        f, b = masks[i]
        rows = np.union1d(f, b)
        if rows.size == 0:
            continue
        _, _, _, mean, var = cache.contexts[i]
        m = cache.batch * int(np.prod(cache.contexts[i][0].shape[2:]))
        unbiased = var * (m / max(m - 1, 1))
        mom = layer.momentum
        layer.running_mean[rows] = (1 - mom) * layer.running_mean[rows] + mom * mean[rows]
        layer.running_var[rows] = (1 - mom) * layer.running_var[rows] + mom * unbiased[rows]


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n
