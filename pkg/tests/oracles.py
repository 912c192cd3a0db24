"""Reference computations that share no code path with the package."""
import math

import numpy as np

from neuroselect.engine import (AvgPool2d, BatchNorm2d, Conv2d, Dense, Flatten, MaxPool2d, ReLU,
                                Sequential, forward)


def xent(logits, labels):
    out = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        out += -(row[y] - m - math.log(sum(math.exp(v - m) for v in row)))
    return out / len(labels)


def loss_at(model, x, y):
    logits, _ = forward(model, x, training=True)
    return xent(logits, y)


def central_difference(model, x, y, layer, name, index, h=1e-5):
    """Returns (central, forward-one-sided, backward-one-sided) estimates."""
    p = getattr(model.layers[layer], name)
    orig = p[index]
    p[index] = orig + h
    up = loss_at(model, x, y)
    p[index] = orig - h
    down = loss_at(model, x, y)
    p[index] = orig
    mid = loss_at(model, x, y)
    return (up - down) / (2 * h), (up - mid) / h, (mid - down) / h


def naive_conv2d(x, w, b, stride=1, pad=0):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for s in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[s, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[s, o, i, j] = float((patch * w[o]).sum()) + (b[o] if b is not None else 0.0)
    return out


def brute_prefix(order, costs, budget, pinned=()):
    """Sort by the given order, cumulative-sum the costs, cut at the budget."""
    pinned = set(pinned)
    base = sum(int(costs[i]) for i in pinned)
    rest = [i for i in order if i not in pinned]
    csum = np.cumsum([int(costs[i]) for i in rest]) + base
    j = int(np.searchsorted(csum, budget, side="right"))
    return pinned | set(rest[:j]), (int(csum[j - 1]) if j else base)


def random_model(rng, precision="f64", max_param_layers=4, max_width=32):
    """A random chain with at most ``max_param_layers`` parameterised layers."""
    if rng.random() < 0.5:
        f = int(rng.integers(2, 13))
        n_dense = int(rng.integers(1, max_param_layers + 1))
        layers, fan_in = [], f
        for d in range(n_dense):
            width = int(rng.integers(2, max_width + 1)) if d < n_dense - 1 else int(rng.integers(2, 6))
            layers.append(Dense(fan_in, width, bias=bool(rng.random() < 0.85), rng=rng))
            if d < n_dense - 1:
                layers.append(ReLU())
            fan_in = width
        return Sequential(layers, (f,), precision=precision)
    c = int(rng.integers(1, 4))
    hw = int(rng.integers(4, 9))
    k = int(rng.integers(1, 4))
    pad = int(rng.integers(0, 2))
    stride = int(rng.integers(1, 3))
    co = int(rng.integers(1, 9))
    layers = [Conv2d(c, co, k, stride=stride, padding=pad, bias=bool(rng.random() < 0.85), rng=rng)]
    budget = max_param_layers - 2
    if budget > 0 and rng.random() < 0.5:
        bn = BatchNorm2d(co)
        bn.weight = rng.uniform(0.5, 1.5, co)
        bn.bias = rng.normal(0, 0.2, co)
        layers.append(bn)
        budget -= 1
    layers.append(ReLU())
    probe = Sequential(layers, (c, hw, hw), precision=precision).shapes()[-1]
    if probe[1] >= 2 and rng.random() < 0.6:
        layers.append(MaxPool2d(2) if rng.random() < 0.5 else AvgPool2d(2))
    layers.append(Flatten())
    flat = Sequential(layers, (c, hw, hw)).shapes()[-1][0]
    if budget > 0 and rng.random() < 0.5:
        hidden = int(rng.integers(2, max_width + 1))
        layers += [Dense(flat, hidden, rng=rng), ReLU()]
        flat = hidden
    layers.append(Dense(flat, int(rng.integers(2, 6)), rng=rng))
    return Sequential(layers, (c, hw, hw), precision=precision)


def random_mask(rng, model, p=0.5, bias_p=0.2):
    """Random full/bias-only neuron sets as a simple namespace."""
    from types import SimpleNamespace

    full, bias = set(), set()
    for i, start, n in model.neuron_slices():
        for c in range(n):
            r = rng.random()
            if r < p:
                full.add(start + c)
            elif r < p + bias_p and model.layers[i].has_bias:
                bias.add(start + c)
    return SimpleNamespace(neurons=frozenset(full), bias_only=frozenset(bias))


def random_batch(rng, model, n=None):
    n = int(rng.integers(2, 6)) if n is None else n
    x = rng.normal(size=(n,) + model.input_shape)
    classes = model.shapes()[-1][0]
    y = rng.integers(0, classes, size=n)
    return x, y
