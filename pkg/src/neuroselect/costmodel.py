"""Per-sample FLOP accounting for forward and masked backward passes.

Conventions: one multiply-accumulate is 2 FLOPs; bias adds, activations,
pooling and other elementwise work cost 1 FLOP per element touched. The
backward pass charges

* weight-gradient work for each trainable neuron (bias-only neurons pay the
  bias part alone), and
* input-gradient work for a layer only when a trainable neuron sits in some
  earlier layer, exactly as :func:`neuroselect.engine.backward` does.
"""
from __future__ import annotations

from dataclasses import dataclass

from .engine import layer_masks
from .exceptions import ShapeError


@dataclass(frozen=True)
class LayerCost:
    layer_index: int
    kind: str
    forward_flops: int
    wgrad_flops_per_neuron: int
    bias_flops_per_neuron: int
    igrad_flops: int
    param_count: int  # per neuron; 0 for parameterless layers
    n_neurons: int


def _input_shapes(model, input_shape):
    input_shape = tuple(model.input_shape if input_shape is None else input_shape)
    if input_shape != model.input_shape:
        raise ShapeError(f"model expects per-sample input {model.input_shape}, got {input_shape}")
    return model.shapes()[:-1]


def layer_costs(model, input_shape=None):
    out = []
    for i, (layer, shape) in enumerate(zip(model.layers, _input_shapes(model, input_shape))):
        if layer.has_params:
            out.append(LayerCost(i, layer.kind, layer.forward_flops(shape), layer.wgrad_flops(shape),
                                 layer.wgrad_flops(shape, bias_only=True), layer.igrad_flops(shape),
                                 layer.neuron_cost(), layer.n_neurons))
        else:
            out.append(LayerCost(i, layer.kind, layer.forward_flops(shape), 0, 0,
                                 layer.igrad_flops(shape), 0, 0))
    return out


def forward_flops(model, input_shape=None):
    return sum(c.forward_flops for c in layer_costs(model, input_shape))


def backward_charges(model, mask, input_shape=None):
    """``({(layer, channel): flops}, {layer: flops})`` charged for ``mask``.

    ``mask=None`` means every neuron trains.
    """
    costs = layer_costs(model, input_shape)
    masks = layer_masks(model, mask)
    wgrad = {}
    for i, (full, bias) in masks.items():
        for c in full:
            wgrad[(i, int(c))] = costs[i].wgrad_flops_per_neuron
        for c in bias:
            wgrad[(i, int(c))] = costs[i].bias_flops_per_neuron
    active = [i for i, (f, b) in masks.items() if f.size or b.size]
    igrad = {}
    if active:
        first = min(active)
        igrad = {i: costs[i].igrad_flops for i in range(first + 1, len(model.layers))}
    return wgrad, igrad


def backward_flops(model, mask, input_shape=None):
    wgrad, igrad = backward_charges(model, mask, input_shape)
    return int(sum(wgrad.values()) + sum(igrad.values()))


def flops_saved_percent(model, masks, input_shape=None):
    """Backward FLOPs saved relative to full training, one value per mask."""
    baseline = backward_flops(model, None, input_shape)
    if baseline == 0:
        return [0.0 for _ in masks]
    return [100.0 * (1.0 - backward_flops(model, m, input_shape) / baseline) for m in masks]


def total_params(model):
    return int(sum(c.param_count * c.n_neurons for c in layer_costs(model)))

