"""Choosing which neurons train in the next epoch under a parameter budget."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .exceptions import BudgetError, ConfigError, MaskError
from .velocity import reweight, threshold_equilibrium

POLICIES = ("velocity", "reweighted", "random", "static", "full", "threshold")
BUDGETED = frozenset({"velocity", "reweighted", "random"})
ALLOWED_RATIOS = (Fraction(0), Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1))


@dataclass(frozen=True)
class UpdateMask:
    epoch: int
    neurons: frozenset
    total_cost: int
    policy: str
    bias_only: frozenset = frozenset()

    def __len__(self):
        return len(self.neurons) + len(self.bias_only)

    def to_json(self):
        return json.dumps({"epoch": self.epoch, "policy": self.policy,
                           "total_cost": int(self.total_cost),
                           "neurons": sorted(int(i) for i in self.neurons),
                           "bias_only": sorted(int(i) for i in self.bias_only)})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["epoch"], frozenset(d["neurons"]), d["total_cost"], d["policy"],
                   frozenset(d.get("bias_only", ())))


def mask_cost(neurons, costs, bias_only=()):
    costs = np.asarray(costs, dtype=np.int64)
    return int(costs[sorted(neurons)].sum()) + len(bias_only)


def full_mask(costs, epoch=0):
    ids = frozenset(range(len(costs)))
    return UpdateMask(epoch, ids, int(np.sum(costs, dtype=np.int64)), "full")


def rank(values, mode="raw", costs=None):
    """Neuron ids by decreasing |velocity| (or |velocity per parameter|).

    Ties go to the lower id.
    """
    values = np.asarray(values, dtype=np.float64)
    if mode == "reweighted":
        if costs is None:
            raise ValueError("reweighted ranking needs neuron costs")
        values = reweight(values, costs)
    elif mode != "raw":
        raise ValueError(f"unknown ranking mode {mode!r}")
    key = np.abs(values)
    return np.lexsort((np.arange(len(key)), -key))


def _check_pinned(costs, budget, pinned):
    pinned_cost = mask_cost(pinned, costs)
    if budget < pinned_cost:
        raise BudgetError(f"budget {budget} is below the pinned-neuron cost {pinned_cost}")
    return pinned_cost


def select_budget_prefix(order, costs, budget, pinned=frozenset(), fill=False, epoch=0,
                         policy="velocity"):
    """Pinned neurons first, then the longest prefix of ``order`` that fits.

    With ``fill`` the walk continues past an overflowing neuron and takes any
    later one that still fits.
    """
    costs = np.asarray(costs, dtype=np.int64)
    pinned = frozenset(int(i) for i in pinned)
    total = _check_pinned(costs, budget, pinned)
    chosen = set(pinned)
    for i in order:
        i = int(i)
        if i in pinned:
            continue
        c = int(costs[i])
        if total + c <= budget:
            chosen.add(i)
            total += c
        elif not fill:
            break
    return UpdateMask(epoch, frozenset(chosen), total, policy)


def select_random(costs, budget, pinned=frozenset(), rng_seed=None, fill=False, epoch=0):
    """Uniformly shuffled non-pinned neurons, cut by the same prefix rule."""
    pinned = frozenset(int(i) for i in pinned)
    _check_pinned(costs, budget, pinned)
    rng = np.random.default_rng(rng_seed)
    candidates = np.asarray([i for i in range(len(costs)) if i not in pinned], dtype=np.int64)
    order = rng.permutation(candidates)
    return select_budget_prefix(order, costs, budget, pinned, fill=fill, epoch=epoch,
                                policy="random")


def epoch_seed(seed, epoch):
    """Independent seed stream for the selection made at ``epoch``."""
    return np.random.SeedSequence([int(seed), int(epoch)])


# ---------------------------------------------------------------------------
# static schemes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StaticScheme:
    """Fixed per-layer channel ratios plus a bias depth.

    ``ratios`` maps chain layer index to a channel fraction; layers not listed
    train no full channels. From ``bias_depth`` onward every bias is trained.
    """

    ratios: dict = field(default_factory=dict)
    bias_depth: int | None = None
    classifier: bool = True

    def __post_init__(self):
        for layer, r in self.ratios.items():
            if Fraction(r).limit_denominator(64) not in ALLOWED_RATIOS:
                raise ConfigError(f"ratio {r} for layer {layer} is not one of 0, 1/8, 1/4, 1/2, 1")


def parse_scheme(text, source="<scheme>"):
    """Parse the ``key = value`` scheme format.

    Keys are ``layer.<index>`` (a ratio such as ``1/4`` or ``0.25``),
    ``bias_depth`` (layer index or ``none``) and ``classifier``
    (``true``/``false``). ``#`` starts a comment.
    """
    ratios, bias_depth, classifier = {}, None, True
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key.startswith("layer."):
                ratios[int(key[6:])] = Fraction(value)
            elif key == "bias_depth":
                bias_depth = None if value.lower() == "none" else int(value)
            elif key == "classifier":
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                classifier = value.lower() == "true"
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {value!r} for {key}") from None
    return StaticScheme(ratios, bias_depth, classifier)


def load_scheme(path):
    path = Path(path)
    return parse_scheme(path.read_text(), source=str(path))


def format_scheme(scheme):
    lines = [f"layer.{k} = {Fraction(v)}" for k, v in sorted(scheme.ratios.items())]
    lines.append(f"bias_depth = {'none' if scheme.bias_depth is None else scheme.bias_depth}")
    lines.append(f"classifier = {'true' if scheme.classifier else 'false'}")
    return "\n".join(lines) + "\n"


def materialize_static(scheme, model, costs=None, epoch=0):
    from .registry import neuron_costs

    costs = neuron_costs(model) if costs is None else np.asarray(costs)
    slices = {i: (start, n) for i, start, n in model.neuron_slices()}
    for layer in scheme.ratios:
        if layer not in slices:
            raise MaskError(f"scheme names layer {layer}, which has no neurons in this model")
    if scheme.bias_depth is not None and not 0 <= scheme.bias_depth < len(model.layers):
        raise MaskError(f"bias depth {scheme.bias_depth} outside 0..{len(model.layers) - 1}")
    classifier_layer = model.param_layers()[-1]
    full, bias_only = set(), set()
    for layer, (start, n) in slices.items():
        ratio = Fraction(1) if scheme.classifier and layer == classifier_layer else Fraction(
            scheme.ratios.get(layer, 0))
        k = math.ceil(ratio * n)
        full.update(range(start, start + k))
        if scheme.bias_depth is not None and layer >= scheme.bias_depth and model.layers[layer].has_bias:
            bias_only.update(range(start + k, start + n))
    return UpdateMask(epoch, frozenset(full), mask_cost(full, costs, bias_only), "static",
                      frozenset(bias_only))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def next_mask(policy, epoch, costs, budget=None, pinned=frozenset(), velocities=None, seed=0,
              fallback="random", static_mask=None, epsilon=None, fill=False):
    """Mask for ``epoch`` (1-based) under ``policy``.

    Velocity policies fall back to ``fallback`` ("random" or "static") until
    velocities exist; the threshold policy trains everything until then.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown policy {policy!r}")
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    costs = np.asarray(costs, dtype=np.int64)
    if policy == "full":
        return full_mask(costs, epoch)
    if policy == "static" or (policy in ("velocity", "reweighted") and velocities is None
                              and fallback == "static"):
        if static_mask is None:
            raise ConfigError("static selection requested but no scheme was provided")
        if policy != "static" and budget is not None and static_mask.total_cost > budget:
            raise BudgetError(f"static first-epoch mask costs {static_mask.total_cost}, "
                              f"over the budget {budget}")
        return UpdateMask(epoch, static_mask.neurons, static_mask.total_cost, "static",
                          static_mask.bias_only)
    if policy == "threshold":
        if velocities is None:
            return UpdateMask(epoch, *_all_but(costs, ()), "threshold")
        frozen = threshold_equilibrium(velocities, 0.0 if epsilon is None else epsilon)
        return UpdateMask(epoch, *_all_but(costs, frozen - frozenset(pinned)), "threshold")
    if budget is None:
        raise ConfigError(f"policy {policy!r} needs a budget")
    if policy == "random" or velocities is None:
        if policy != "random" and fallback != "random":
            raise ConfigError(f"no velocities yet at epoch {epoch} and no usable fallback")
        return select_random(costs, budget, pinned, epoch_seed(seed, epoch), fill=fill, epoch=epoch)
    mode = "reweighted" if policy == "reweighted" else "raw"
    order = rank(velocities, mode, costs)
    return select_budget_prefix(order, costs, budget, pinned, fill=fill, epoch=epoch,
                                policy=policy)


def _all_but(costs, frozen):
    ids = frozenset(range(len(costs))) - frozenset(frozen)
    return ids, mask_cost(ids, costs)
