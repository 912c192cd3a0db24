"""Per-neuron output similarity between epochs, and its momentum velocity.

For every neuron the outputs it produces on a fixed evaluation subset are
concatenated (all samples, all spatial positions) into one vector and unit
normalised. Consecutive epochs are compared with a single cosine per neuron;
its change drives a momentum-smoothed velocity that ranks neurons for
training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import forward
from .registry import read_container, write_container

SNAPSHOT_MAGIC = b"NSNP"


@dataclass
class OutputSnapshot:
    """Normalised concatenated outputs of every neuron at one epoch.

    ``blocks`` holds one ``(n_neurons_in_layer, length)`` float64 array per
    parameterised layer, in neuron-id order; ``raw_norm`` is indexed by
    global neuron id.
    """

    epoch: int
    layer_indices: list
    blocks: list
    raw_norm: np.ndarray

    @property
    def n_neurons(self):
        return len(self.raw_norm)

    def vector(self, neuron_id):
        start = 0
        for block in self.blocks:
            if neuron_id < start + block.shape[0]:
                return block[neuron_id - start]
            start += block.shape[0]
        raise IndexError(neuron_id)


class _Collector:
    def __init__(self):
        self.parts = {}

    def append(self, layer_index, y):
        n, c = y.shape[:2]
        per_neuron = np.asarray(y, dtype=np.float64).reshape(n, c, -1).transpose(1, 0, 2).reshape(c, -1)
        self.parts.setdefault(layer_index, []).append(per_neuron)


def capture(model, eval_x, epoch=0, batch_size=256):
    """Snapshot every neuron's outputs on ``eval_x`` (inference mode)."""
    eval_x = np.asarray(eval_x)
    if len(eval_x) == 0:
        raise ValueError("evaluation subset is empty")
    sink = _Collector()
    for start in range(0, len(eval_x), batch_size):
        forward(model, eval_x[start:start + batch_size], capture=sink, training=False)
    layer_indices = sorted(sink.parts)
    blocks, norms = [], []
    for i in layer_indices:
        raw = np.concatenate(sink.parts[i], axis=1)
        norm = np.sqrt((raw * raw).sum(axis=1))
        safe = np.where(norm > 0, norm, 1.0)
        blocks.append(np.where(norm[:, None] > 0, raw / safe[:, None], 0.0))
        norms.append(norm)
    return OutputSnapshot(epoch, layer_indices, blocks, np.concatenate(norms))


def similarity(snap_t, snap_prev):
    """Cosine between each neuron's outputs at two epochs.

    A neuron dead (zero output) at both epochs scores 1; dead at exactly one
    of them scores 0.
    """
    if snap_t.layer_indices != snap_prev.layer_indices or any(
            a.shape != b.shape for a, b in zip(snap_t.blocks, snap_prev.blocks)):
        raise ValueError("snapshots differ in neuron layout or vector length")
    phi = np.concatenate([(a * b).sum(axis=1) for a, b in zip(snap_t.blocks, snap_prev.blocks)])
    dead_t, dead_p = snap_t.raw_norm == 0, snap_prev.raw_norm == 0
    phi[dead_t ^ dead_p] = 0.0
    phi[dead_t & dead_p] = 1.0
    return phi


@dataclass
class VelocityState:
    """Previous similarity and velocity of every neuron.

    A fresh state represents the pre-trained model compared with itself:
    similarity 1 and velocity 0.
    """

    phi_prev: np.ndarray
    v_prev: np.ndarray
    mu_eq: float = 0.5
    epoch: int = 0

    @classmethod
    def initial(cls, n_neurons, mu_eq=0.5):
        if not 0 <= mu_eq < 1:
            raise ValueError(f"mu_eq must lie in [0, 1), got {mu_eq}")
        return cls(np.ones(n_neurons), np.zeros(n_neurons), float(mu_eq), 0)

    def advance(self, phi):
        """Consume this epoch's similarities; returns ``(delta_phi, v)``."""
        phi = np.asarray(phi, dtype=np.float64)
        delta = phi - self.phi_prev
        v = delta - self.mu_eq * self.v_prev
        self.phi_prev, self.v_prev = phi.copy(), v.copy()
        self.epoch += 1
        return delta, v


def advance(state, phi):
    delta, v = state.advance(phi)
    return delta, v, state


def reweight(v, costs):
    """Velocity per owned parameter."""
    return np.asarray(v, dtype=np.float64) / np.asarray(costs, dtype=np.float64)


def threshold_equilibrium(v, epsilon):
    """Ids of neurons whose |velocity| is strictly below ``epsilon``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    return frozenset(np.flatnonzero(np.abs(np.asarray(v)) < epsilon).tolist())


def save_snapshot(snap, path):
    arrays = {f"block.{i}": b for i, b in zip(snap.layer_indices, snap.blocks)}
    arrays["raw_norm"] = snap.raw_norm
    write_container(path, SNAPSHOT_MAGIC, {"epoch": snap.epoch, "layers": snap.layer_indices}, arrays)


def load_snapshot(path):
    header, arrays = read_container(path, SNAPSHOT_MAGIC)
    layers = header["layers"]
    return OutputSnapshot(header["epoch"], layers, [arrays[f"block.{i}"] for i in layers],
                          arrays["raw_norm"])


@dataclass
class VelocityTracker:
    """Incremental capture -> similarity -> velocity pipeline over epochs."""

    eval_x: np.ndarray
    mu_eq: float = 0.5
    costs: np.ndarray | None = None
    dump_dir: str | Path | None = None
    state: VelocityState | None = None
    snapshot: OutputSnapshot | None = None
    history: list = field(default_factory=list)

    def start(self, model):
        self.snapshot = capture(model, self.eval_x, epoch=0)
        self.state = VelocityState.initial(self.snapshot.n_neurons, self.mu_eq)
        self._dump(self.snapshot)
        return self

    def update(self, model):
        """Capture after an epoch of training and advance the velocities."""
        snap = capture(model, self.eval_x, epoch=self.state.epoch + 1)
        phi = similarity(snap, self.snapshot)
        delta, v = self.state.advance(phi)
        self.snapshot = snap
        self._dump(snap)
        row = {"epoch": self.state.epoch, "phi": phi, "delta_phi": delta, "v": v}
        if self.costs is not None:
            row["v_tilde"] = reweight(v, self.costs)
        self.history.append(row)
        return row

    @property
    def velocities(self):
        """Latest velocities, or ``None`` before the first trained epoch."""
        if self.state is None or self.state.epoch == 0:
            return None
        return self.state.v_prev

    def _dump(self, snap):
        if self.dump_dir is not None:
            Path(self.dump_dir).mkdir(parents=True, exist_ok=True)
            save_snapshot(snap, Path(self.dump_dir) / f"snapshot_{snap.epoch:04d}.nsnp")
