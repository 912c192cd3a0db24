"""Budgeted fine-tuning loop, pre-training, run configs and metric files."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import costmodel, data, registry, selection
from .engine import backward, commit_batch_stats, forward, sgd_step, softmax_cross_entropy
from .exceptions import BudgetError, ConfigError, DataError
from .velocity import VelocityTracker

CSV_COLUMNS = ("epoch", "lr", "train_loss", "test_top1", "policy", "mask_neurons", "mask_cost",
               "budget", "flops_saved_pct", "seconds")


def cosine_lr(epoch, total, warmup, lr_max):
    """Linear warm-up over ``warmup`` epochs, then cosine decay to 0 at ``total``."""
    if not 0 <= warmup < total:
        raise ValueError(f"need 0 <= warmup < total, got warmup={warmup}, total={total}")
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    if epoch < warmup:
        return lr_max * (epoch + 1) / warmup
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * (epoch - warmup) / (total - warmup)))


def evaluate(model, dataset, batch_size=512):
    """Top-1 accuracy in inference mode."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    hits = 0
    for x, y in data.batches(dataset, batch_size):
        logits, _ = forward(model, x)
        hits += int((logits.argmax(axis=1) == y).sum())
    return hits / len(dataset)


def dataset_loss(model, dataset, batch_size=512):
    total = 0.0
    for x, y in data.batches(dataset, batch_size):
        logits, _ = forward(model, x)
        total += softmax_cross_entropy(logits, y)[0] * len(y)
    return total / len(dataset)


def resolve_budget(budget, total_params):
    """Absolute parameter budget: ints are counts, floats in (0, 1] fractions."""
    if budget is None:
        return None
    if isinstance(budget, float):
        if not 0 < budget <= 1:
            raise ConfigError(f"fractional budget must lie in (0, 1], got {budget}")
        return int(math.floor(budget * total_params))
    if budget < 1:
        raise ConfigError(f"absolute budget must be >= 1, got {budget}")
    return int(budget)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_top1: float
    policy: str
    mask_neurons: int
    mask_cost: int
    budget: int | None
    flops_saved_pct: float
    seconds: float


class FineTuner:
    """Three-phase loop: pick a mask, train one epoch, re-measure velocities.

    The model is updated in place. ``masks`` and ``records`` grow by one entry
    per call to :meth:`step`.
    """

    def __init__(self, model, train, val=None, test=None, policy="velocity", budget=None,
                 epochs=30, warmup=5, lr_max=0.125, mu_eq=0.5, epsilon=0.0, eval_subset=256,
                 batch_size=64, data_seed=0, selection_seed=0, pinned="classifier", fill=False,
                 first_epoch="random", static_scheme=None, dump_dir=None):
        if policy not in selection.POLICIES:
            raise ConfigError(f"unknown policy {policy!r}, expected one of {selection.POLICIES}")
        if not 0 <= warmup < epochs:
            raise ConfigError(f"need 0 <= warmup < epochs, got {warmup}, {epochs}")
        self.model, self.train, self.val, self.test = model, train, val, test
        self.policy, self.epochs, self.warmup, self.lr_max = policy, epochs, warmup, lr_max
        self.epsilon, self.batch_size, self.fill = epsilon, batch_size, fill
        self.data_seed, self.selection_seed, self.first_epoch = data_seed, selection_seed, first_epoch
        self.costs = registry.neuron_costs(model)
        self.total_params = int(self.costs.sum())
        self.budget = resolve_budget(budget, self.total_params)
        if pinned == "classifier":
            self.pinned = registry.classifier_neurons(model)
        elif pinned in ("none", None):
            self.pinned = frozenset()
        else:
            raise ConfigError(f"pinned must be 'classifier' or 'none', got {pinned!r}")
        self.static_mask = None
        if static_scheme is not None:
            scheme = (selection.load_scheme(static_scheme)
                      if isinstance(static_scheme, (str, os.PathLike)) else static_scheme)
            self.static_mask = selection.materialize_static(scheme, model, self.costs)
        self._check_feasible()
        self.tracker = None
        if policy in ("velocity", "reweighted", "threshold"):
            if val is None or len(val) == 0:
                raise DataError("velocity-based policies need a non-empty validation split")
            rng = np.random.default_rng(np.random.SeedSequence([int(data_seed), 1]))
            k = min(int(eval_subset), len(val))
            subset = rng.choice(len(val), size=k, replace=False)
            self.tracker = VelocityTracker(val.images[subset], mu_eq=mu_eq, costs=self.costs,
                                           dump_dir=dump_dir).start(model)
        self.input_shape = tuple(model.input_shape)
        self.epoch = 0
        self.masks, self.records = [], []

    def _check_feasible(self):
        if self.policy in selection.BUDGETED:
            if self.budget is None:
                raise ConfigError(f"policy {self.policy!r} needs a budget")
            pinned_cost = selection.mask_cost(self.pinned, self.costs)
            if self.budget < pinned_cost:
                raise BudgetError(f"budget {self.budget} is below the pinned-neuron cost {pinned_cost}")
            if (self.policy != "random" and self.first_epoch == "static" and self.static_mask is not None
                    and self.static_mask.total_cost > self.budget):
                raise BudgetError(f"static first-epoch mask costs {self.static_mask.total_cost}, "
                                  f"over the budget {self.budget}")
        if self.policy == "static" and self.static_mask is None:
            raise ConfigError("static policy requires a static scheme")
        if self.first_epoch == "static" and self.static_mask is None and self.policy in (
                "velocity", "reweighted"):
            raise ConfigError("first_epoch='static' requires a static scheme")

    def next_mask(self):
        velocities = None if self.tracker is None else self.tracker.velocities
        return selection.next_mask(self.policy, self.epoch + 1, self.costs, self.budget, self.pinned,
                                   velocities, seed=self.selection_seed, fallback=self.first_epoch,
                                   static_mask=self.static_mask, epsilon=self.epsilon, fill=self.fill)

    def train_epoch(self, mask, lr):
        """One pass over the training split; returns the mean batch loss."""
        seed = np.random.SeedSequence([int(self.data_seed), 2, self.epoch + 1])
        total, n = 0.0, 0
        for x, y in data.batches(self.train, self.batch_size, seed=seed):
            logits, cache = forward(self.model, x, training=True)
            loss, grad = softmax_cross_entropy(logits, y)
            bundle = backward(self.model, cache, grad, mask)
            sgd_step(self.model, bundle, lr)
            commit_batch_stats(self.model, cache, mask)
            total += loss * len(y)
            n += len(y)
        return total / n

    def step(self, lr=None):
        """Run one epoch; ``lr`` overrides the schedule when given."""
        t0 = time.perf_counter()
        mask = self.next_mask()
        if lr is None:
            lr = cosine_lr(self.epoch, self.epochs, self.warmup, self.lr_max)
        train_loss = self.train_epoch(mask, lr)
        self.epoch += 1
        if self.tracker is not None:
            self.tracker.update(self.model)
        test_top1 = evaluate(self.model, self.test) if self.test is not None else float("nan")
        saved = costmodel.flops_saved_percent(self.model, [mask], self.input_shape)[0]
        record = EpochRecord(self.epoch, float(lr), float(train_loss), float(test_top1), mask.policy,
                             len(mask), int(mask.total_cost), self.budget, float(saved),
                             time.perf_counter() - t0)
        self.masks.append(mask)
        self.records.append(record)
        return record

    def run(self):
        while self.epoch < self.epochs:
            self.step()
        return self.records


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

DATA_KEYS = {"source", "classes", "images", "labels", "test_images", "test_labels", "n_classes",
             "dims", "samples_per_class", "separation", "seed"}
SEED_KEYS = ("weights", "data", "selection")


def _default_pretrain():
    return {"source": "digits", "classes": [0, 1, 2, 3, 4]}


def _default_finetune():
    return {"source": "digits", "classes": [5, 6, 7, 8, 9]}


@dataclass
class RunConfig:
    arch: str = "small_cnn"
    channels: list = field(default_factory=lambda: [8, 16])
    hidden: int = 32
    model_checkpoint: str | None = None
    reinit_head: bool = True
    pretrain_data: dict = field(default_factory=_default_pretrain)
    finetune_data: dict = field(default_factory=_default_finetune)
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    policy: str = "velocity"
    budget: float | int | None = 0.1
    epochs: int = 30
    warmup: int = 5
    pretrain_epochs: int = 20
    pretrain_warmup: int = 2
    lr_max: float = 0.125
    mu_eq: float = 0.5
    epsilon: float = 0.0
    eval_subset: int = 256
    batch_size: int = 64
    seeds: dict = field(default_factory=lambda: {k: 0 for k in SEED_KEYS})
    precision: str = "f32"
    pinned: str = "classifier"
    fill: bool = False
    first_epoch: str = "random"
    static_scheme: str | None = None
    record_time: bool = False
    dump_snapshots: bool = False

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self):
        return asdict(self)

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.arch in registry.ARCHITECTURES, f"arch must be one of {registry.ARCHITECTURES}")
        need(self.policy in selection.POLICIES, f"policy must be one of {selection.POLICIES}, got {self.policy!r}")
        need(isinstance(self.epochs, int) and self.epochs >= 1, "epochs must be a positive integer")
        need(isinstance(self.warmup, int) and 0 <= self.warmup < self.epochs, "need 0 <= warmup < epochs")
        need(isinstance(self.pretrain_epochs, int) and 0 <= self.pretrain_warmup < max(self.pretrain_epochs, 1),
             "need 0 <= pretrain_warmup < pretrain_epochs")
        need(isinstance(self.lr_max, (int, float)) and self.lr_max > 0, "lr_max must be > 0")
        need(0 <= self.mu_eq < 1, "mu_eq must lie in [0, 1)")
        need(self.epsilon >= 0, "epsilon must be >= 0")
        need(isinstance(self.eval_subset, int) and self.eval_subset >= 1, "eval_subset must be >= 1")
        need(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size must be >= 1")
        need(0 < self.val_fraction < 1 and 0 < self.test_fraction < 1, "split fractions must lie in (0, 1)")
        need(self.precision in ("f32", "f64"), "precision must be 'f32' or 'f64'")
        need(self.pinned in ("classifier", "none"), "pinned must be 'classifier' or 'none'")
        need(self.first_epoch in ("random", "static"), "first_epoch must be 'random' or 'static'")
        need(isinstance(self.seeds, dict) and set(self.seeds) == set(SEED_KEYS)
             and all(isinstance(v, int) for v in self.seeds.values()),
             f"seeds must map exactly {SEED_KEYS} to integers")
        need(self.budget is None or (isinstance(self.budget, (int, float)) and not isinstance(self.budget, bool)),
             "budget must be a number")
        if isinstance(self.budget, float):
            need(0 < self.budget <= 1, "a fractional budget must lie in (0, 1]")
        elif isinstance(self.budget, int):
            need(self.budget >= 1, "an absolute budget must be >= 1")
        need(self.budget is not None or self.policy not in selection.BUDGETED,
             f"policy {self.policy!r} needs a budget")
        for name in ("pretrain_data", "finetune_data"):
            spec = getattr(self, name)
            need(isinstance(spec, dict), f"{name} must be an object")
            extra = sorted(set(spec) - DATA_KEYS)
            need(not extra, f"{name}: unknown key(s) {', '.join(extra)}")
            need(spec.get("source") in ("digits", "idx", "blobs"),
                 f"{name}.source must be 'digits', 'idx' or 'blobs'")

    def tag(self):
        """Filename fragment naming policy, budget and seeds."""
        s = self.seeds
        seed = (f"s{s['selection']}" if len(set(s.values())) == 1
                else f"s{s['weights']}-{s['data']}-{s['selection']}")
        return f"{self.policy}_b{self.budget}_{seed}"


def _set_dotted(d, key, value):
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(d.get(p), dict):
            d[p] = {}
        d = d[p]
    d[parts[-1]] = value


def apply_overrides(d, overrides):
    """Apply ``key=value`` strings (dotted keys, JSON values) to a config dict."""
    d = json.loads(json.dumps(d))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_dotted(d, key.strip(), value)
    return d


def load_config(path, overrides=()):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    d.setdefault("seeds", {})
    if isinstance(d["seeds"], dict):
        d["seeds"] = {**{k: 0 for k in SEED_KEYS}, **d["seeds"]}
    return RunConfig.from_dict(apply_overrides(d, overrides))


# ---------------------------------------------------------------------------
# data + model assembly
# ---------------------------------------------------------------------------


def _resolve_path(p):
    path = Path(p)
    if path.is_absolute() or path.exists():
        return path
    root = os.environ.get("NEUROSELECT_DATA_DIR")
    if root and (Path(root) / path).exists():
        return Path(root) / path
    raise DataError(f"data file {p} not found (NEUROSELECT_DATA_DIR={root!r})")


def load_data(spec, test_fraction=0.2, seed=0):
    """``(train_pool, test)`` for a data spec from a run config."""
    source = spec["source"]
    test = None
    if source == "digits":
        ds = data.load_digits_dataset()
    elif source == "idx":
        if "images" not in spec or "labels" not in spec:
            raise ConfigError("idx data needs 'images' and 'labels' paths")
        ds = data.load_idx(_resolve_path(spec["images"]), _resolve_path(spec["labels"]),
                           spec.get("n_classes"))
        if "test_images" in spec:
            test = data.load_idx(_resolve_path(spec["test_images"]), _resolve_path(spec["test_labels"]),
                                 ds.n_classes)
    else:
        ds = data.synth_blobs(spec.get("n_classes", 2), spec.get("dims", 16),
                              spec.get("samples_per_class", 100), spec.get("separation", 10.0),
                              spec.get("seed", 0))
    if "classes" in spec:
        ds = data.class_subset(ds, spec["classes"])
        if test is not None:
            test = data.class_subset(test, spec["classes"])
    if test is None:
        test, ds = data.split(ds, [test_fraction, 1 - test_fraction], seed=seed)
    return ds, test


def _fresh_model(cfg, input_shape, n_classes):
    return registry.build_model(cfg.arch, input_shape, n_classes, seed=cfg.seeds["weights"],
                                precision=cfg.precision, channels=tuple(cfg.channels),
                                hidden=cfg.hidden)


def _estimator(cfg, model, policy=None, epochs=None, warmup=None, dump_dir=None):
    from .estimator import BudgetedFineTuner

    return BudgetedFineTuner(
        model=model, policy=policy or cfg.policy, budget=cfg.budget if policy is None else None,
        epochs=epochs or cfg.epochs, warmup=cfg.warmup if warmup is None else warmup,
        lr_max=cfg.lr_max, mu_eq=cfg.mu_eq, epsilon=cfg.epsilon, eval_subset=cfg.eval_subset,
        val_fraction=cfg.val_fraction, batch_size=cfg.batch_size, pinned=cfg.pinned, fill=cfg.fill,
        first_epoch=cfg.first_epoch, static_scheme=cfg.static_scheme, reinit_head=False,
        random_state=cfg.seeds["data"], weights_seed=cfg.seeds["weights"],
        selection_seed=cfg.seeds["selection"], dump_dir=dump_dir)


def run_pretrain(cfg, out_dir=None):
    """Full-update training on the upstream task; returns ``(model, test_top1)``."""
    train, test = load_data(cfg.pretrain_data, cfg.test_fraction, seed=cfg.seeds["data"])
    model = _fresh_model(cfg, train.sample_shape, train.n_classes)
    est = _estimator(cfg, model, policy="full", epochs=cfg.pretrain_epochs, warmup=cfg.pretrain_warmup)
    est.fit(train.images, train.labels)
    acc = evaluate(est.model_, test)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        registry.save_checkpoint(est.model_, out / f"pretrained_s{cfg.seeds['weights']}.nsel",
                                 epoch=cfg.pretrain_epochs,
                                 meta={"test_top1": acc, "data": cfg.pretrain_data})
        (out / "pretrain_summary.json").write_text(json.dumps(
            {"config": cfg.to_dict(), "test_top1": acc, "params": est.model_.n_params()},
            indent=2, sort_keys=True))
    return est.model_, acc


def prepare_finetune(cfg, pretrained=None):
    """Load the fine-tuning data and the starting model for ``cfg``."""
    train, test = load_data(cfg.finetune_data, cfg.test_fraction, seed=cfg.seeds["data"])
    if pretrained is not None:
        model = pretrained.copy()
    elif cfg.model_checkpoint is not None:
        model = registry.load_checkpoint(_resolve_path(cfg.model_checkpoint))
    else:
        model, _ = run_pretrain(cfg)
    if tuple(model.input_shape) != tuple(train.sample_shape):
        raise ConfigError(f"checkpoint expects inputs {model.input_shape}, data has {train.sample_shape}")
    if model.precision != cfg.precision:
        model = registry.Sequential(model.layers, model.input_shape, precision=cfg.precision)
    out_units = model.layers[model.param_layers()[-1]].n_neurons
    if cfg.reinit_head or out_units != train.n_classes:
        registry.reinit_classifier(model, seed=cfg.seeds["weights"] + 1, n_classes=train.n_classes)
    return model, train, test


def run_finetune(cfg, out_dir=None, pretrained=None):
    """Fine-tune under ``cfg``; returns the fitted estimator."""
    model, train, test = prepare_finetune(cfg, pretrained)
    dump = Path(out_dir) / f"snapshots_{cfg.tag()}" if (out_dir and cfg.dump_snapshots) else None
    est = _estimator(cfg, model, dump_dir=dump)
    est.fit(train.images, train.labels, X_test=test.images, y_test=test.labels)
    if out_dir is not None:
        write_artifacts(cfg, est, out_dir)
    return est


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def metrics_csv(records, record_time=False):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        row = asdict(r)
        row["seconds"] = round(row["seconds"], 6) if record_time else None
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0].keys()) != CSV_COLUMNS:
        raise DataError(f"{path}: not a metrics file")
    return rows


def write_artifacts(cfg, est, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = cfg.tag()
    (out / f"metrics_{tag}.csv").write_text(metrics_csv(est.history_, cfg.record_time))
    (out / f"masks_{tag}.jsonl").write_text("".join(m.to_json() + "\n" for m in est.masks_))
    registry.save_checkpoint(est.model_, out / f"final_{tag}.nsel", epoch=len(est.history_))
    final = est.history_[-1]
    summary = {"config": cfg.to_dict(), "tag": tag, "final_test_top1": final.test_top1,
               "budget_params": est.budget_, "total_params": est.total_params_,
               "epochs": len(est.history_),
               "mean_flops_saved_pct": float(np.mean([r.flops_saved_pct for r in est.history_])),
               "seconds": float(sum(r.seconds for r in est.history_))}
    (out / f"summary_{tag}.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
