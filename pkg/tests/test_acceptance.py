"""Acceptance suite: one test and one printed PASS/FAIL line per criterion."""
import math
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from neuroselect import data, registry
from neuroselect.costmodel import backward_charges, backward_flops, flops_saved_percent
from neuroselect.engine import BackwardCounters, backward, forward, softmax_cross_entropy
from neuroselect.selection import full_mask, next_mask, rank, select_budget_prefix
from neuroselect.trainer import FineTuner, RunConfig, cosine_lr, run_finetune, run_pretrain
from neuroselect.velocity import load_snapshot

from oracles import brute_prefix, central_difference, random_batch, random_mask, random_model

TREND_BUDGETS = (0.088, 0.212, 0.308)
TREND_SEEDS = (0, 1, 2)


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number} ({name}): {'PASS' if ok else 'FAIL'} | {detail}")
    return emit


def digits_transfer(seed=0):
    ds = data.class_subset(data.load_digits_dataset(), [5, 6, 7, 8, 9])
    test, val, train = data.split(ds, [0.2, 0.1, 0.7], seed=seed)
    return train, val, test


def test_c1_gradient_oracle(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, checked, kinks, nonzero_frozen = 0.0, 0, 0, 0
    for _ in range(200):
        model = random_model(rng)
        x, y = random_batch(rng, model)
        mask = random_mask(rng, model)
        logits, cache = forward(model, x, training=True)
        bundle = backward(model, cache, softmax_cross_entropy(logits, y)[1], mask)
        for i, start, n in model.neuron_slices():
            for name, g in bundle.grads[i].items():
                for c in range(n):
                    nid = start + c
                    if not (nid in mask.neurons or (nid in mask.bias_only and name == "bias")):
                        nonzero_frozen += int(np.count_nonzero(g[c]))
                        continue
                    idx = (c,) + tuple(int(rng.integers(0, s)) for s in g.shape[1:])
                    num, fwd, bwd = central_difference(model, x, y, i, name, idx)
                    if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd), 1e-3):
                        kinks += 1  # a ReLU or max-pool switch lies inside the stencil
                        continue
                    err = abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6)
                    worst = max(worst, err)
                    checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and nonzero_frozen == 0 and elapsed < 120 and checked > 1000
    report(1, "gradient oracle", ok,
           f"200 models, {checked} entries, max rel err {worst:.2e}, {kinks} kink entries skipped, "
           f"{nonzero_frozen} nonzero frozen entries, {elapsed:.1f}s")
    assert ok


def oracle_velocities(snapshots, mu, costs):
    """Recompute (phi, dphi, v, v_tilde) per epoch from dumped unit vectors alone."""
    n = snapshots[0].n_neurons
    phi_prev, v_prev, rows = [1.0] * n, [0.0] * n, []
    for prev, cur in zip(snapshots, snapshots[1:]):
        phi = []
        for i in range(n):
            a, b = cur.vector(i), prev.vector(i)
            na, nb = math.sqrt(math.fsum(a * a)), math.sqrt(math.fsum(b * b))
            if na == 0 and nb == 0:
                phi.append(1.0)
            elif na == 0 or nb == 0:
                phi.append(0.0)
            else:
                phi.append(math.fsum(a * b) / (na * nb))
        dphi = [p - q for p, q in zip(phi, phi_prev)]
        v = [d - mu * w for d, w in zip(dphi, v_prev)]
        rows.append((phi, dphi, v, [vi / c for vi, c in zip(v, costs)]))
        phi_prev, v_prev = phi, v
    return rows


def test_c2_velocity_oracle(report, tmp_path):
    train, val, test = digits_transfer()
    model = registry.build_model("small_cnn_bn", (1, 8, 8), 5, seed=0, precision="f64")
    tuner = FineTuner(model, train, val, test, policy="velocity", budget=0.3, epochs=10, warmup=2,
                      mu_eq=0.5, eval_subset=64, dump_dir=tmp_path)
    tuner.run()
    snaps = [load_snapshot(p) for p in sorted(tmp_path.glob("snapshot_*.nsnp"))]
    expected = oracle_velocities(snaps, 0.5, tuner.costs.tolist())
    worst, bound = 0.0, 0.0
    for row, ref in zip(tuner.tracker.history, expected):
        for key, r in zip(("phi", "delta_phi", "v", "v_tilde"), ref):
            worst = max(worst, float(np.max(np.abs(row[key] - np.asarray(r)))))
        bound = max(bound, float(np.max(np.abs(row["phi"]))))
    ok = len(snaps) == 11 and len(tuner.tracker.history) == 10 and worst <= 1e-10 and bound <= 1 + 1e-9
    report(2, "velocity oracle", ok,
           f"10 epochs, {model.n_neurons} neurons, max abs diff {worst:.2e}, max |phi| {bound:.15f}")
    assert ok


def test_c3_selection_oracle(report):
    rng = np.random.default_rng(7)
    mismatches, over = 0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        costs = rng.integers(1, 501, n)
        pinned = set(rng.choice(n, int(rng.integers(0, min(n, 3) + 1)), replace=False).tolist())
        budget = int(costs[list(pinned)].sum()) + int(rng.integers(0, int(costs.sum()) + 1))
        v = rng.normal(size=n)
        order = rank(v)
        m = select_budget_prefix(order, costs, budget, pinned)
        ids, cost = brute_prefix(sorted(range(n), key=lambda i: (-abs(v[i]), i)), costs, budget, pinned)
        mismatches += int(m.neurons != ids or m.total_cost != cost)
        for policy in ("velocity", "reweighted", "random"):
            e = next_mask(policy, int(rng.integers(1, 30)), costs, budget, pinned, velocities=v, seed=3)
            over += int(e.total_cost > budget or e.total_cost != int(costs[sorted(e.neurons)].sum()))
    scale_fail = 0
    for _ in range(100):
        v = rng.normal(size=int(rng.integers(1, 100)))
        c = float(np.exp(rng.uniform(-20, 20)))
        scale_fail += int(not np.array_equal(rank(v), rank(v * c)))
    ok = mismatches == 0 and over == 0 and scale_fail == 0
    report(3, "selection oracle", ok,
           f"1000 prefix instances ({mismatches} mismatches), 3000 masks ({over} over budget), "
           f"100 scalings ({scale_fail} order changes)")
    assert ok


def test_c4_freeze_integrity(report):
    train, val, test = digits_transfer()
    model = registry.build_model("small_cnn_bn", (1, 8, 8), 5, seed=1, precision="f32")
    tuner = FineTuner(model, train, val, test, policy="velocity", budget=0.1, epochs=5, warmup=1)
    violations, frozen_total = 0, 0
    for _ in range(5):
        before = {k: v.copy() for k, v in model.state().items()}
        tuner.step()
        mask = tuner.masks[-1]
        for i, start, n in model.neuron_slices():
            for c in range(n):
                if start + c in mask.neurons:
                    continue
                frozen_total += 1
                for key, arr in model.state().items():
                    if key.startswith(f"{i}."):
                        violations += int(arr[c].tobytes() != before[key][c].tobytes())
    costs = [r.mask_cost for r in tuner.records]
    ok = violations == 0 and frozen_total > 0 and max(costs) <= tuner.budget
    report(4, "freeze integrity", ok,
           f"5 epochs at budget {tuner.budget}/{tuner.total_params}, {frozen_total} frozen neuron-epochs, "
           f"{violations} changed")
    assert ok


def test_c5_stationarity(report):
    train, val, test = digits_transfer()
    model = registry.build_model("small_cnn", (1, 8, 8), 5, seed=0, precision="f64")
    mu = 0.5
    tuner = FineTuner(model, train, val, test, policy="velocity", budget=0.5, epochs=10, warmup=1,
                      mu_eq=mu, eval_subset=64)
    for _ in range(3):
        tuner.step()  # give the velocities something to decay from
    for _ in range(5):
        tuner.step(lr=0.0)
    frozen = tuner.tracker.history[3:]
    phi_err = max(float(np.max(np.abs(r["phi"] - 1.0))) for r in frozen)
    dphi_max = max(float(np.max(np.abs(r["delta_phi"]))) for r in frozen[1:])
    ratio_err = 0.0
    for prev, cur in zip(frozen[1:], frozen[2:]):
        live = prev["v"] != 0
        ratio_err = max(ratio_err, float(np.max(np.abs(cur["v"][live] / prev["v"][live] + mu) / mu)))
    ok = phi_err < 1e-12 and dphi_max == 0.0 and ratio_err < 1e-9
    report(5, "stationarity", ok,
           f"|phi-1| <= {phi_err:.1e}, max |dphi| from 2nd lr=0 epoch {dphi_max}, "
           f"decay ratio rel err {ratio_err:.1e}")
    assert ok


def test_c6_scheduler(report):
    T, W, lr = 200, 5, 0.125
    at_w = cosine_lr(W, T, W, lr)
    mid = cosine_lr(W + (T - W) / 2, T, W, lr)
    end = cosine_lr(T, T, W, lr)
    near = cosine_lr(T - 1, T, W, lr)
    ok = (abs(at_w - 0.125) < 1e-9 and abs(mid - 0.0625) < 1e-9 and abs(end) < 1e-9
          and abs(near - 0.5 * lr * (1 + math.cos(math.pi * (T - 1 - W) / (T - W)))) < 1e-9)
    report(6, "scheduler", ok, f"lr(W)={at_w!r}, lr(mid)={mid!r}, lr(T)={end:.1e}, lr(T-1)={near:.3e}")
    assert ok


def test_c7_flops(report):
    rng = np.random.default_rng(11)
    model = registry.build_model("small_cnn_bn", (1, 8, 8), 5)
    empty = type("M", (), {"neurons": frozenset(), "bias_only": frozenset()})()
    saved = flops_saved_percent(model, [full_mask(registry.neuron_costs(model)), empty])
    mismatches = 0
    for _ in range(50):
        m = random_model(rng)
        x, y = random_batch(rng, m)
        mask = random_mask(rng, m)
        logits, cache = forward(m, x, training=True)
        counters = BackwardCounters()
        backward(m, cache, softmax_cross_entropy(logits, y)[1], mask, counters)
        wgrad, igrad = backward_charges(m, mask)
        same = ({k: v for k, v in counters.wgrad.items() if v} == {k: v * len(x) for k, v in wgrad.items() if v}
                and {k: v for k, v in counters.igrad.items() if v} == {k: v * len(x) for k, v in igrad.items() if v}
                and counters.per_sample_total() == backward_flops(m, mask))
        mismatches += int(not same)
    ok = saved == [0.0, 100.0] and mismatches == 0
    report(7, "FLOPs accounting", ok, f"full {saved[0]}%, empty {saved[1]}%, {mismatches}/50 counter mismatches")
    assert ok


@pytest.fixture(scope="module")
def trend():
    """Final test top-1 per (policy, budget) over the seeds, plus runtime."""
    t0 = time.perf_counter()
    finals = {}
    for seed in TREND_SEEDS:
        cfg = RunConfig(seeds={"weights": seed, "data": seed, "selection": seed})
        pretrained, _ = run_pretrain(cfg)
        cells = [("full", None)] + [(p, b) for p in ("velocity", "random") for b in TREND_BUDGETS]
        for policy, budget in cells:
            est = run_finetune(replace(cfg, policy=policy, budget=budget), pretrained=pretrained)
            finals.setdefault((policy, budget), []).append(est.history_[-1].test_top1)
    return finals, time.perf_counter() - t0, pretrained.n_params()


@pytest.mark.slow
def test_c8_trend(report, trend):
    finals, elapsed, n_params = trend
    mean = {k: float(np.mean(v)) for k, v in finals.items()}
    wins = sum(mean[("velocity", b)] >= mean[("random", b)] for b in TREND_BUDGETS)
    full = mean[("full", None)]
    top = TREND_BUDGETS[-1]
    floor_ok = mean[("velocity", top)] >= 0.9 * full and mean[("random", top)] >= 0.9 * full
    ok = wins >= 2 and floor_ok and elapsed < 1800 and n_params <= 200_000
    cells = ", ".join(f"b={b}: vel {mean[('velocity', b)]:.4f} rnd {mean[('random', b)]:.4f}"
                      for b in TREND_BUDGETS)
    report(8, "trend", ok, f"full {full:.4f}; {cells}; velocity >= random in {wins}/3; "
                           f"{n_params} params, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c9_determinism(report, tmp_path):
    cfg = tmp_path / "cell.json"
    cfg.write_text('{"policy": "velocity", "budget": %r}' % TREND_BUDGETS[0])
    outs = []
    for run in ("a", "b"):
        subprocess.run([sys.executable, "-m", "neuroselect.cli", "finetune", "--config", str(cfg),
                        "--out", str(tmp_path / run)], check=True, capture_output=True)
        outs.append((tmp_path / run / f"metrics_velocity_b{TREND_BUDGETS[0]}_s0.csv").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0].splitlines()) == 31
    report(9, "determinism", ok, f"two separate processes, {len(outs[0])} bytes each, identical={outs[0] == outs[1]}")
    assert ok
