"""``neuroselect`` command line: pretrain, finetune, sweep, report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import trainer
from .exceptions import BudgetError, ConfigError, DataError, FormatError
from .selection import BUDGETED

log = logging.getLogger("neuroselect")

EXIT_CONFIG, EXIT_BUDGET, EXIT_DATA = 2, 3, 4
SWEEP_KEYS = {"base", "policies", "budgets", "seeds"}
TABLE_COLUMNS = ("policy", "budget", "runs", "mean_top1", "std_top1", "note")
CURVE_COLUMNS = ("curve_id", "policy", "budget", "seed", "epoch")


def _exit_code(exc):
    if isinstance(exc, BudgetError):
        return EXIT_BUDGET
    if isinstance(exc, (DataError, FormatError)):
        return EXIT_DATA
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    raise exc


# ---------------------------------------------------------------------------
# pretrain / finetune
# ---------------------------------------------------------------------------


def cmd_pretrain(args):
    cfg = trainer.load_config(args.config, args.set)
    out = Path(args.out)
    _, acc = trainer.run_pretrain(cfg, out)
    print(f"pretrained {cfg.arch} on {cfg.pretrain_data['source']}: test top-1 {acc:.4f}")
    print(f"checkpoint: {out / ('pretrained_s%d.nsel' % cfg.seeds['weights'])}")
    return 0


def cmd_finetune(args):
    cfg = trainer.load_config(args.config, args.set)
    est = trainer.run_finetune(cfg, args.out)
    print(f"{cfg.tag()}: final test top-1 {est.history_[-1].test_top1:.4f} "
          f"(budget {est.budget_} of {est.total_params_} params)")
    print(f"artifacts in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def load_sweep(path, overrides=()):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: sweep file not found") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse sweep: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: sweep must be a JSON object")
    doc = trainer.apply_overrides(doc, overrides)
    unknown = sorted(set(doc) - SWEEP_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown sweep key(s): {', '.join(unknown)}")
    for axis in ("policies", "budgets", "seeds"):
        if not isinstance(doc.get(axis), list) or not doc[axis]:
            raise ConfigError(f"{path}: '{axis}' must be a non-empty list")
    if not all(isinstance(s, int) for s in doc["seeds"]):
        raise ConfigError(f"{path}: seeds must be integers")
    return doc


def sweep_cells(doc):
    """``{seed: [RunConfig, ...]}``, validated before anything runs.

    Budget-free policies get one cell per seed rather than one per budget.
    """
    cells = {}
    for seed in doc["seeds"]:
        row = []
        for policy in doc["policies"]:
            budgets = doc["budgets"] if policy in BUDGETED else [None]
            for budget in budgets:
                d = dict(doc.get("base", {}), policy=policy, budget=budget,
                         seeds={k: seed for k in trainer.SEED_KEYS})
                row.append(trainer.RunConfig.from_dict(d))
        cells[seed] = row
    return cells


def _run_cell(cfg_dict, out_dir):
    """Worker entry point; failures are reported, never raised."""
    cfg = trainer.RunConfig.from_dict(cfg_dict)
    try:
        est = trainer.run_finetune(cfg, out_dir)
        return cfg.tag(), est.history_[-1].test_top1, None
    except Exception as exc:  # noqa: BLE001
        return cfg.tag(), None, f"{type(exc).__name__}: {exc}"


def comparison_table(results):
    """Rows of mean and population std of final top-1 per (policy, budget).

    ``results`` holds ``(policy, budget, top1 or None, error or None)``.
    """
    groups = {}
    for policy, budget, top1, err in results:
        groups.setdefault((policy, budget), []).append((top1, err))
    rows = []
    for (policy, budget), runs in groups.items():
        ok = [t for t, e in runs if e is None]
        failed = len(runs) - len(ok)
        note = f"warning: {failed} of {len(runs)} cells failed" if failed else ""
        rows.append({"policy": policy, "budget": "" if budget is None else budget, "runs": len(ok),
                     "mean_top1": repr(float(np.mean(ok))) if ok else "",
                     "std_top1": repr(float(np.std(ok))) if ok else "", "note": note})
    return rows


def cmd_sweep(args):
    doc = load_sweep(args.config, args.set)
    cells = sweep_cells(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for seed, cfgs in cells.items():
        base = cfgs[0]
        if base.model_checkpoint is None:
            pre_dir = out / f"pretrain_s{seed}"
            trainer.run_pretrain(base, pre_dir)
            ckpt = str(pre_dir / f"pretrained_s{seed}.nsel")
        else:
            ckpt = base.model_checkpoint
        for cfg in cfgs:
            d = dict(cfg.to_dict(), model_checkpoint=ckpt)
            jobs.append((d, str(out / cfg.tag())))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        outcomes = [_run_cell(*job) for job in jobs]
    results = []
    for (d, _), (tag, top1, err) in zip(jobs, outcomes):
        if err is not None:
            log.warning("cell %s failed: %s", tag, err)
        results.append((d["policy"], d["budget"], top1, err))
    rows = comparison_table(results)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, TABLE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['policy']:>10} {str(r['budget']):>8}  n={r['runs']}  "
              f"top1 {r['mean_top1'][:6] or '-'} +- {r['std_top1'][:6] or '-'}  {r['note']}")
    if all(err is not None for *_, err in results):
        return 1
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def collect_runs(paths):
    """``[(summary, metric rows)]`` for every readable run below ``paths``."""
    runs = []
    for p in map(Path, paths):
        summaries = sorted(p.rglob("summary_*.json")) if p.is_dir() else []
        if not summaries:
            log.warning("%s: no run summaries found, skipped", p)
            continue
        for s in summaries:
            try:
                summary = json.loads(s.read_text())
                metrics = s.with_name(f"metrics_{summary['tag']}.csv")
                rows = trainer.read_metrics_csv(metrics)
                if not isinstance(summary["config"]["seeds"]["selection"], int):
                    raise TypeError("selection seed is not an integer")
            except (OSError, ValueError, KeyError, TypeError, DataError) as exc:
                log.warning("%s: malformed run (%s), skipped", s.parent, exc)
                continue
            runs.append((summary, rows))
    return runs


def cmd_report(args):
    runs = collect_runs(args.runs)
    if not runs:
        raise DataError("no completed runs to report on")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, column in (("accuracy_curves.csv", "test_top1"), ("flops_curves.csv", "flops_saved_pct")):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_COLUMNS + (column,))
            for summary, rows in runs:
                cfg = summary["config"]
                budget = "" if cfg["budget"] is None else cfg["budget"]
                for r in rows:
                    w.writerow([summary["tag"], cfg["policy"], budget, cfg["seeds"]["selection"],
                                r["epoch"], r[column]])
    print(f"{len(runs)} runs -> {out / 'accuracy_curves.csv'}, {out / 'flops_curves.csv'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="neuroselect",
                                     description="Budgeted neuron-selective fine-tuning.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_default):
        p.add_argument("--config", required=True, help="JSON run config (sweep file for 'sweep')")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field; dotted keys, JSON values (repeatable)")

    common(sub.add_parser("pretrain", help="full training on the upstream task"), "runs/pretrain")
    common(sub.add_parser("finetune", help="one budgeted fine-tuning run"), "runs/finetune")
    p = sub.add_parser("sweep", help="policy x budget x seed grid plus a comparison table")
    common(p, "runs/sweep")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p = sub.add_parser("report", help="tidy accuracy and FLOPs-saved curves from finished runs")
    p.add_argument("runs", nargs="+", help="run or sweep directories")
    p.add_argument("--out", default="report", help="output directory")
    return parser


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, BudgetError, DataError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
