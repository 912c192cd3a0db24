import csv
import json
import statistics

import pytest

from neuroselect.cli import main

FAST = {"epochs": 2, "warmup": 1, "pretrain_epochs": 2, "pretrain_warmup": 1, "budget": 0.2,
        "eval_subset": 64}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(FAST))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_missing_config_exit_2(tmp_path, capsys):
    assert main(["finetune", "--config", str(tmp_path / "absent.json")]) == 2
    assert "absent.json" in capsys.readouterr().err


def test_bad_override_and_unknown_key_exit_2(config, tmp_path):
    assert main(["finetune", "--config", str(config), "--set", "polic=random"]) == 2
    assert main(["finetune", "--config", str(config), "--set", "policy=nope"]) == 2


def test_infeasible_budget_exit_3(config, tmp_path):
    assert main(["finetune", "--config", str(config), "--out", str(tmp_path / "o"),
                 "--set", "budget=3"]) == 3


def test_missing_data_exit_4(config, tmp_path, monkeypatch):
    monkeypatch.delenv("NEUROSELECT_DATA_DIR", raising=False)
    spec = '{"source": "idx", "images": "nowhere/img.idx", "labels": "nowhere/lab.idx"}'
    assert main(["finetune", "--config", str(config), "--out", str(tmp_path / "o"),
                 "--set", f"finetune_data={spec}"]) == 4


def test_override_echo_and_config_untouched(config, tmp_path):
    before = config.read_bytes()
    out = tmp_path / "o"
    assert main(["finetune", "--config", str(config), "--out", str(out), "--set", "policy=random",
                 "--set", "seeds.selection=3"]) == 0
    assert config.read_bytes() == before
    summary = json.loads(next(out.glob("summary_*.json")).read_text())
    assert summary["config"]["policy"] == "random"
    assert summary["config"]["seeds"]["selection"] == 3
    assert summary["tag"] == "random_b0.2_s0-0-3"


def test_pretrain_then_finetune_from_checkpoint(config, tmp_path):
    assert main(["pretrain", "--config", str(config), "--out", str(tmp_path / "pre")]) == 0
    ckpt = tmp_path / "pre" / "pretrained_s0.nsel"
    assert ckpt.exists()
    assert main(["finetune", "--config", str(config), "--out", str(tmp_path / "ft"),
                 "--set", f"model_checkpoint={json.dumps(str(ckpt))}"]) == 0


def test_two_invocations_byte_identical(config, tmp_path):
    for d in ("a", "b"):
        assert main(["finetune", "--config", str(config), "--out", str(tmp_path / d)]) == 0
    name = "metrics_velocity_b0.2_s0.csv"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_table_matches_recomputation(tmp_path):
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"base": FAST, "policies": ["velocity", "random"],
                                 "budgets": [0.2], "seeds": [0, 1, 2]}))
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(sweep), "--out", str(out)]) == 0
    table = read_csv(out / "comparison.csv")
    assert [r["policy"] for r in table] == ["velocity", "random"]
    for row in table:
        finals = []
        for seed in range(3):
            metrics = read_csv(out / f"{row['policy']}_b0.2_s{seed}" / f"metrics_{row['policy']}_b0.2_s{seed}.csv")
            finals.append(float(metrics[-1]["test_top1"]))
        assert row["runs"] == "3"
        assert float(row["mean_top1"]) == pytest.approx(statistics.fmean(finals), abs=1e-12)
        assert float(row["std_top1"]) == pytest.approx(statistics.pstdev(finals), abs=1e-12)

    report = tmp_path / "rep"
    (tmp_path / "junk").mkdir()
    assert main(["report", str(out), str(tmp_path / "junk"), "--out", str(report)]) == 0
    acc = read_csv(report / "accuracy_curves.csv")
    assert len({r["curve_id"] for r in acc}) == 6
    source = read_csv(out / "random_b0.2_s1" / "metrics_random_b0.2_s1.csv")
    mine = [r["test_top1"] for r in acc if r["curve_id"] == "random_b0.2_s1"]
    assert mine == [r["test_top1"] for r in source]


def test_sweep_degenerate_and_failed_cell(tmp_path):
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"base": FAST, "policies": ["full", "velocity"],
                                 "budgets": [5], "seeds": [0]}))
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(sweep), "--out", str(out), "--jobs", "2"]) == 0
    table = {r["policy"]: r for r in read_csv(out / "comparison.csv")}
    assert table["full"]["runs"] == "1" and table["full"]["std_top1"] == "0.0"
    assert table["velocity"]["runs"] == "0" and table["velocity"]["note"].startswith("warning")

    report = tmp_path / "rep"
    assert main(["report", str(out / "full_bNone_s0"), "--out", str(report)]) == 0
    flops = read_csv(report / "flops_curves.csv")
    assert flops and all(float(r["flops_saved_pct"]) == 0.0 for r in flops)


def test_sweep_rejects_empty_axis(tmp_path):
    sweep = tmp_path / "sweep.json"
    sweep.write_text(json.dumps({"base": FAST, "policies": [], "budgets": [0.1], "seeds": [0]}))
    assert main(["sweep", "--config", str(sweep), "--out", str(tmp_path / "o")]) == 2


def test_report_without_runs_exit_4(tmp_path):
    assert main(["report", str(tmp_path), "--out", str(tmp_path / "r")]) == 4
