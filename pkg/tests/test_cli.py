import json

import pytest

from trafficrl.cli import run_command
from trafficrl.metrics import MetricReport

TINY = {
    "version": 1,
    "seed": 3,
    "dataset": {"nominal_train": 4, "nominal_heldout": 3, "longtail_train": 3, "longtail_heldout": 2,
                "longtail_ood": 2},
    "train": {"hidden": [8, 8, 8], "total_epochs": 2, "ppo_batch": 8, "ppo_minibatch": 4, "il_minibatch": 2,
              "rollout_T": 4, "learning_rate": 1e-3},
    "eval": {"n_resamples": 100, "longtail_ticks": 6},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    assert run_command(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root, cfg


def test_gen_data_writes_every_split(workspace):
    root, _ = workspace
    for name in ("nominal_train", "nominal_heldout", "longtail_train", "longtail_heldout", "longtail_ood"):
        doc = json.loads((root / "data" / f"{name}.json").read_text())
        assert doc["version"] == 1 and len(doc["scenarios"]) == TINY["dataset"][name]
    ood = json.loads((root / "data" / "longtail_ood.json").read_text())["scenarios"]
    assert {s["family"] for s in ood} == {"merge"}
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 3


def test_train_is_byte_reproducible(workspace):
    root, cfg = workspace
    outs = []
    for k in range(2):
        out = root / f"run{k}"
        assert run_command(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(out)]) == 0
        outs.append(out)
    a, b = ((o / "checkpoint.json").read_bytes() for o in outs)
    assert a == b
    assert (outs[0] / "checkpoints" / "epoch_001.json").read_bytes() == \
        (outs[1] / "checkpoints" / "epoch_001.json").read_bytes()
    rows = (outs[0] / "epochs.csv").read_text().splitlines()
    assert rows[0].startswith("epoch,mode,lr") and len(rows) == 3


def test_rollout_eval_and_histograms(workspace):
    root, cfg = workspace
    ckpt = root / "run0" / "checkpoint.json"
    scen = root / "data" / "nominal_heldout.json"
    logs = root / "policy.csv"
    assert run_command(["rollout", "--config", str(cfg), "--scenarios", str(scen), "--checkpoint", str(ckpt),
                        "--out", str(logs)]) == 0
    report = root / "policy_report.csv"
    assert run_command(["eval", "--config", str(cfg), "--logs", str(logs), "--scenarios", str(scen),
                        "--out", str(report)]) == 0
    rep = MetricReport.from_csv(report.read_text())
    assert rep["fde"].mean > 0 and "collision_pct" in rep.rows

    hist = root / "hist"
    assert run_command(["export-hist", "--config", str(cfg), "--logs", str(logs), "--scenarios", str(scen),
                        "--label", "rtr", "--out", str(hist)]) == 0
    assert (hist / "rtr_speed.csv").read_text().startswith("bin_left,bin_right,mass")

    tail = root / "data" / "longtail_heldout.json"
    assert run_command(["rollout", "--config", str(cfg), "--scenarios", str(tail), "--checkpoint", str(ckpt),
                        "--out", str(root / "tail.csv")]) == 0
    assert run_command(["eval", "--config", str(cfg), "--logs", str(root / "tail.csv"), "--scenarios", str(tail),
                        "--out", str(root / "tail_report.csv")]) == 0
    assert "fde" not in MetricReport.from_csv((root / "tail_report.csv").read_text()).rows


def test_eval_of_expert_logs_is_exact(workspace):
    root, cfg = workspace
    scen = root / "data" / "nominal_heldout.json"
    logs = root / "expert.csv"
    assert run_command(["rollout", "--config", str(cfg), "--scenarios", str(scen), "--controller", "expert",
                        "--out", str(logs)]) == 0
    out = root / "expert_report.csv"
    assert run_command(["eval", "--config", str(cfg), "--logs", str(logs), "--scenarios", str(scen),
                        "--out", str(out)]) == 0
    rep = MetricReport.from_csv(out.read_text())
    for name in ("fde", "ate", "cte"):
        assert rep[name].mean == 0 and rep[name].high == 0
    assert rep["collision_pct"].mean == 0


def test_unknown_flag(capsys, workspace):
    _, cfg = workspace
    assert run_command(["train", "--config", str(cfg), "--bogus"]) != 0
    err = capsys.readouterr().err
    assert "usage:" in err


def test_bad_config_version(tmp_path, capsys):
    cfg = tmp_path / "old.json"
    cfg.write_text(json.dumps({**TINY, "version": 0}))
    out = tmp_path / "data"
    assert run_command(["gen-data", "--config", str(cfg), "--out", str(out)]) == 1
    assert "version" in capsys.readouterr().err
    assert not out.exists()


def test_unreadable_inputs(tmp_path, workspace, capsys):
    root, cfg = workspace
    assert run_command(["gen-data", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1
    out = tmp_path / "x.csv"
    assert run_command(["eval", "--config", str(cfg), "--logs", str(tmp_path / "none.csv"),
                        "--scenarios", str(root / "data" / "nominal_heldout.json"), "--out", str(out)]) == 1
    assert not out.exists()
    assert "error" in capsys.readouterr().err


def test_policy_rollout_needs_checkpoint(workspace, tmp_path):
    root, cfg = workspace
    out = tmp_path / "p.csv"
    assert run_command(["rollout", "--config", str(cfg), "--scenarios", str(root / "data" / "nominal_heldout.json"),
                        "--out", str(out)]) == 1
    assert not out.exists()
