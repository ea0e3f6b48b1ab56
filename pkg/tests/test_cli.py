"""End-to-end command-line runs: exit codes, artifacts, determinism."""

import csv
import filecmp

import pytest

from ws3net.checkpoint import load_checkpoint
from ws3net.cli import TRAIN_LOG_COLUMNS, main
from ws3net.network import count_params

CONFIG = """\
task: insseg
output_dir: {out}
network:
  architecture: res16unet14a
  width_multiplier: 0.25
  seed: 7
trainer:
  iterations: 20
  base_lr: 0.1
  log_every: 10
dataset:
  kind: synthetic
  num_batches: 2
  scenes_per_batch: 2
  extent: 12
  num_classes: 6
  seed: 3
  eval_batches: 1
  eval_seed: 99
prune:
  finetune_iterations: 0
"""


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One trained run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.yaml"
    out = root / "base"
    cfg.write_text(CONFIG.format(out=out))
    assert main(["train", "--config", str(cfg), "--threads", "1"]) == 0
    return {"root": root, "config": cfg, "out": out,
            "checkpoint": out / "checkpoint.wsck"}


def test_train_artifacts(workspace):
    out = workspace["out"]
    assert (out / "checkpoint.wsck").is_file()
    net = load_checkpoint(out / "checkpoint.wsck")
    assert net.spec.width_multiplier == 0.25
    rows = read_csv(out / "train_log.csv")
    assert tuple(rows[0].keys()) == TRAIN_LOG_COLUMNS
    assert rows[-1]["iteration"] == "20"
    ev = read_csv(out / "eval.csv")
    assert set(ev[0]) == {"miou", "macc", "loss"}
    assert 0.0 <= float(ev[0]["miou"]) <= 1.0


def test_train_determinism(workspace, tmp_path):
    """Same seed and --threads 1 reproduce every artifact byte for byte."""
    first = workspace["out"]
    again = tmp_path / "again"
    rc = main(["train", "--config", str(workspace["config"]),
               "--threads", "1", "--output-dir", str(again)])
    assert rc == 0
    for name in ("checkpoint.wsck", "train_log.csv", "eval.csv"):
        assert filecmp.cmp(first / name, again / name, shallow=False), name


def test_missing_config_exit_2(capsys):
    rc = main(["train", "--config", "/tmp/definitely_absent.yaml"])
    assert rc == 2
    assert "/tmp/definitely_absent.yaml" in capsys.readouterr().err


def test_unknown_flag_exit_2(capsys):
    assert main(["train", "--config", "x.yaml", "--frobnicate"]) == 2


def test_bad_override_exit_2(workspace, capsys):
    rc = main(["train", "--config", str(workspace["config"]),
               "--iterations", "0"])
    assert rc == 2


def test_missing_checkpoint_exit_1(workspace, capsys):
    rc = main(["eval", "--config", str(workspace["config"]),
               "--checkpoint", "/tmp/definitely_absent.wsck"])
    assert rc == 1


def test_count_preset(capsys):
    assert main(["count", "--arch", "res16unet14a"]) == 0
    out = capsys.readouterr().out
    assert "8015072" in out
    assert main(["count", "--arch", "res16unet14a",
                 "--checkpoint", "x.wsck"]) == 2
    assert main(["count"]) == 2


def test_count_breakdown_csv(tmp_path, capsys):
    path = tmp_path / "breakdown.csv"
    rc = main(["count", "--arch", "res16unet14a", "--width", "0.25",
               "--num-classes", "6", "--breakdown", str(path)])
    assert rc == 0
    rows = read_csv(path)
    kinds = {r["kind"] for r in rows}
    assert kinds == {"conv", "conv_head", "bn"}
    heads = [r["name"] for r in rows if r["kind"] == "conv_head"]
    assert "final" in heads


def test_prune_target_zero_noop(workspace, tmp_path, capsys):
    rc = main(["prune", "--config", str(workspace["config"]),
               "--checkpoint", str(workspace["checkpoint"]),
               "--target-rate", "0", "--output-dir", str(tmp_path / "p0")])
    assert rc == 0
    assert "nothing to prune" in capsys.readouterr().out
    assert not (tmp_path / "p0" / "pruned.wsck").exists()


def test_prune_echoes_per_step_rate(workspace, tmp_path, capsys):
    out = tmp_path / "p99"
    rc = main(["prune", "--config", str(workspace["config"]),
               "--checkpoint", str(workspace["checkpoint"]),
               "--target-rate", "0.99", "--steps", "10",
               "--finetune-iterations", "0",
               "--output-dir", str(out), "--threads", "1"])
    assert rc == 0
    assert "0.369043" in capsys.readouterr().out


def test_prune_artifacts(workspace, tmp_path):
    out = tmp_path / "p90"
    rc = main(["prune", "--config", str(workspace["config"]),
               "--checkpoint", str(workspace["checkpoint"]),
               "--criterion", "L1G", "--target-rate", "0.9", "--steps", "4",
               "--finetune-iterations", "2",
               "--output-dir", str(out), "--threads", "1"])
    assert rc == 0
    log = read_csv(out / "prune_log.csv")
    assert len(log) == 4
    assert abs(float(log[-1]["density"]) - 0.1) < 0.001
    net = load_checkpoint(out / "pruned.wsck")
    total = sum(c.weights.size() for c in net.conv_layers() if c.prunable)
    left = sum(c.weights.nnz() for c in net.conv_layers() if c.prunable)
    assert abs(left / total - 0.1) < 0.001


def test_bad_criterion_exit_2(workspace, tmp_path, capsys):
    rc = main(["prune", "--config", str(workspace["config"]),
               "--checkpoint", str(workspace["checkpoint"]),
               "--criterion", "L7G", "--target-rate", "0.5",
               "--output-dir", str(tmp_path / "bad")])
    assert rc == 2


def test_structural_prune_density_pattern(workspace, tmp_path):
    out = tmp_path / "struct"
    rc = main(["prune", "--config", str(workspace["config"]),
               "--checkpoint", str(workspace["checkpoint"]),
               "--structural", "block7_0.conv1",
               "--output-dir", str(out), "--threads", "1"])
    assert rc == 0
    rows = [r for r in read_csv(out / "density.csv")
            if r["layer"] == "block7_0.conv1"]
    assert len(rows) == 27
    live = [r for r in rows if float(r["density"]) > 0]
    assert len(live) == 3
    assert all(r["offset_x"] == "0" and r["offset_y"] == "0" for r in live)


def test_eval_weight_modes_agree(workspace, tmp_path):
    vals = {}
    for mode in ("dense", "ws3"):
        out = tmp_path / mode
        rc = main(["eval", "--config", str(workspace["config"]),
                   "--checkpoint", str(workspace["checkpoint"]),
                   "--weight-mode", mode,
                   "--output-dir", str(out), "--threads", "1"])
        assert rc == 0
        vals[mode] = float(read_csv(out / "eval.csv")[0]["miou"])
    assert vals["dense"] == pytest.approx(vals["ws3"], abs=1e-9)


def test_bench_layer_csv(tmp_path):
    path = tmp_path / "bench.csv"
    rc = main(["bench", "--channels", "8", "--voxels", "100",
               "--sparsity", "0.5", "0.9", "--reps", "1",
               "--output", str(path)])
    assert rc == 0
    rows = read_csv(path)
    assert len(rows) == 2
    assert rows[0]["layer"] == "synthetic"
    assert int(rows[1]["ws3_macs"]) < int(rows[0]["ws3_macs"])


def test_report_and_scene_export(workspace, tmp_path):
    out = tmp_path / "rep"
    rc = main(["report", "--checkpoint", str(workspace["checkpoint"]),
               "--config", str(workspace["config"]),
               "--export-scenes", "2", "--output-dir", str(out)])
    assert rc == 0
    params = read_csv(out / "params.csv")
    net = load_checkpoint(workspace["checkpoint"])
    assert sum(int(r["surviving"]) for r in params) == count_params(net)
    assert (out / "density.csv").is_file()
    scenes = sorted((out / "scenes").iterdir())
    assert [p.name for p in scenes] == ["batch_000.voxset", "batch_001.voxset"]
