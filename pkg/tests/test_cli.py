import json
import os
import subprocess
import sys

import pytest

from d3qe.cli import build_parser, main, resolve

SMALL = ["--N", "16", "--c", "4", "--p", "4", "--H", "16", "--W", "16", "--top-k", "2",
         "--n-train", "24", "--n-val", "10", "--n-test", "10"]
MODEL = ["--d", "16", "--L", "1", "--d-s", "8", "--d-e", "8", "--batch", "8", "--lr", "0.003"]


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen-data", "--seed", "7", "--out", str(data)] + SMALL) == 0
    ckpt = root / "model.ckpt"
    summary = root / "train.json"
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--report", str(summary),
                 "--epochs", "3", "--seed", "7"] + MODEL) == 0
    return root, data, ckpt, json.loads(summary.read_text())


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus", "1"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("usage: d3qe") and "unrecognized arguments: --bogus" in err


def test_missing_subcommand_and_bad_value(capsys):
    assert main([]) == 1
    assert main(["train", "--epochs", "many"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out


def test_flags_override_toml_over_defaults(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('lr = 0.5\nepochs = 3\nbatch = 4\ndistribution-bias = false\n')
    args = build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "5"])
    opts = resolve(args)
    assert opts["epochs"] == 5 and opts["lr"] == 0.5 and opts["batch"] == 4
    assert opts["distribution_bias"] is False and opts["wd"] == 0.01


@pytest.mark.parametrize("text", ["lr = 'fast'\n", "mystery = 1\n", "lr = \n"])
def test_bad_toml_is_config_error(tmp_path, capsys, text):
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "m")]) == 1
    assert "error" in capsys.readouterr().err


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "7", "--out", str(tmp_path / name)] + SMALL) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "train.tsv" in a and "dataset.json" in a


def test_missing_data_is_data_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m")]) == 2
    assert "gen-data" in capsys.readouterr().err


def test_eval_reproduces_best_validation_accuracy(small_run, tmp_path):
    _, data, ckpt, summary = small_run
    report = tmp_path / "val.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--split", "val",
                 "--report", str(report)]) == 0
    got = json.loads(report.read_text())
    best = summary["history"][summary["best_epoch"] - 1]
    assert got["overall"]["accuracy"] == best["val_accuracy"] == summary["best_val_accuracy"]
    assert got["overall"]["average_precision"] == best["val_ap"]
    assert got["perturbation"] is None and got["config"]["epoch"] == summary["best_epoch"]


def test_mismatched_codebook_size_exits_2(small_run, capsys):
    _, data, ckpt, _ = small_run
    assert main(["eval", "--checkpoint", str(ckpt), "--manifest", str(data / "test.tsv"),
                 "--N", "32"]) == 2
    assert "num_codes" in capsys.readouterr().err


def test_sweep_heatmap_and_inspect(small_run, tmp_path, capsys):
    root, data, ckpt, summary = small_run
    out = tmp_path / "sweep.json"
    assert main(["sweep", "--checkpoint", str(ckpt), "--data", str(data), "--kind", "crop",
                 "--grid", "0.5,0.9", "--report", str(out)]) == 0
    reports = json.loads(out.read_text())["reports"]
    assert [r["perturbation"]["factor"] for r in reports] == [0.5, 0.9]
    assert main(["heatmap", "--checkpoint", str(ckpt), "--out", str(tmp_path / "hm"), "--first-m", "16"]) == 0
    assert sorted(os.listdir(tmp_path / "hm")) == ["heatmap_fake.csv", "heatmap_ratio.csv", "heatmap_real.csv"]
    capsys.readouterr()
    assert main(["inspect-checkpoint", "--checkpoint", str(ckpt)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["epoch"] == summary["best_epoch"] and info["config"]["num_codes"] == 16
    assert info["tracker_totals"]["real"] == summary["best_epoch"] * 12 * 16


def test_corrupt_checkpoint_exits_2(small_run, tmp_path, capsys):
    _, data, ckpt, _ = small_run
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(ckpt.read_bytes()[:100])
    assert main(["inspect-checkpoint", "--checkpoint", str(bad)]) == 2
    assert "offset" in capsys.readouterr().err


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "d3qe.cli", "gen-data", "--bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "usage:" in proc.stderr
