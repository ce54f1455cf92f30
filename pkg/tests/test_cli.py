import json
import subprocess
import sys

import pytest

from protoda.cli import main
from protoda.datasets import SyntheticSpec, generate_synthetic_pair

TINY = """
[data]
n_classes = 3
per_class = 6
seed = 3

[base]
epochs = 2
batch_size = 8

[interp]
K = 2
epochs = 2
push_every = 1
last_layer_iters = 2
batch_size = 8

[explain]
m = 2
"""


@pytest.fixture
def tiny_config(tmp_path, monkeypatch):
    monkeypatch.setenv("PROTODA_CACHE", str(tmp_path / "cache"))
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def test_print_config_shows_defaults(capsys):
    assert main(["train-interp", "--print-config"]) == 0
    out = capsys.readouterr().out
    for line in ("alpha = 0.8", "K = 10", "lr = 0.003", "gamma = 10.0"):
        assert line in out
    assert main(["eval", "--profile", "office-home", "--print-config"]) == 0
    assert "gamma = 100.0" in capsys.readouterr().out


def test_missing_base_exits_2(tmp_path, tiny_config, capsys):
    code = main(["train-interp", "--config", str(tiny_config), "--out", str(tmp_path / "run"), "--seed", "0"])
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "MissingArtifact" and err["path"].endswith("base.npz")


def test_training_requires_seed(tmp_path, tiny_config, capsys):
    assert main(["train-base", "--config", str(tiny_config), "--out", str(tmp_path / "run")]) == 1
    assert "--seed" in json.loads(capsys.readouterr().err)["message"]


def test_real_profile_without_roots_fails(tmp_path, capsys):
    assert main(["train-base", "--profile", "office-home", "--out", str(tmp_path), "--seed", "0"]) == 1
    assert "source_root" in json.loads(capsys.readouterr().err)["message"]


def test_pipeline_end_to_end(tmp_path, tiny_config, capsys):
    run = tmp_path / "run"
    common = ["--config", str(tiny_config), "--out", str(run)]
    assert main(["train-base", *common, "--seed", "0"]) == 0
    assert "acc_source" in json.loads(capsys.readouterr().out)
    assert main(["train-interp", *common, "--seed", "0"]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert 0.0 <= metrics["agreement"] <= 1.0
    assert main(["explain", *common]) == 0
    assert main(["inspect", *common]) == 0
    assert main(["eval", *common]) == 0
    assert json.loads((run / "eval.json").read_text()) == metrics

    assert (run / "base.npz").is_file()
    assert {p.name for p in (run / "interp").glob("round_*.npz")} == {"round_01.npz", "round_02.npz"}
    assert (run / "report" / "index.html").is_file() and (run / "report" / "matches.json").is_file()
    for ext in ("csv", "json", "png"):
        assert (run / "inspect" / f"removal_all.{ext}").is_file()
    summary = json.loads((run / "inspect" / "summary.json").read_text())
    assert list(summary) == sorted(["all", *generate_synthetic_pair(SyntheticSpec(3, 6, 3)).categories])

    manifest = json.loads((run / "manifest_train-interp.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["interp"]["K"] == 2
    assert str(run / "base.npz") in manifest["inputs"]
    assert str(run / "interp" / "last.npz") in manifest["outputs"]

    # --resume with every round done retrains nothing and reproduces the checkpoint
    before = (run / "interp" / "last.npz").read_bytes()
    assert main(["train-interp", *common, "--seed", "0", "--resume"]) == 0
    assert (run / "interp" / "last.npz").read_bytes() == before


def test_console_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "protoda.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train-base", "train-interp", "explain", "inspect", "eval"):
        assert cmd in out.stdout
