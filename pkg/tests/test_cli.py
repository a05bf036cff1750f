import json
import subprocess
import sys

import pytest

from hcnn.cli import main
from hcnn.config import DataConfig, NetworkConfig, RunConfig, Schedule
from hcnn.model import count_parameters, load_checkpoint


def _config(tmp_path, **kw):
    run = RunConfig(network=NetworkConfig.toy(), seed=3,
                    schedule=Schedule(lr=0.05, epochs=2, batch_size=20),
                    data=DataConfig(kind="synthetic", synthetic_train=40, synthetic_test=20),
                    output_dir=str(tmp_path / "run"))
    run = run.with_overrides(**kw)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(run.to_dict()))
    return str(path), run


def test_params_prints_pinned_total(capsys):
    assert main(["params"]) == 0
    assert "total 97820" in capsys.readouterr().out
    assert main(["params", "--preset", "cifar100", "--variant", "plus", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["total"] == 888_260


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS") for line in lines)


def test_train_eval_analyze_round_trip(tmp_path, capsys):
    cfg, run = _config(tmp_path)
    assert main(["train", "--config", cfg, "--quiet"]) == 0
    out = tmp_path / "run"
    assert json.loads((out / "config.json").read_text()) == run.to_dict()
    metrics = (out / "metrics.jsonl").read_text().splitlines()
    assert len(metrics) == 2
    model = load_checkpoint(out / "checkpoint.hcnn")
    assert model.step == 4 and model.data_mean is not None

    assert main(["eval", "--config", cfg, "--checkpoint", str(out / "checkpoint.hcnn")]) == 0
    summary = json.loads((out / "eval.json").read_text())
    assert summary["count"] == 20
    assert summary["accuracy"] == json.loads(metrics[-1])["test_acc"]

    ana = tmp_path / "ana"
    assert main(["analyze", "--config", cfg, "--checkpoint", str(out / "checkpoint.hcnn"),
                 "--output-dir", str(ana), "--queries", "5", "--heatmaps", "2", "--top", "3",
                 "--depth", "4"]) == 0
    lines = [json.loads(l) for l in (ana / "matches.jsonl").read_text().splitlines()]
    assert len(lines) == 5 and all(len(l["matches"]) == 3 for l in lines)
    assert all(l["query"] not in [m["id"] for m in l["matches"]] for l in lines)
    assert sorted(p.name for p in ana.glob("heatmap_*.pgm")) == ["heatmap_0.pgm", "heatmap_1.pgm"]
    assert (ana / "corpus_j4.bin").exists()
    report = json.loads((ana / "analysis.json").read_text())
    assert report["queries"] == 5 and report["chance"] == pytest.approx(0.1)
    assert json.loads((ana / "analyze_config.json").read_text())["analyze"]["depth"] == 4


def test_train_overrides(tmp_path):
    cfg, _ = _config(tmp_path)
    other = tmp_path / "other"
    assert main(["train", "--config", cfg, "--quiet", "--max-steps", "1", "--seed", "9",
                 "--output-dir", str(other)]) == 0
    written = json.loads((other / "config.json").read_text())
    assert written["seed"] == 9 and written["schedule"]["max_steps"] == 1
    assert load_checkpoint(other / "checkpoint.hcnn").step == 1


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text(json.dumps({"network": {"K": 6}}))
    assert main(["params", "--config", str(bad)]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_files_exit_3(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 3
    assert main(["eval", "--checkpoint", str(tmp_path / "none.hcnn")]) == 3


def test_checkpoint_config_mismatch_exits_6(tmp_path):
    cfg, _ = _config(tmp_path, schedule=Schedule(lr=0.05, epochs=1, batch_size=20, max_steps=1))
    assert main(["train", "--config", cfg, "--quiet"]) == 0
    ckpt = str(tmp_path / "run" / "checkpoint.hcnn")
    other, _ = _config(tmp_path, network=NetworkConfig.toy(variant="plus"))
    assert main(["eval", "--config", other, "--checkpoint", ckpt]) == 6


def test_missing_cifar_exits_3(tmp_path):
    cfg, _ = _config(tmp_path, data=DataConfig(kind="cifar10", path=str(tmp_path / "nowhere")),
                     network=NetworkConfig.cifar10())
    assert main(["train", "--config", cfg, "--quiet"]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_4(tmp_path):
    cfg, _ = _config(tmp_path, schedule=Schedule(lr=1e30, epochs=2, batch_size=20))
    assert main(["train", "--config", cfg, "--quiet"]) == 4


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hcnn", "params", "--preset", "toy", "--json"],
                          capture_output=True, text=True, check=True)
    assert json.loads(proc.stdout) == json.loads(json.dumps(count_parameters(NetworkConfig.toy())))
