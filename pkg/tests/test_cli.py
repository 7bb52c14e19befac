import json
import subprocess
import sys

import pytest

from cwhawq.cli import main

SMALL = """[run]
model = mlp-s
dataset = synthetic
seed = 0
output_dir = {out}
[train]
epochs = {epochs}
lr = {lr}
[probe]
probe_m = 3
probe_n = 3
[search]
episodes = 6
reward_train = 300
reward_eval = 200
compare_uniform = false
"""


def write_cfg(tmp_path, name="cfg.ini", epochs=3, lr=0.05, out=None):
    path = tmp_path / name
    path.write_text(SMALL.format(out=out or tmp_path / "run", epochs=epochs, lr=lr))
    return path


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    """train-baseline -> trace -> search -> quantize -> finetune through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(d)
    ckpt = d / "base.nnq"
    assert main(["train-baseline", "--config", str(cfg), "--out", str(ckpt)]) == 0
    assert main(["trace", "--ckpt", str(ckpt), "--target", "weights", "--m", "3",
                 "--out", str(d / "tw.json")]) == 0
    assert main(["search", "--trace", str(d / "tw.json"), "--ckpt", str(ckpt), "--phase", "weights",
                 "--budget-wcomp", "8", "--episodes", "6", "--out", str(d / "pw.json")]) == 0
    assert main(["quantize", "--policy", str(d / "pw.json"), "--ckpt", str(ckpt),
                 "--out", str(d / "q.nnq")]) == 0
    assert main(["finetune", "--ckpt", str(d / "q.nnq"), "--out", str(d / "ft.nnq")]) == 0
    return d


def test_stepwise_flow_artifacts(flow):
    for name in ("base.nnq", "tw.json", "pw.json", "pw.jsonl", "pw_sawb.json", "q.nnq", "ft.nnq"):
        assert (flow / name).is_file(), name
    pol = json.loads((flow / "pw.json").read_text())
    assert pol["target"] == "weights"
    assert len((flow / "pw.jsonl").read_text().splitlines()) == 6


def test_landscape_command(flow, capsys):
    out = flow / "scape.json"
    assert main(["landscape", "--ckpt", str(flow / "base.nnq"), "--trace", str(flow / "tw.json"),
                 "--channel", "max", "--radius", "0.5", "--steps", "3", "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["grid"]) == 9


def test_run_report_plot(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["w_comp"] >= 32 / 3 - 1e-9
    run = tmp_path / "run"
    assert main(["report", "--run", str(run)]) == 0
    assert "qbn" in json.loads(capsys.readouterr().out)
    assert main(["plot", "--run", str(run)]) == 0
    assert (run / "plots" / "qbn_weights.svg").is_file()


def test_exit_code_bad_config(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nmodel = resnet\n")
    assert main(["train-baseline", "--config", str(bad)]) == 2


def test_exit_code_over_budget_policy(flow, tmp_path):
    pol = json.loads((flow / "pw.json").read_text())
    pol["budget_bits"] = 1
    path = tmp_path / "over.json"
    path.write_text(json.dumps(pol))
    assert main(["quantize", "--policy", str(path), "--ckpt", str(flow / "base.nnq"),
                 "--out", str(tmp_path / "x.nnq")]) == 3


def test_exit_code_corrupt_or_missing_checkpoint(flow, tmp_path):
    broken = tmp_path / "broken.nnq"
    broken.write_bytes((flow / "base.nnq").read_bytes()[:40])
    assert main(["finetune", "--ckpt", str(broken)]) == 4
    assert main(["finetune", "--ckpt", str(tmp_path / "nope.nnq")]) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_divergence(tmp_path):
    cfg = write_cfg(tmp_path, epochs=1, lr=1e6)
    assert main(["train-baseline", "--config", str(cfg), "--out", str(tmp_path / "b.nnq")]) == 5


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "cwhawq.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "landscape" in res.stdout
    res = subprocess.run([sys.executable, "-m", "cwhawq.cli", "report"], capture_output=True, text=True)
    assert res.returncode == 2
