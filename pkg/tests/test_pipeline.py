import json
import shutil

import numpy as np
import pytest

from cwhawq import checkpoint
from cwhawq.config import RunConfig, dump_config, load_config, parse_config
from cwhawq.errors import BudgetInfeasible, ConfigError, CWHawqError
from cwhawq.hessian import TraceReport
from cwhawq.pipeline import (config_from_extra, load_report, loss_landscape, prepare_data,
                             run_two_step, train_baseline)

from conftest import FULL_MNIST, ROOT


def small_cfg(tmp_path, **kw):
    base = dict(output_dir=str(tmp_path), epochs=5, episodes=10, probe_m=5, probe_n=5,
                reward_train=400, reward_eval=200)
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    report = run_two_step(small_cfg(out))
    return out, report


def test_config_parsing(tmp_path):
    text = "[run]\nmodel = mlp-s\nseed = 4\n[budget]\nbudget_wcomp = 8\n[search]\ncompare_uniform = no\n"
    cfg = parse_config(text)
    assert (cfg.seed, cfg.budget_wcomp, cfg.compare_uniform) == (4, 8.0, False)
    assert parse_config(dump_config(cfg)) == cfg
    for bad in ("[run]\nmodel = resnet\n", "[nope]\nx = 1\n", "[run]\nfoo = 1\n",
                "[budget]\nbudget_wcomp = 20\n", "[budget]\nbudget_abits = 1\n",
                "[run]\nseed = abc\n", "[run]\ndataset = mnist\nmnist_dir = /nonexistent\n",
                "[run]\nmodel = convnet-s\n", "no section"):
        with pytest.raises(ConfigError):
            parse_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_shipped_configs_load():
    cfg = load_config(ROOT / "configs" / "convnet_mnist.ini")
    assert cfg.model == "convnet-s" and cfg.mnist_dir.endswith("mnist-5k")
    assert load_config(ROOT / "configs" / "mlp_synthetic.ini").model == "mlp-s"


def test_baseline_mlp_synthetic(tmp_path):
    cfg = small_cfg(tmp_path, epochs=10)
    _, top1 = train_baseline(cfg, prepare_data(cfg))
    assert top1 >= 0.95


def test_zero_epochs_is_initialisation(tmp_path):
    cfg = small_cfg(tmp_path, epochs=0)
    data = prepare_data(cfg)
    model, top1 = train_baseline(cfg, data)
    again, _ = train_baseline(cfg, data)
    assert np.array_equal(model.flat_params(), again.flat_params())
    assert abs(top1 - 1 / cfg.classes) <= 0.1


def test_report_identities(small_run):
    out, report = small_run
    assert report["w_comp"] == pytest.approx(32 / report["avg_w_bits"], rel=0, abs=1e-12)
    assert report["avg_w_bits"] <= 32 / 10.666666666666666 + 1e-12
    assert report["avg_a_bits"] <= 4.0
    for name in ("baseline.nnq", "phase1.nnq", "final.nnq", "policy_weights.json",
                 "policy_activations.json", "search_weights.jsonl", "trace_weights.json",
                 "trace_activations.json", "sawb.json", "landscape.json", "config.ini"):
        assert (out / name).is_file(), name
    assert len((out / "search_weights.jsonl").read_text().splitlines()) == 10
    assert load_report(out)["final_top1"] == report["final_top1"]


def test_checkpoints_carry_config(small_run):
    out, _ = small_run
    model, extra = checkpoint.load(out / "final.nnq")
    assert extra["stage"] == "final" and model.weight_quant and model.act_bits
    cfg = config_from_extra(extra)
    assert cfg.output_dir == str(out)


def test_full_run_determinism(small_run, tmp_path):
    out, _ = small_run
    run_two_step(small_cfg(out.parent / "again"))
    again = out.parent / "again"
    for name in ("policy_weights.json", "policy_activations.json", "search_weights.jsonl",
                 "landscape.json", "trace_weights.json"):
        assert (again / name).read_bytes() == (out / name).read_bytes(), name
    # checkpoints embed the output directory, so compare their tensors
    a_model, _ = checkpoint.load(out / "final.nnq")
    b_model, _ = checkpoint.load(again / "final.nnq")
    assert np.array_equal(a_model.flat_params(), b_model.flat_params())
    a = json.loads((out / "report.json").read_text())
    b = json.loads((again / "report.json").read_text())
    a["config"].pop("output_dir"), b["config"].pop("output_dir")
    assert a == b


def test_generous_budgets_near_lossless(tmp_path):
    cfg = small_cfg(tmp_path, budget_wcomp=4.0, budget_abits=8.0, epochs=10)
    report = run_two_step(cfg, landscape=False)
    # the uniform comparator at these budgets is the all-8-bit two-step run
    assert (report["uniform"]["w_bits"], report["uniform"]["a_bits"]) == (8, 8)
    assert abs(report["uniform"]["top1"] - report["baseline_top1"]) <= 0.005
    assert report["avg_w_bits"] <= 8.0 and report["avg_a_bits"] <= 8.0


def test_load_report_revalidates(small_run, tmp_path):
    out, _ = small_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    pol = json.loads((copy / "policy_weights.json").read_text())
    pol["budget_bits"] = 10
    (copy / "policy_weights.json").write_text(json.dumps(pol))
    with pytest.raises(BudgetInfeasible):
        load_report(copy)
    (copy / "policy_weights.json").unlink()
    with pytest.raises(CWHawqError):
        load_report(copy)


def test_landscape_contract(small_run):
    out, _ = small_run
    model, extra = checkpoint.load(out / "phase1.nnq")
    data = prepare_data(config_from_extra(extra))
    rep = TraceReport.from_json((out / "trace_weights.json").read_text())
    flat = loss_landscape(model, data, rep, "max", radius=0.0, steps=3)
    assert {g[2] for g in flat["grid"]} == {flat["base_loss"]}
    scape = loss_landscape(model, data, rep, "min", radius=0.5, steps=5)
    coords = {(g[0], g[1]) for g in scape["grid"]}
    assert (-0.5, -0.5) in coords and (0.5, 0.5) in coords and len(coords) == 25
    assert loss_landscape(model, data, rep, (0, 3), 0.5, 3)["channel"] == 3
    with pytest.raises(CWHawqError):
        loss_landscape(model, data, rep, (0, 999), 0.5, 3)


@pytest.mark.skipif(FULL_MNIST is None, reason="set CWHAWQ_MNIST_DIR to the canonical MNIST files")
def test_convnet_baseline_full_mnist(tmp_path):
    cfg = load_config(ROOT / "configs" / "convnet_mnist.ini")
    cfg.mnist_dir, cfg.output_dir = str(FULL_MNIST), str(tmp_path)
    _, top1 = train_baseline(cfg.validate(), prepare_data(cfg))
    assert top1 >= 0.97
