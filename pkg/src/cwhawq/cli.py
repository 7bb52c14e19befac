"""Command-line entry point ``cwhawq``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, pipeline
from .alloc import QuantPolicy, sort_channels
from .config import load_config
from .ddpg import run_search
from .errors import ConfigError, CWHawqError, DataFormatError
from .hessian import ProbeConfig, TraceReport, estimate_traces
from .plots import emit_plots

log = logging.getLogger("cwhawq")


def _load_ckpt(path, config=None):
    model, extra = checkpoint.load(path)
    cfg = load_config(config) if config else pipeline.config_from_extra(extra)
    return model, extra, cfg


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    print(path)


def cmd_train_baseline(args):
    cfg = load_config(args.config)
    data = pipeline.prepare_data(cfg)
    model, top1 = pipeline.train_baseline(cfg, data)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "baseline.nnq"
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(model, out, pipeline.checkpoint_extra(cfg, data, top1, "baseline"))
    print(json.dumps({"checkpoint": str(out), "top1": top1}))


def cmd_trace(args):
    model, _, cfg = _load_ckpt(args.ckpt, args.config)
    data = pipeline.prepare_data(cfg)
    pc = ProbeConfig(m=args.m, N=args.m, seed=args.seed, batch_size=cfg.probe_batch)
    report = estimate_traces(model, data, args.target, args.granularity, pc)
    _write(args.out, report.to_json())


def cmd_search(args):
    model, _, cfg = _load_ckpt(args.ckpt, args.config)
    report = TraceReport.from_json(Path(args.trace).read_text())
    if report.target != args.phase:
        raise ConfigError(f"trace target {report.target!r} does not match phase {args.phase!r}")
    if args.phase == "weights":
        if args.budget_wcomp is None:
            raise ConfigError("weights phase needs --budget-wcomp")
        cfg.budget_wcomp = args.budget_wcomp
    else:
        if args.budget_abits is None:
            raise ConfigError("activations phase needs --budget-abits")
        cfg.budget_abits = args.budget_abits
    cfg.episodes, cfg.seed = args.episodes, args.seed
    cfg.validate()
    data = pipeline.prepare_data(cfg)
    coeffs = pipeline.calibrate_sawb(cfg)
    _, result = pipeline.search_phase(model, data, cfg, args.phase, coeffs,
                                      pipeline.calib_inputs(cfg, data), report=report)
    out = Path(args.out or f"policy_{args.phase}.json")
    _write(out, result.best_policy.to_json())
    _write(out.with_suffix(".jsonl"), result.log_jsonl())
    _write(out.with_name(out.stem + "_sawb.json"), coeffs.to_json())


def cmd_quantize(args):
    model, extra, cfg = _load_ckpt(args.ckpt, args.config)
    policy = QuantPolicy.from_json(Path(args.policy).read_text())
    pipeline.check_budget(policy)
    data = pipeline.prepare_data(cfg)
    coeffs = pipeline.calibrate_sawb(cfg) if policy.target == "weights" else None
    q = pipeline.quantize_model(model, policy, coeffs, pipeline.calib_inputs(cfg, data))
    top1 = pipeline.evaluate(q, data.eval_x, data.eval_y)
    checkpoint.save(q, args.out, pipeline.checkpoint_extra(cfg, data, top1, "quantized"))
    print(json.dumps({"checkpoint": args.out, "top1": top1}))


def cmd_finetune(args):
    model, extra, cfg = _load_ckpt(args.ckpt, args.config)
    data = pipeline.prepare_data(cfg)
    model, top1 = pipeline.finetune(model, data, cfg, args.epochs, "cli")
    out = args.out or args.ckpt
    checkpoint.save(model, out, pipeline.checkpoint_extra(cfg, data, top1, "finetuned"))
    print(json.dumps({"checkpoint": str(out), "top1": top1}))


def cmd_report(args):
    report = pipeline.load_report(args.run)
    keys = ("baseline_top1", "final_top1", "top1_drop", "avg_w_bits", "avg_a_bits", "w_comp", "size_mb")
    summary = {k: report[k] for k in keys}
    summary["qbn"] = report["qbn"]
    if "uniform" in report:
        summary["uniform"] = report["uniform"]
    print(json.dumps(summary, indent=1, sort_keys=True))


def cmd_plot(args):
    for p in emit_plots(args.run):
        print(p)


def cmd_landscape(args):
    model, _, cfg = _load_ckpt(args.ckpt, args.config)
    report = TraceReport.from_json(Path(args.trace).read_text())
    data = pipeline.prepare_data(cfg)
    scape = pipeline.loss_landscape(model, data, report, args.channel, args.radius, args.steps, args.seed)
    text = json.dumps(scape, indent=1, sort_keys=True) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        print(json.dumps({k: v for k, v in scape.items() if k != "grid"}, sort_keys=True))


def cmd_run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir:
        cfg.output_dir = args.output_dir
    report = pipeline.run_two_step(cfg)
    emit_plots(cfg.output_dir)
    print(json.dumps({k: report[k] for k in ("baseline_top1", "final_top1", "avg_w_bits",
                                             "avg_a_bits", "w_comp")}, sort_keys=True))


def build_parser():
    p = argparse.ArgumentParser(prog="cwhawq", description="Channel-wise Hessian-aware mixed-precision quantization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-baseline", help="train the float baseline")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_baseline)

    s = sub.add_parser("trace", help="Hutchinson trace estimates")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--target", choices=("weights", "activations"), required=True)
    s.add_argument("--granularity", choices=("layer", "channel"), default="channel")
    s.add_argument("--m", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("search", help="DDPG bit-ratio search for one phase")
    s.add_argument("--trace", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--phase", choices=("weights", "activations"), required=True)
    s.add_argument("--budget-wcomp", type=float)
    s.add_argument("--budget-abits", type=float)
    s.add_argument("--episodes", type=int, default=120)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("quantize", help="install a policy's fake quantizers")
    s.add_argument("--policy", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("finetune", help="fine-tune a checkpoint at the reduced lr")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("report", help="summarise and re-validate a run")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("plot", help="emit SVG figures and CSV twins")
    s.add_argument("--run", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("landscape", help="loss surface around one channel")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--channel", choices=("min", "max"), required=True)
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--steps", type=int, default=11)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--config")
    s.set_defaults(func=cmd_landscape)

    s = sub.add_parser("run", help="baseline plus the two-step search, report and plots")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CWHawqError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DataFormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
