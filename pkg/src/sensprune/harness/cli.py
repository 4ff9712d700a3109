"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 training failure, 1 anything else raised by the engine.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..errors import ConfigError, SensPruneError
from ..nn.checkpoint import load_checkpoint, save_checkpoint
from ..nn.spec import ModelSpec
from ..nn.train import evaluate
from ..planner import GroupAssignment, group_layers, summary_csv
from ..sensitivity import SensitivityReport
from .config import ExperimentConfig, load_config, parse_config
from .pipeline import describe, load_data, run_pipeline, run_prune, run_sensitivity, train_base, write_json

# (flag, config section, field, type)
OVERRIDES = [
    ("--model", None, "model", str),
    ("--data", "dataset", "path", str),
    ("--dataset", "dataset", "kind", str),
    ("--train-subset", "dataset", "train_subset", int),
    ("--test-subset", "dataset", "test_subset", int),
    ("--epochs", "train", "epochs", int),
    ("--batch-size", "train", "batch_size", int),
    ("--rounds", "hierarchy", "N", int),
    ("--samples", "hierarchy", "T", int),
    ("--retrain-epochs", "hierarchy", "retrain_epochs_struct", int),
    ("--threshold-frac", "planner", "threshold_frac", float),
    ("--ratio-step", "planner", "ratio_step", float),
    ("--target-overall", "planner", "target_overall", float),
    ("--strategy", "planner", "strategy", str),
    ("--workers", None, "workers", int),
    ("--output-dir", None, "output_dir", str),
]


def _add_config_flags(p, seed_required=False):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, required=seed_required, help="master seed (overrides config)")
    for flag, _, _, typ in OVERRIDES:
        p.add_argument(flag, type=typ, default=None)


def _config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        data = load_config(args.config, check_paths=False).model_dump(mode="json")
    for flag, section, name, _ in OVERRIDES:
        value = getattr(args, flag[2:].replace("-", "_"))
        if value is None:
            continue
        if section is None:
            data[name] = value
        else:
            data.setdefault(section, {})[name] = value
    if args.seed is not None:
        data["master_seed"] = args.seed
    return parse_config(data, source=args.config or "<flags>")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc


def _base_net(args):
    meta = _read_json(Path(args.checkpoint).with_suffix(".json"))
    spec = ModelSpec.from_dict(meta["spec"])
    return load_checkpoint(args.checkpoint, spec)


def cmd_train(args):
    cfg = _config(args)
    data, stats = load_data(cfg)
    net, train_log = train_base(cfg, data, cfg.build_spec(), cfg.master_seed)
    acc = evaluate(net, data.test)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out)
    write_json(out.with_suffix(".json"), {"seed": cfg.master_seed, "normalization": stats, "train_log": train_log,
                                          "accuracy": acc, "spec": net.spec.to_dict()})
    print(f"test accuracy {acc:.4f}; checkpoint {out}")


def cmd_sensitivity(args):
    cfg = _config(args)
    data, _ = load_data(cfg)
    record, report = run_sensitivity(cfg, data, _base_net(args), cfg.master_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "rounds.json", record.to_dict())
    (out / "curves.csv").write_text(record.to_csv([s.name for s in report.scores]))
    write_json(out / "sensitivity.json", report.to_dict())
    for s in report.scores:
        print(f"{s.name:<8} f_r={s.f_r:+.3e} f_s={s.f_s:+.3e} S={s.S:+.3e} N'={s.rounds_kept}")


def cmd_group(args):
    report = SensitivityReport.from_dict(_read_json(args.report))
    groups = group_layers(report, args.threshold_frac)
    if args.out:
        write_json(Path(args.out), groups.to_dict())
    names = {s.layer: s.name for s in report.scores}
    for k, g in enumerate(groups.groups):
        print(f"G{k + 1}: " + ", ".join(names[i] for i in g))


def cmd_prune(args):
    cfg = _config(args)
    data, _ = load_data(cfg)
    net = _base_net(args)
    groups = GroupAssignment.from_dict(_read_json(args.groups))
    result = run_prune(cfg, data, net, groups, cfg.master_seed)
    groups.ratios = result.ratios
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "iterations.jsonl").write_text(result.log_jsonl())
    (out / "mask.json").write_text(result.mask.to_json() + "\n")
    write_json(out / "pruned_spec.json", result.net.spec.to_dict())
    save_checkpoint(result.net, out / "pruned.ckpt")
    (out / "summary.csv").write_text(summary_csv(result, groups, net.spec))
    print((out / "summary.csv").read_text(), end="")
    if not result.reached:
        print(f"target {cfg.planner.target_overall} not reached", file=sys.stderr)


def cmd_report(args):
    print(describe(args.run))


def cmd_pipeline(args):
    cfg = _config(args)
    res = run_pipeline(cfg, seed=args.seed)
    print(describe(res.out))
    if not res.reached:
        print(f"target {cfg.planner.target_overall} not reached", file=sys.stderr)


def build_parser():
    ap = argparse.ArgumentParser(prog="sensprune", description="Sensitiveness-guided structured pruning.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a base model")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sensitivity", help="hierarchy pruning on a trained checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("group", help="group layers of a sensitivity report")
    p.add_argument("--report", required=True)
    p.add_argument("--threshold-frac", type=float, default=0.2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("prune", help="iterative group pruning")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="summarise a pipeline run directory")
    p.add_argument("run")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="all stages end to end")
    _add_config_flags(p, seed_required=True)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors are configuration errors
        return 0 if exc.code == 0 else ConfigError.exit_code
    try:
        args.func(args)
    except SensPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
