"""End-to-end run: base training, hierarchy pruning, grouping, iterative
pruning. Every artifact except ``meta.json`` is a pure function of the
config and the master seed."""
from __future__ import annotations

import contextlib
import json
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import SensPruneError
from ..nn.checkpoint import load_checkpoint, net_digest, save_checkpoint
from ..nn.network import Network
from ..nn.spec import ModelSpec, count_macs, count_params
from ..nn.train import evaluate, train
from ..planner import GroupAssignment, group_layers, iterative_prune, summary_csv
from ..sensitivity import SensitivityReport, Splits, derive_seed, run_hierarchy
from ..surgery import PruneMask, SelectionStrategy, apply_mask
from .config import ExperimentConfig
from .data import load_cifar, load_mnist

# derived-seed tags for the stages that are not per (layer, round)
_INIT, _BASE, _PLAN = 1_000_001, 1_000_002, 1_000_003


def load_data(cfg: ExperimentConfig):
    d = cfg.dataset
    kw = dict(train_subset=d.train_subset, test_subset=d.test_subset, seed=d.subset_seed, with_stats=True)
    if d.kind == "mnist":
        train_split, test_split, stats = load_mnist(d.path, **kw)
    else:
        train_split, test_split, stats = load_cifar(d.path, 10 if d.kind == "cifar10" else 100, **kw)
    return Splits(train_split, test_split), stats


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@contextlib.contextmanager
def stage(name, timings):
    start = time.perf_counter()
    try:
        yield
    except SensPruneError as exc:
        exc.args = (f"stage {name}: {exc}",)
        raise
    finally:
        timings[name] = round(time.perf_counter() - start, 3)


def train_base(cfg: ExperimentConfig, data: Splits, spec: ModelSpec, seed: int):
    net = Network.init(spec, seed=derive_seed(seed, _INIT))
    log = train(net, data.train, cfg.train_config(derive_seed(seed, _BASE)))
    return net, log


def run_sensitivity(cfg: ExperimentConfig, data: Splits, net: Network, seed: int):
    return run_hierarchy(net, data, cfg.hierarchy_config(), seed, workers=cfg.workers)


def run_prune(cfg: ExperimentConfig, data: Splits, net: Network, groups: GroupAssignment, seed: int):
    p = cfg.planner
    plan_seed = derive_seed(seed, _PLAN)
    return iterative_prune(net, groups, data, cfg.planner_train_config(plan_seed), ratio_step=p.ratio_step,
                           target_overall=p.target_overall, init_ratio=p.init_ratio,
                           strategy=SelectionStrategy(p.strategy, plan_seed), seed=plan_seed)


@dataclass
class PipelineResult:
    out: Path
    report: SensitivityReport
    groups: GroupAssignment
    mask: PruneMask
    base_accuracy: float
    final_accuracy: float
    reached: bool


def run_pipeline(cfg: ExperimentConfig, seed=None, out=None) -> PipelineResult:
    """Run every stage, writing artifacts as each one finishes."""
    seed = cfg.master_seed if seed is None else seed
    out = Path(out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    meta = {"started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "version": __version__,
            "python": platform.python_version(), "numpy": np.__version__, "timings": timings}
    try:
        (out / "config.yaml").write_text(cfg.to_yaml())
        with stage("data", timings):
            data, stats = load_data(cfg)
            spec = cfg.build_spec()
        with stage("train", timings):
            net, log = train_base(cfg, data, spec, seed)
            base_acc = evaluate(net, data.test)
            save_checkpoint(net, out / "base.ckpt")
            write_json(out / "base.json", {"seed": seed, "normalization": stats, "train_log": log,
                                           "accuracy": base_acc, "spec": spec.to_dict(),
                                           "digest": net_digest(net)})
        with stage("sensitivity", timings):
            record, report = run_sensitivity(cfg, data, net, seed)
            write_json(out / "rounds.json", record.to_dict())
            (out / "curves.csv").write_text(record.to_csv([s.name for s in report.scores]))
            write_json(out / "sensitivity.json", report.to_dict())
        with stage("group", timings):
            groups = group_layers(report, cfg.planner.threshold_frac)
            write_json(out / "groups.json", groups.to_dict())
        with stage("prune", timings):
            result = run_prune(cfg, data, net, groups, seed)
            groups.ratios = result.ratios
            write_json(out / "groups.json", groups.to_dict())
            (out / "iterations.jsonl").write_text(result.log_jsonl())
            (out / "mask.json").write_text(result.mask.to_json() + "\n")
            write_json(out / "pruned_spec.json", result.net.spec.to_dict())
            save_checkpoint(result.net, out / "pruned.ckpt")
            (out / "summary.csv").write_text(summary_csv(result, groups, spec))
    finally:
        meta["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        write_json(out / "meta.json", meta)
    return PipelineResult(out, report, groups, result.mask, base_acc, result.accuracy, result.reached)


def load_pruned(run_dir) -> Network:
    """Rebuild the pruned network of a finished run."""
    run_dir = Path(run_dir)
    base = json.loads((run_dir / "base.json").read_text())
    spec = ModelSpec.from_dict(base["spec"])
    mask = PruneMask.from_json((run_dir / "mask.json").read_text())
    net = apply_mask(Network.init(spec), mask)
    return load_checkpoint(run_dir / "pruned.ckpt", net.spec, kept=net.kept)


def describe(run_dir) -> str:
    """Plain-text report of a finished run."""
    run_dir = Path(run_dir)
    base = json.loads((run_dir / "base.json").read_text())
    spec = ModelSpec.from_dict(base["spec"])
    report = SensitivityReport.from_dict(json.loads((run_dir / "sensitivity.json").read_text()))
    groups = GroupAssignment.from_dict(json.loads((run_dir / "groups.json").read_text()))
    lines = [f"model {spec.name}: {count_params(spec)} params, {count_macs(spec)} MACs, "
             f"base accuracy {base['accuracy']:.4f}", "", f"{'layer':<8}{'f_r':>12}{'f_s':>12}{'S':>12}  N'"]
    for s in report.scores:
        lines.append(f"{s.name:<8}{s.f_r:>12.3e}{s.f_s:>12.3e}{s.S:>12.3e}  {s.rounds_kept}")
    lines.append("")
    for k, g in enumerate(groups.groups):
        names = ", ".join(spec.layer_name(i) for i in g)
        lines.append(f"group {k}: ratio {groups.ratios[k]:.2f}  [{names}]")
    summary = run_dir / "summary.csv"
    if summary.exists():
        lines += ["", summary.read_text().rstrip()]
    return "\n".join(lines)
