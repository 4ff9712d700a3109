"""Sensitiveness grouping and group-wise iterative pruning."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, InvalidRequestError
from .nn.network import Network
from .nn.spec import ModelSpec, count_macs, count_params
from .nn.train import TrainConfig, evaluate, train
from .sensitivity import SensitivityReport, Splits, derive_seed, removal_targets
from .surgery import PruneMask, SelectionStrategy, remove_filters, select_filters

DEFAULT_THRESHOLD_FRAC = 0.2


@dataclass
class GroupAssignment:
    """Groups of layer indices, least sensitive first."""

    groups: list
    mean_S: list
    ratios: list = field(default_factory=list)

    def __post_init__(self):
        self.groups = [sorted(int(i) for i in g) for g in self.groups]
        if not self.ratios:
            self.ratios = [0.0] * len(self.groups)

    @property
    def K(self):
        return len(self.groups)

    def group_of(self, layer):
        for k, g in enumerate(self.groups):
            if layer in g:
                return k
        raise KeyError(layer)

    def to_dict(self):
        return {"groups": self.groups, "mean_S": self.mean_S, "ratios": self.ratios}

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["groups"], d["mean_S"], d.get("ratios") or [])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed group assignment: {exc}") from exc


def group_layers(report: SensitivityReport, threshold_frac=DEFAULT_THRESHOLD_FRAC) -> GroupAssignment:
    """Split the descending-sorted scores wherever consecutive scores differ
    by more than ``threshold_frac`` of the score range."""
    if not 0 < threshold_frac < 1:
        raise ConfigError(f"threshold_frac must lie in (0, 1), got {threshold_frac}")
    if not report.scores:
        raise InvalidRequestError("empty sensitivity report")
    layers = np.array([s.layer for s in report.scores])
    S = np.array([s.S for s in report.scores], dtype=np.float64)
    order = np.argsort(-S, kind="stable")
    limit = threshold_frac * (S.max() - S.min())
    groups = [[order[0]]]
    for prev, cur in zip(order, order[1:]):
        if S[prev] - S[cur] > limit:
            groups.append([])
        groups[-1].append(cur)
    groups.reverse()
    return GroupAssignment([layers[g].tolist() for g in groups], [float(S[g].mean()) for g in groups])


def overall_ratio(mask: PruneMask, spec: ModelSpec) -> float:
    """Removed filters over all prunable filters of the unpruned ``spec``."""
    total = sum(spec.layers[i].out_ch for i in spec.prunable)
    return mask.count() / total


@dataclass
class IterationRecord:
    iteration: int
    group: int
    ratios: list
    p_r: float
    p_best: float
    decision: str
    overall: float
    vs_baseline: float


@dataclass
class PruneResult:
    net: Network
    mask: PruneMask
    ratios: list
    log: list
    reached: bool
    baseline: float
    accuracy: float

    def log_jsonl(self) -> str:
        return "".join(json.dumps(vars(r), sort_keys=True) + "\n" for r in self.log)


def _extend(net: Network, base: ModelSpec, layers, ratio, strategy, seed_keys):
    """Grow each layer's removal up to round(ratio * N_l) original filters."""
    for layer in layers:
        n0 = base.layers[layer].out_ch
        want = removal_targets(n0, [ratio])[0]
        extra = want - (n0 - len(net.kept[layer]))
        if extra > 0:
            strat = strategy
            if strategy.kind == "random":
                strat = SelectionStrategy("random", derive_seed(*seed_keys, layer))
            net = remove_filters(net, layer, select_filters(net, layer, extra, strat))
    return net


def iterative_prune(net: Network, groups: GroupAssignment, data: Splits, cfg: TrainConfig,
                    ratio_step=0.05, target_overall=0.5, init_ratio=0.10,
                    strategy: SelectionStrategy = SelectionStrategy("l1_norm"),
                    fit_and_score: Optional[Callable] = None, seed=0) -> PruneResult:
    """Prune groups least sensitive first, raising each group's ratio while
    the retrained accuracy keeps beating the group's best.

    ``fit_and_score(candidate) -> (trained, accuracy)`` replaces the default
    retrain-then-evaluate step.
    """
    if not 0 < ratio_step < 1:
        raise ConfigError(f"ratio_step must lie in (0, 1), got {ratio_step}")
    if not 0 <= target_overall < 1:
        raise ConfigError(f"target_overall must lie in [0, 1), got {target_overall}")
    base = net.spec
    if fit_and_score is None:
        def fit_and_score(candidate):
            train(candidate, data.train, cfg)
            return candidate, evaluate(candidate, data.test)
    baseline = evaluate(net, data.test)
    accepted = net.copy()
    accepted_acc = baseline
    ratios = [0.0] * groups.K
    log = []
    done = overall_ratio(PruneMask.of(accepted, base), base) >= target_overall
    it = 0
    for k in range(groups.K):
        if done:
            break
        p_best = 0.0
        r = init_ratio
        while True:
            before = PruneMask.of(accepted, base).count()
            candidate = _extend(accepted.copy(), base, groups.groups[k], r, strategy, (seed, it))
            # small layers may need several steps before one more filter goes
            while PruneMask.of(candidate, base).count() == before and r + ratio_step < 1:
                r = round(r + ratio_step, 10)
                candidate = _extend(accepted.copy(), base, groups.groups[k], r, strategy, (seed, it))
            if PruneMask.of(candidate, base).count() == before:
                break  # every layer of the group is down to one filter
            trained, p_r = fit_and_score(candidate)
            trial = list(ratios)
            trial[k] = r
            ok = p_r > p_best
            if ok:
                accepted, accepted_acc, ratios, p_best = trained, p_r, trial, p_r
            overall = overall_ratio(PruneMask.of(accepted, base), base)
            log.append(IterationRecord(it, k, trial, float(p_r), float(p_best), "accept" if ok else "advance",
                                       overall, float(p_r - baseline)))
            it += 1
            if overall >= target_overall:
                done = True
                break
            if not ok:
                break
            r = round(r + ratio_step, 10)
    mask = PruneMask.of(accepted, base)
    return PruneResult(accepted, mask, ratios, log, overall_ratio(mask, base) >= target_overall,
                       baseline, accepted_acc)


def summary_csv(result: PruneResult, groups: GroupAssignment, base: ModelSpec) -> str:
    """One row per group, then base and pruned totals."""
    spec = result.net.spec
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["group", "final_ratio", "filters_removed", "params", "macs", "accuracy"])
    macs_by_layer = _conv_macs(spec)
    for k, g in enumerate(groups.groups):
        removed = sum(result.mask.count(i) for i in g)
        params = sum(_conv_params(spec.layers[i]) for i in g)
        macs = sum(macs_by_layer[i] for i in g)
        w.writerow([k, f"{result.ratios[k]:.4f}", removed, params, macs, ""])
    w.writerow(["base", "0.0000", 0, count_params(base), count_macs(base), repr(result.baseline)])
    w.writerow(["pruned", f"{overall_ratio(result.mask, base):.4f}", result.mask.count(), count_params(spec),
                count_macs(spec), repr(result.accuracy)])
    return buf.getvalue()


def _conv_params(layer):
    return layer.out_ch * layer.in_ch * layer.kernel ** 2 + (layer.out_ch if layer.bias else 0)


def _conv_macs(spec: ModelSpec):
    out = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "conv2d":
            _, ho, wo = spec.shapes[i]
            out[i] = layer.out_ch * layer.in_ch * layer.kernel ** 2 * ho * wo
    return out
