"""Layer sensitiveness from parameter freezing and progressive filter removal.

Each (layer, round) job clones the trained network twice: once to retrain
with the layer frozen (the ratio-0 sample), once to carry through the
ratio set, removing random filters and retraining at every step. The
accuracy grid is reduced to per-round scores, fluctuating rounds are
dropped by correlation with the flattest round, and the rest are averaged.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, InvalidRequestError, SensPruneError
from .nn.network import Network
from .nn.train import DatasetSplit, TrainConfig, evaluate, train
from .surgery import SelectionStrategy, clone, freeze_layer, remove_filters, select_filters

SCHEMA_VERSION = 1

# purpose tags mixed into derived seeds
_TRAIN, _SELECT = 0, 1


class Splits(NamedTuple):
    train: DatasetSplit
    test: DatasetSplit


@dataclass(frozen=True)
class HierarchyConfig:
    r_max: float = 0.96
    T: int = 4
    N: int = 10
    lam: float = 10.0
    gamma: float = 2 / 3
    rho_min: float = 0.6
    retrain_epochs_struct: int = 3
    reliability_epochs: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0 < self.r_max < 1:
            raise ConfigError(f"r_max must lie in (0, 1), got {self.r_max}")
        if self.lam <= 0:
            raise ConfigError(f"lam must be positive, got {self.lam}")
        if self.T < 1 or self.N < 1:
            raise ConfigError(f"T and N must be >= 1, got T={self.T} N={self.N}")
        if self.retrain_epochs_struct < 0 or self.reliability_epochs < 0:
            raise ConfigError("retrain epochs must be >= 0")

    def retrain_config(self, epochs, seed):
        """Fine-tuning runs at the schedule's final learning rate."""
        return replace(self.train, epochs=epochs, lr_schedule=[(0, self.train.final_lr)], seed=seed)


def derive_seed(*keys) -> int:
    """64-bit seed hashed from integer keys; equal keys give equal seeds."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


def ratio_set(cfg: HierarchyConfig):
    step = cfg.r_max / cfg.T
    return [0.0] + [step * i for i in range(1, cfg.T)] + [cfg.r_max]


def removal_targets(n_filters, ratios):
    """Cumulative filter counts removed at each ratio (min 1 for r > 0,
    at most n_filters - 1)."""
    out = []
    for r in ratios:
        k = int(round(r * n_filters))
        if r > 0:
            k = max(k, 1)
        out.append(min(k, n_filters - 1))
    return out


def _frozen_group(net: Network, layer):
    # the conv plus the batch norm right behind it
    idx = [layer]
    for j in net.spec.consumer_of(layer)[1][1:]:
        if net.spec.layers[j].kind == "batchnorm":
            idx.append(j)
    return idx


def reliability_accuracy(net: Network, layer, data: Splits, cfg: HierarchyConfig, seed=0) -> float:
    work = clone(net)
    for j in _frozen_group(work, layer):
        freeze_layer(work, j)
    train(work, data.train, cfg.retrain_config(cfg.reliability_epochs, seed))
    return evaluate(work, data.test)


def measure_reliability(net: Network, layer, data: Splits, cfg: HierarchyConfig, p_o, seed=0):
    """(P_0, f^r) with f^r = P_0 - P_O."""
    p0 = reliability_accuracy(net, layer, data, cfg, seed)
    return p0, p0 - p_o


def measure_stability_curve(net: Network, layer, data: Splits, cfg: HierarchyConfig, round_seed):
    """Accuracies over ``ratio_set(cfg)``. Entry 0 is the frozen-layer
    retrain; later entries carry one pruned clone forward, removing the
    extra filters for each ratio at random and retraining."""
    if layer not in net.spec.prunable:
        raise SensPruneError(f"layer {layer} is not prunable")
    keys = list(round_seed) if isinstance(round_seed, (tuple, list)) else [round_seed]
    ratios = ratio_set(cfg)
    targets = removal_targets(net.spec.layers[layer].out_ch, ratios)
    curve = [reliability_accuracy(net, layer, data, cfg, derive_seed(*keys, 0, _TRAIN))]
    work = clone(net)
    for i in range(1, len(ratios)):
        extra = targets[i] - targets[i - 1]
        try:
            if extra:
                pick = select_filters(work, layer, extra, SelectionStrategy("random", derive_seed(*keys, i, _SELECT)))
                work = remove_filters(work, layer, pick)
            train(work, data.train, cfg.retrain_config(cfg.retrain_epochs_struct, derive_seed(*keys, i, _TRAIN)))
        except SensPruneError as exc:
            exc.args = (f"ratio {ratios[i]:.3f}: {exc}",)
            raise
        curve.append(evaluate(work, data.test))
    return curve


def stability(p0, pmax, cfg: HierarchyConfig) -> float:
    return (p0 - pmax) / (cfg.lam * cfg.r_max)


def sensitiveness(f_r, f_s, gamma) -> float:
    if not 0 < gamma < 1:
        raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
    return gamma * f_r + (1 - gamma) * f_s


def round_variance(curve) -> float:
    a = np.asarray(curve, dtype=np.float64)
    return float(np.mean((a - a.mean()) ** 2))


def pearson(a, b) -> float:
    """Sample Pearson correlation; 0 when either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidRequestError(f"pearson needs equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise InvalidRequestError("pearson needs at least 2 samples")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt((da * da).sum()), np.sqrt((db * db).sum())
    if sa == 0 or sb == 0:
        return 0.0
    return float(np.clip((da * db).sum() / (sa * sb), -1.0, 1.0))


@dataclass
class RoundRecord:
    """Accuracy grid ``accuracies[l, m, i]`` for prunable layer position l,
    round m and ratio step i."""

    layers: list
    ratios: list
    accuracies: np.ndarray
    p_o: float

    @property
    def p0(self):
        return self.accuracies[:, :, 0]

    @property
    def pmax(self):
        return self.accuracies[:, :, -1]

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "layers": list(self.layers), "ratios": list(self.ratios),
                "p_o": self.p_o, "accuracies": self.accuracies.tolist()}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported round record schema {d.get('schema_version')!r}")
        return cls(d["layers"], d["ratios"], np.asarray(d["accuracies"], dtype=np.float64), d["p_o"])

    def to_csv(self, names=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "round", "ratio", "accuracy"])
        for li, layer in enumerate(self.layers):
            label = names[li] if names else layer
            for m in range(self.accuracies.shape[1]):
                for i, r in enumerate(self.ratios):
                    w.writerow([label, m + 1, f"{r:.4f}", repr(float(self.accuracies[li, m, i]))])
        return buf.getvalue()


@dataclass
class LayerScore:
    layer: int
    name: str
    f_r: float
    f_s: float
    S: float
    rounds_kept: int
    kept: list
    flattest: int


@dataclass
class SensitivityReport:
    scores: list

    def by_layer(self):
        return {s.layer: s for s in self.scores}

    def S(self):
        return np.array([s.S for s in self.scores])

    def to_dict(self):
        return {"schema_version": SCHEMA_VERSION, "scores": [vars(s) for s in self.scores]}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported sensitivity report schema {d.get('schema_version')!r}")
        try:
            return cls([LayerScore(**s) for s in d["scores"]])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed sensitivity report: {exc}") from exc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def flattest_round(record: RoundRecord, layer_pos) -> int:
    """0-based index of the round with the smallest curve variance."""
    variances = [round_variance(c) for c in record.accuracies[layer_pos]]
    return int(np.argmin(variances))


def round_scores(record: RoundRecord, cfg: HierarchyConfig):
    """Per-round (f^r, f^s, S) arrays of shape (layers, rounds)."""
    f_r = record.p0 - record.p_o
    f_s = stability(record.p0, record.pmax, cfg)
    return f_r, f_s, sensitiveness(f_r, f_s, cfg.gamma)


def aggregate(record: RoundRecord, cfg: HierarchyConfig, names=None) -> SensitivityReport:
    """Average per-round scores over rounds correlated with the flattest one.

    f^r and f^s are averaged over the same kept rounds, so the stored S is
    still their gamma-weighted combination.
    """
    f_r, f_s, s = round_scores(record, cfg)
    out = []
    for li, layer in enumerate(record.layers):
        best = flattest_round(record, li)
        ref = record.accuracies[li, best]
        kept = [m for m in range(record.accuracies.shape[1])
                if m == best or pearson(record.accuracies[li, m], ref) > cfg.rho_min]
        fr, fs = float(np.mean(f_r[li, kept])), float(np.mean(f_s[li, kept]))
        out.append(LayerScore(layer=int(layer), name=names[li] if names else f"layer{layer}",
                              f_r=fr, f_s=fs, S=sensitiveness(fr, fs, cfg.gamma),
                              rounds_kept=len(kept), kept=kept, flattest=best))
    return SensitivityReport(out)


def _job(args):
    net, layer, data, cfg, keys = args
    return measure_stability_curve(net, layer, data, cfg, keys)


def run_hierarchy(net: Network, data: Splits, cfg: HierarchyConfig, master_seed: int, workers=1, order=None):
    """All (layer, round) curves, then aggregation.

    ``order`` permutes the evaluation order of prunable layer positions; the
    result does not depend on it, nor on ``workers``.
    """
    spec = net.spec
    p_o = evaluate(net, data.test)
    positions = list(range(len(spec.prunable))) if order is None else list(order)
    if sorted(positions) != list(range(len(spec.prunable))):
        raise ConfigError(f"order must permute 0..{len(spec.prunable) - 1}")
    jobs = [(li, m) for li in positions for m in range(cfg.N)]
    payload = [(net, spec.prunable[li], data, cfg, (master_seed, li, m)) for li, m in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            curves = list(pool.map(_job, payload))
    else:
        curves = []
        for (li, m), p in zip(jobs, payload):
            try:
                curves.append(_job(p))
            except SensPruneError as exc:
                exc.args = (f"{spec.layer_name(spec.prunable[li])} round {m + 1}: {exc}",)
                raise
    ratios = ratio_set(cfg)
    grid = np.zeros((len(spec.prunable), cfg.N, len(ratios)))
    for (li, m), curve in zip(jobs, curves):
        grid[li, m] = curve
    record = RoundRecord(list(spec.prunable), ratios, grid, p_o)
    names = [spec.layer_name(i) for i in spec.prunable]
    return record, aggregate(record, cfg, names)
