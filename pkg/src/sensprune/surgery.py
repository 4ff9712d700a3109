"""Structural edits: filter selection, filter removal, freezing and cloning.

Filter indices passed to ``select_filters``/``remove_filters`` are positions
in the layer as it currently stands. ``PruneMask`` always speaks in original
indices; ``Network.kept`` bridges the two.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, ConstraintError, InvalidRequestError
from .nn.network import Network
from .nn.spec import ModelSpec

STRATEGIES = ("random", "l1_norm", "l2_norm")


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "random"
    seed: Union[int, Sequence[int]] = 0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ConfigError(f"unknown selection strategy {self.kind!r}; expected one of {STRATEGIES}")


@dataclass
class PruneMask:
    """Removed output filters per prunable layer, as original indices."""

    removed: dict = field(default_factory=dict)

    def __post_init__(self):
        self.removed = {int(k): tuple(sorted({int(i) for i in v})) for k, v in self.removed.items() if len(v)}

    def count(self, layer=None):
        if layer is not None:
            return len(self.removed.get(layer, ()))
        return sum(len(v) for v in self.removed.values())

    def union(self, other: "PruneMask") -> "PruneMask":
        merged = {k: set(v) for k, v in self.removed.items()}
        for k, v in other.removed.items():
            merged.setdefault(k, set()).update(v)
        return PruneMask(merged)

    def validate(self, spec: ModelSpec):
        """Check indices against the unpruned ``spec``."""
        for layer, idx in self.removed.items():
            if layer not in spec.prunable:
                raise ConstraintError(f"layer {layer} is not prunable in {spec.name!r}")
            n = spec.layers[layer].out_ch
            if idx and (idx[0] < 0 or idx[-1] >= n):
                raise InvalidRequestError(f"layer {layer}: filter index out of range 0..{n - 1}")
            if len(idx) >= n:
                raise ConstraintError(f"layer {layer}: mask removes all {n} filters")

    def to_json(self) -> str:
        return json.dumps({str(k): list(v) for k, v in sorted(self.removed.items())}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PruneMask":
        try:
            raw = json.loads(text)
            return cls({int(k): [int(i) for i in v] for k, v in raw.items()})
        except (ValueError, TypeError, AttributeError) as exc:
            raise ConfigError(f"malformed prune mask: {exc}") from exc

    @classmethod
    def of(cls, net: Network, base: ModelSpec) -> "PruneMask":
        """Mask turning ``base`` into ``net``'s topology."""
        removed = {}
        for layer in base.prunable:
            gone = np.setdiff1d(np.arange(base.layers[layer].out_ch), net.kept[layer])
            if len(gone):
                removed[layer] = gone.tolist()
        return cls(removed)


def _norms(w, kind):
    slab = w.reshape(w.shape[0], -1).astype(np.float64)
    return np.abs(slab).sum(axis=1) if kind == "l1_norm" else np.sqrt((slab * slab).sum(axis=1))


def select_filters(net: Network, layer: int, count: int, strategy: SelectionStrategy):
    """``count`` current filter positions chosen by ``strategy``, ascending."""
    n = net.spec.layers[layer].out_ch
    if not 1 <= count < n:
        raise InvalidRequestError(f"layer {layer}: can select 1..{n - 1} of {n} filters, asked for {count}")
    if strategy.kind == "random":
        rng = np.random.default_rng(strategy.seed)
        picked = rng.choice(n, size=count, replace=False)
    else:
        # stable sort keeps the lowest index first among equal norms
        picked = np.argsort(_norms(net.params[layer]["w"], strategy.kind), kind="stable")[:count]
    return sorted(int(i) for i in picked)


def _surgery_plan(spec: ModelSpec, layer: int):
    if not 0 <= layer < len(spec.layers) or spec.layers[layer].kind != "conv2d":
        raise ConstraintError(f"layer {layer} is not a conv layer")
    if layer not in spec.prunable:
        raise ConstraintError(f"layer {layer} of {spec.name!r} is not prunable")
    consumer, path = spec.consumer_of(layer)
    if consumer is None:
        raise ConstraintError(f"layer {layer} has no conv/dense consumer")
    if spec.touches_skip(path):
        raise ConstraintError(f"removing filters from layer {layer} would change a skip connection")
    return consumer, path


def _spec_changes(spec: ModelSpec, layer, consumer, path, keep_count):
    changes = {layer: {"out_ch": keep_count}}
    for j in path[1:]:
        if spec.layers[j].kind == "batchnorm":
            changes[j] = {"in_ch": keep_count, "out_ch": keep_count}
    target = spec.layers[consumer]
    if target.kind == "conv2d":
        changes[consumer] = {"in_ch": keep_count}
    else:
        _, h, w = spec.input_of(consumer)
        changes[consumer] = {"in_dim": keep_count * h * w}
    return changes


def remove_filters(net: Network, layer: int, indices) -> Network:
    """New Network without the filters at ``indices`` (current positions) of
    ``layer``. Downstream batch norm and the consuming conv/dense input are
    sliced to match; surviving values are copied unchanged."""
    spec = net.spec
    consumer, path = _surgery_plan(spec, layer)
    n = spec.layers[layer].out_ch
    drop = sorted({int(i) for i in indices})
    if drop and (drop[0] < 0 or drop[-1] >= n):
        raise InvalidRequestError(f"layer {layer}: filter index out of range 0..{n - 1}")
    if len(drop) >= n:
        raise ConstraintError(f"layer {layer}: cannot remove all {n} filters")
    out = net.copy()
    if not drop:
        return out
    keep = np.setdiff1d(np.arange(n), drop)
    p = out.params[layer]
    p["w"] = np.ascontiguousarray(p["w"][keep])
    if "b" in p:
        p["b"] = np.ascontiguousarray(p["b"][keep])
    for j in path[1:]:
        if spec.layers[j].kind == "batchnorm":
            for d in (out.params[j], out.buffers[j]):
                for k in d:
                    d[k] = np.ascontiguousarray(d[k][keep])
    cp = out.params[consumer]
    if spec.layers[consumer].kind == "conv2d":
        cp["w"] = np.ascontiguousarray(cp["w"][:, keep])
    else:
        # dense input is flattened in (channel, y, x) order
        o = cp["w"].shape[0]
        cp["w"] = np.ascontiguousarray(cp["w"].reshape(o, n, -1)[:, keep].reshape(o, -1))
    out.spec = spec.replace_layers(_spec_changes(spec, layer, consumer, path, len(keep)))
    out.kept = dict(out.kept)
    out.kept[layer] = out.kept[layer][keep]
    return out


def apply_mask(net: Network, mask: PruneMask) -> Network:
    """Remove every masked original filter still present in ``net``."""
    for layer in sorted(mask.removed):
        _surgery_plan(net.spec, layer)
        current = net.kept[layer]
        drop = np.flatnonzero(np.isin(current, mask.removed[layer]))
        net = remove_filters(net, layer, drop)
    return net


def prune_spec(spec: ModelSpec, mask: PruneMask) -> ModelSpec:
    """Topology after ``mask``, without touching any parameters."""
    mask.validate(spec)
    for layer, idx in sorted(mask.removed.items()):
        consumer, path = _surgery_plan(spec, layer)
        spec = spec.replace_layers(_spec_changes(spec, layer, consumer, path, spec.layers[layer].out_ch - len(idx)))
    return spec


def freeze_layer(net: Network, layer: int) -> Network:
    if not 0 <= layer < len(net.spec.layers):
        raise InvalidRequestError(f"no layer {layer} in {net.spec.name!r}")
    net.frozen.add(layer)
    return net


def clone(net: Network) -> Network:
    return net.copy()
