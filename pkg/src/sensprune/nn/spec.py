"""Declarative model topology, shape propagation and parameter/MAC accounting."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

from ..errors import ConfigError, ShapeError

KINDS = ("conv2d", "batchnorm", "relu", "maxpool", "avgpool", "dense", "softmax_xent")

# kinds that keep channel count and channel order
CHANNEL_PRESERVING = ("batchnorm", "relu", "maxpool", "avgpool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    bias: bool = True
    in_dim: int = 0
    out_dim: int = 0
    block_id: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "conv2d" and (self.out_ch < 1 or self.in_ch < 1):
            raise ConfigError(f"conv2d needs in_ch, out_ch >= 1, got {self.in_ch}, {self.out_ch}")
        if self.kind == "dense" and (self.in_dim < 1 or self.out_dim < 1):
            raise ConfigError(f"dense needs in_dim, out_dim >= 1, got {self.in_dim}, {self.out_dim}")
        if self.kind in ("conv2d", "maxpool") and (self.kernel < 1 or self.stride < 1 or self.pad < 0):
            raise ConfigError(f"bad window for {self.kind}: k={self.kernel} s={self.stride} p={self.pad}")


def conv(in_ch, out_ch, kernel=3, stride=1, pad=None, bias=True, block_id=None):
    if pad is None:
        pad = kernel // 2
    return LayerSpec("conv2d", in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride,
                     pad=pad, bias=bias, block_id=block_id)


def batchnorm(ch, block_id=None):
    return LayerSpec("batchnorm", in_ch=ch, out_ch=ch, block_id=block_id)


def relu(block_id=None):
    return LayerSpec("relu", block_id=block_id)


def maxpool(size=2, stride=2, pad=0):
    return LayerSpec("maxpool", kernel=size, stride=stride, pad=pad)


def avgpool():
    """Global average pool down to 1x1."""
    return LayerSpec("avgpool")


def dense(in_dim, out_dim):
    return LayerSpec("dense", in_dim=in_dim, out_dim=out_dim)


def head():
    return LayerSpec("softmax_xent")


@dataclass(frozen=True)
class SkipEdge:
    """Residual connection: the output of layer ``src`` (-1 for the network
    input) is added to the output of layer ``dst``.

    When ``projection`` is set the shortcut passes through a bias-free 1x1
    convolution with ``stride`` followed by batch norm.
    """

    src: int
    dst: int
    projection: bool = False
    stride: int = 1


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple
    layers: tuple
    skip_edges: tuple = ()
    prunable: tuple = ()
    shapes: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "skip_edges", tuple(self.skip_edges))
        object.__setattr__(self, "prunable", tuple(int(i) for i in self.prunable))
        object.__setattr__(self, "shapes", _propagate(self))
        _check_skips(self)
        _check_prunable(self)

    @property
    def num_classes(self):
        for layer in reversed(self.layers):
            if layer.kind == "dense":
                return layer.out_dim
        raise ConfigError(f"model {self.name!r} has no dense output layer")

    def input_of(self, i):
        """Shape (C, H, W) flowing into layer ``i``."""
        return self.input_shape if i == 0 else self.shapes[i - 1]

    def skips_into(self, i):
        return [e for e in self.skip_edges if e.dst == i]

    def conv_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv2d"]

    def layer_name(self, i):
        """Conv1..ConvL over the prunable set, otherwise kind + index."""
        if i in self.prunable:
            return f"Conv{self.prunable.index(i) + 1}"
        return f"{self.layers[i].kind}{i}"

    def consumer_of(self, i):
        """Index of the first conv/dense layer reading layer ``i``'s channels,
        plus the indices passed on the way there (inclusive of ``i``)."""
        path = [i]
        j = i + 1
        while j < len(self.layers) and self.layers[j].kind in CHANNEL_PRESERVING:
            path.append(j)
            j += 1
        if j >= len(self.layers) or self.layers[j].kind not in ("conv2d", "dense"):
            return None, path
        return j, path

    def touches_skip(self, path):
        ends = {e.src for e in self.skip_edges} | {e.dst for e in self.skip_edges}
        return any(p in ends for p in path)

    def replace_layers(self, changes):
        """New spec with ``changes`` ({index: {field: value}}) applied."""
        layers = list(self.layers)
        for i, kw in changes.items():
            layers[i] = dataclasses.replace(layers[i], **kw)
        return ModelSpec(self.name, self.input_shape, layers, self.skip_edges, self.prunable)

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [dataclasses.asdict(layer) for layer in self.layers],
            "skip_edges": [dataclasses.asdict(e) for e in self.skip_edges],
            "prunable": list(self.prunable),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                name=d["name"],
                input_shape=tuple(d["input_shape"]),
                layers=[LayerSpec(**layer) for layer in d["layers"]],
                skip_edges=[SkipEdge(**e) for e in d.get("skip_edges", [])],
                prunable=d.get("prunable", []),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model spec: {exc}") from exc

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


def _window_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _layer_out(layer, shape, idx, name):
    c, h, w = shape
    kind = layer.kind
    if kind == "conv2d":
        if layer.in_ch != c:
            raise ShapeError(f"{name}: layer {idx} conv expects {layer.in_ch} input channels, gets {c}")
        ho, wo = _window_out(h, layer.kernel, layer.stride, layer.pad), _window_out(w, layer.kernel, layer.stride, layer.pad)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{name}: layer {idx} conv output collapses to {ho}x{wo}")
        return (layer.out_ch, ho, wo)
    if kind == "batchnorm":
        if layer.out_ch != c:
            raise ShapeError(f"{name}: layer {idx} batchnorm over {layer.out_ch} channels, gets {c}")
        return shape
    if kind == "relu":
        return shape
    if kind == "maxpool":
        ho, wo = _window_out(h, layer.kernel, layer.stride, layer.pad), _window_out(w, layer.kernel, layer.stride, layer.pad)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{name}: layer {idx} maxpool output collapses to {ho}x{wo}")
        return (c, ho, wo)
    if kind == "avgpool":
        return (c, 1, 1)
    if kind == "dense":
        if layer.in_dim != c * h * w:
            raise ShapeError(f"{name}: layer {idx} dense expects {layer.in_dim} inputs, gets {c}x{h}x{w}={c * h * w}")
        return (layer.out_dim, 1, 1)
    if kind == "softmax_xent":
        if h != 1 or w != 1:
            raise ShapeError(f"{name}: head at layer {idx} needs flat logits, gets {shape}")
        return shape
    raise ShapeError(f"unknown kind {kind}")


def _propagate(spec):
    if len(spec.input_shape) != 3:
        raise ShapeError(f"input_shape must be (C, H, W), got {spec.input_shape}")
    shapes = []
    shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        shape = _layer_out(layer, shape, i, spec.name)
        shapes.append(shape)
    return tuple(shapes)


def _check_skips(spec):
    n = len(spec.layers)
    for e in spec.skip_edges:
        if not (-1 <= e.src < e.dst < n):
            raise ShapeError(f"{spec.name}: skip edge {e.src}->{e.dst} out of range")
        src_shape = spec.input_shape if e.src < 0 else spec.shapes[e.src]
        dst_shape = spec.shapes[e.dst]
        if e.projection:
            c, h, w = src_shape
            expect = (dst_shape[0], _window_out(h, 1, e.stride, 0), _window_out(w, 1, e.stride, 0))
        else:
            expect = src_shape
        if tuple(expect) != tuple(dst_shape):
            raise ShapeError(f"{spec.name}: skip edge {e.src}->{e.dst} joins {src_shape} to {dst_shape}")


def _check_prunable(spec):
    for i in spec.prunable:
        if not (0 <= i < len(spec.layers)) or spec.layers[i].kind != "conv2d":
            raise ConfigError(f"{spec.name}: prunable index {i} is not a conv layer")
        consumer, path = spec.consumer_of(i)
        if consumer is None:
            raise ConfigError(f"{spec.name}: prunable conv {i} has no conv/dense consumer")
        if spec.touches_skip(path):
            raise ConfigError(f"{spec.name}: conv {i} feeds a skip connection and cannot be pruned")


def count_params(spec: ModelSpec) -> int:
    total = 0
    for layer in spec.layers:
        if layer.kind == "conv2d":
            total += layer.out_ch * layer.in_ch * layer.kernel ** 2 + (layer.out_ch if layer.bias else 0)
        elif layer.kind == "batchnorm":
            total += 2 * layer.out_ch
        elif layer.kind == "dense":
            total += layer.in_dim * layer.out_dim + layer.out_dim
    for e in spec.skip_edges:
        if e.projection:
            cin = (spec.input_shape if e.src < 0 else spec.shapes[e.src])[0]
            cout = spec.shapes[e.dst][0]
            total += cin * cout + 2 * cout
    return total


def count_macs(spec: ModelSpec, input_hw=None) -> int:
    """Multiply-accumulates of one forward pass (conv and dense only)."""
    if input_hw is None:
        h, w = spec.input_shape[1:]
    else:
        h, w = input_hw
    if h < 1 or w < 1:
        raise ConfigError(f"input size must be positive, got {h}x{w}")
    total = 0
    hw = [(h, w)]
    for layer in spec.layers:
        h, w = hw[-1]
        if layer.kind in ("conv2d", "maxpool"):
            ho = _window_out(h, layer.kernel, layer.stride, layer.pad)
            wo = _window_out(w, layer.kernel, layer.stride, layer.pad)
            if layer.kind == "conv2d":
                total += layer.out_ch * layer.in_ch * layer.kernel ** 2 * ho * wo
            h, w = ho, wo
        elif layer.kind == "avgpool":
            h, w = 1, 1
        elif layer.kind == "dense":
            total += layer.in_dim * layer.out_dim
            h, w = 1, 1
        hw.append((h, w))
    for e in spec.skip_edges:
        if e.projection:
            cin = (spec.input_shape if e.src < 0 else spec.shapes[e.src])[0]
            cout = spec.shapes[e.dst][0]
            ho, wo = hw[e.dst + 1]
            total += cin * cout * ho * wo
    return total
