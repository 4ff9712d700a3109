"""A parameterised instance of a ModelSpec."""
from __future__ import annotations

import copy

import numpy as np

from ..errors import ShapeError
from . import ops
from .spec import ModelSpec


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_layer(layer, rng, dtype):
    if layer.kind == "conv2d":
        fan_in = layer.in_ch * layer.kernel ** 2
        p = {"w": _kaiming_uniform(rng, (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel), fan_in, dtype)}
        if layer.bias:
            p["b"] = np.zeros(layer.out_ch, dtype=dtype)
        return p, {}
    if layer.kind == "batchnorm":
        c = layer.out_ch
        return ({"gamma": np.ones(c, dtype=dtype), "beta": np.zeros(c, dtype=dtype)},
                {"mean": np.zeros(c, dtype=dtype), "var": np.ones(c, dtype=dtype)})
    if layer.kind == "dense":
        return ({"w": _kaiming_uniform(rng, (layer.out_dim, layer.in_dim), layer.in_dim, dtype),
                 "b": np.zeros(layer.out_dim, dtype=dtype)}, {})
    return {}, {}


class Network:
    """Parameters, BN buffers and the frozen-layer set for one ModelSpec.

    ``kept`` maps each prunable layer to the original indices of its
    surviving filters, so masks can always be expressed against the
    unpruned model.
    """

    def __init__(self, spec: ModelSpec, params, buffers, skip_params, skip_buffers,
                 frozen=(), kept=None, dtype=np.float32):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.skip_params = skip_params
        self.skip_buffers = skip_buffers
        self.frozen = set(frozen)
        self.dtype = np.dtype(dtype)
        if kept is None:
            kept = {i: np.arange(spec.layers[i].out_ch) for i in spec.prunable}
        self.kept = kept

    @classmethod
    def init(cls, spec: ModelSpec, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        params, buffers = [], []
        for layer in spec.layers:
            p, b = _init_layer(layer, rng, dtype)
            params.append(p)
            buffers.append(b)
        skip_params, skip_buffers = [], []
        for e in spec.skip_edges:
            if e.projection:
                cin = (spec.input_shape if e.src < 0 else spec.shapes[e.src])[0]
                cout = spec.shapes[e.dst][0]
                skip_params.append({"w": _kaiming_uniform(rng, (cout, cin, 1, 1), cin, dtype),
                                    "gamma": np.ones(cout, dtype=dtype),
                                    "beta": np.zeros(cout, dtype=dtype)})
                skip_buffers.append({"mean": np.zeros(cout, dtype=dtype), "var": np.ones(cout, dtype=dtype)})
            else:
                skip_params.append({})
                skip_buffers.append({})
        return cls(spec, params, buffers, skip_params, skip_buffers, dtype=dtype)

    def copy(self):
        return copy.deepcopy(self)

    def named_tensors(self):
        """(name, array) pairs in layer order, then skip order."""
        for i, (p, b) in enumerate(zip(self.params, self.buffers)):
            for k in sorted(p):
                yield f"{i}.{k}", p[k]
            for k in sorted(b):
                yield f"{i}.{k}", b[k]
        for e, (p, b) in enumerate(zip(self.skip_params, self.skip_buffers)):
            for k in sorted(p):
                yield f"skip{e}.{k}", p[k]
            for k in sorted(b):
                yield f"skip{e}.{k}", b[k]

    def forward(self, x, train=False):
        """Logits of shape (N, num_classes, 1, 1) and the activation cache.

        ``x`` is (N, C, H, W); activations are held channel-major inside.
        """
        spec = self.spec
        if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
            raise ShapeError(f"{spec.name} expects input (N, {', '.join(map(str, spec.input_shape))}), got {x.shape}")
        x = np.ascontiguousarray(x.transpose(1, 0, 2, 3), dtype=self.dtype)
        outs = []
        caches = []
        skip_caches = {}
        h = x
        for i, layer in enumerate(spec.layers):
            p = self.params[i]
            kind = layer.kind
            if kind == "conv2d":
                h, c = ops.conv2d_forward(h, p["w"], p.get("b"), layer.stride, layer.pad)
            elif kind == "batchnorm":
                b = self.buffers[i]
                h, c = ops.batchnorm_forward(h, p["gamma"], p["beta"], b["mean"], b["var"], train,
                                             update=i not in self.frozen)
            elif kind == "relu":
                h, c = ops.relu_forward(h)
            elif kind == "maxpool":
                h, c = ops.maxpool_forward(h, layer.kernel, layer.stride, layer.pad)
            elif kind == "avgpool":
                h, c = ops.avgpool_forward(h)
            elif kind == "dense":
                h, c = ops.dense_forward(h, p["w"], p["b"])
            else:
                c = None
            for e_idx, e in enumerate(spec.skip_edges):
                if e.dst != i:
                    continue
                src = x if e.src < 0 else outs[e.src]
                if e.projection:
                    sp, sb = self.skip_params[e_idx], self.skip_buffers[e_idx]
                    s, c1 = ops.conv2d_forward(src, sp["w"], None, e.stride, 0)
                    s, c2 = ops.batchnorm_forward(s, sp["gamma"], sp["beta"], sb["mean"], sb["var"], train)
                    skip_caches[e_idx] = (c1, c2)
                    h = h + s
                else:
                    h = h + src
            outs.append(h)
            caches.append(c)
        return np.ascontiguousarray(h.transpose(1, 0, 2, 3)), (caches, skip_caches, x.shape)

    def backward(self, dlogits, cache):
        """Gradients for every parameter tensor, mirroring ``params``."""
        spec = self.spec
        caches, skip_caches, xshape = cache
        n = len(spec.layers)
        grads = [{} for _ in range(n)]
        skip_grads = [{} for _ in spec.skip_edges]
        pending = [None] * n
        pending[n - 1] = np.ascontiguousarray(dlogits.transpose(1, 0, 2, 3))
        dinput = None

        def push(j, g):
            nonlocal dinput
            if j < 0:
                dinput = g if dinput is None else dinput + g
            elif pending[j] is None:
                pending[j] = g
            else:
                pending[j] = pending[j] + g

        for i in range(n - 1, -1, -1):
            g = pending[i]
            pending[i] = None
            if g is None:
                continue
            for e_idx, e in enumerate(spec.skip_edges):
                if e.dst != i:
                    continue
                if e.projection:
                    c1, c2 = skip_caches[e_idx]
                    gs, dgamma, dbeta = ops.batchnorm_backward(g, c2)
                    gs, dw, _ = ops.conv2d_backward(gs, c1)
                    skip_grads[e_idx] = {"w": dw, "gamma": dgamma, "beta": dbeta}
                    push(e.src, gs)
                else:
                    push(e.src, g)
            layer = spec.layers[i]
            c = caches[i]
            kind = layer.kind
            if kind == "conv2d":
                g, dw, db = ops.conv2d_backward(g, c)
                grads[i] = {"w": dw} if db is None else {"w": dw, "b": db}
            elif kind == "batchnorm":
                g, dgamma, dbeta = ops.batchnorm_backward(g, c)
                grads[i] = {"gamma": dgamma, "beta": dbeta}
            elif kind == "relu":
                g = ops.relu_backward(g, c)
            elif kind == "maxpool":
                g = ops.maxpool_backward(g, c)
            elif kind == "avgpool":
                g = ops.avgpool_backward(g, c)
            elif kind == "dense":
                g, dw, db = ops.dense_backward(g, c)
                grads[i] = {"w": dw, "b": db}
            push(i - 1, g)
        if dinput is not None:
            dinput = dinput.transpose(1, 0, 2, 3)
        return grads, skip_grads, dinput


def forward(net: Network, batch, train=False):
    return net.forward(batch, train=train)
