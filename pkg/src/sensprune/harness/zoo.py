"""Built-in model topologies."""
from __future__ import annotations

from ..errors import ConfigError
from ..nn.spec import (ModelSpec, SkipEdge, avgpool, batchnorm, conv, dense, head, maxpool,
                       relu)

VGG16_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]


def _scaled(n, divisor):
    return max(1, n // divisor)


def vgg16(num_classes=10, divisor=1, hidden=512, name="vgg16-cifar"):
    """VGG-16 with batch norm after every conv and a 512-512-classes head."""
    layers, prunable = [], []
    cin = 3
    for item in VGG16_PLAN:
        if item == "M":
            layers.append(maxpool())
            continue
        cout = _scaled(item, divisor)
        prunable.append(len(layers))
        layers += [conv(cin, cout), batchnorm(cout), relu()]
        cin = cout
    h = _scaled(hidden, divisor)
    layers += [dense(cin, h), relu(), dense(h, num_classes), head()]
    return ModelSpec(name, (3, 32, 32), layers, prunable=prunable)


def conv4(num_classes=10, divisor=1, hidden=512, name="conv4-mnist"):
    """Four-conv chain [64, 128, 256, 512] on 28x28 input.

    Pools sit after the first and the last conv; the flattened 7x7 map feeds
    a single hidden dense layer.
    """
    widths = [_scaled(c, divisor) for c in (64, 128, 256, 512)]
    layers, prunable = [], []
    cin = 1
    for k, cout in enumerate(widths):
        prunable.append(len(layers))
        layers += [conv(cin, cout), batchnorm(cout), relu()]
        if k in (0, 3):
            layers.append(maxpool())
        cin = cout
    h = _scaled(hidden, divisor)
    layers += [dense(cin * 7 * 7, h), relu(), dense(h, num_classes), head()]
    return ModelSpec(name, (1, 28, 28), layers, prunable=prunable)


def resnet18(num_classes=1000, divisor=1, name="resnet18-cifar", input_hw=(32, 32)):
    """ResNet-18 with the 7x7/stride-2 stem, 3x3 max pool and eight basic
    blocks. Only the first conv of every block is prunable."""
    widths = [_scaled(c, divisor) for c in (64, 128, 256, 512)]
    layers = [conv(3, widths[0], kernel=7, stride=2, pad=3, bias=False), batchnorm(widths[0]), relu(),
              maxpool(3, 2, 1)]
    skips, prunable = [], []
    cin = widths[0]
    block = 0
    for stage, cout in enumerate(widths):
        for rep in range(2):
            stride = 2 if stage > 0 and rep == 0 else 1
            src = len(layers) - 1
            prunable.append(len(layers))
            layers += [conv(cin, cout, stride=stride, bias=False, block_id=block), batchnorm(cout, block),
                       relu(block), conv(cout, cout, bias=False, block_id=block), batchnorm(cout, block)]
            skips.append(SkipEdge(src, len(layers) - 1, projection=stride != 1 or cin != cout, stride=stride))
            layers.append(relu())
            cin = cout
            block += 1
    layers += [avgpool(), dense(cin, num_classes), head()]
    return ModelSpec(name, (3, *input_hw), layers, skip_edges=skips, prunable=prunable)


ZOO = {
    "vgg16-cifar": lambda **kw: vgg16(**kw),
    "vgg16-mini": lambda **kw: vgg16(divisor=kw.pop("divisor", 8), name="vgg16-mini", **kw),
    "conv4-mnist": lambda **kw: conv4(**kw),
    "conv4-mini": lambda **kw: conv4(divisor=kw.pop("divisor", 8), name="conv4-mini", **kw),
    "resnet18-cifar": lambda **kw: resnet18(**kw),
    "resnet-mini": lambda **kw: resnet18(divisor=kw.pop("divisor", 8), name="resnet-mini",
                                         num_classes=kw.pop("num_classes", 10), **kw),
}


def build_model(name, **kwargs) -> ModelSpec:
    """Assemble a zoo model. ``num_classes`` and ``divisor`` may be overridden."""
    try:
        factory = ZOO[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}; zoo has {sorted(ZOO)}") from None
    return factory(**kwargs)
