"""Shared oracles and toy data for the test suite."""
import numpy as np

from sensprune.nn.spec import ModelSpec, batchnorm, conv, dense, head, maxpool, relu
from sensprune.harness.data import MNIST_FILES, write_idx
from sensprune.nn.train import DatasetSplit


def naive_conv(x, w, b, stride, pad):
    """Direct 6-loop convolution on NCHW input."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for s in range(n):
        for f in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[s, ch, y * stride + i, xx * stride + j] * w[f, ch, i, j]
                    out[s, f, y, xx] = acc + (b[f] if b is not None else 0.0)
    return out


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` with respect to array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)) + np.max(np.abs(b)), 1e-12))


def tiny_chain(c0=1, hw=8, widths=(4, 6), classes=3, bn=True):
    """conv[-bn]-relu blocks, one pool, dense head."""
    layers, prunable = [], []
    cin = c0
    for k, cout in enumerate(widths):
        prunable.append(len(layers))
        layers.append(conv(cin, cout))
        if bn:
            layers.append(batchnorm(cout))
        layers.append(relu())
        if k == 0:
            layers.append(maxpool())
        cin = cout
    h = hw // 2
    layers += [dense(cin * h * h, classes), head()]
    return ModelSpec("tiny", (c0, hw, hw), layers, prunable=prunable)


def blobs(n=120, classes=3, shape=(1, 8, 8), seed=0):
    """Class-dependent bright patches plus noise; learnable in a few epochs."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    x = rng.normal(0, 0.3, size=(n, *shape)).astype(np.float32)
    h = shape[1]
    band = h // classes
    for i, y in enumerate(labels):
        x[i, :, y * band:(y + 1) * band, :] += 1.5
    return DatasetSplit(x, labels, classes)


def fake_mnist(root, n_train=60, n_test=30, seed=0, gz=False):
    """Random-pixel IDX files with cycling labels under ``root``."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    suffix = ".gz" if gz else ""
    for split, n in (("train", n_train), ("test", n_test)):
        img, lbl = MNIST_FILES[split]
        write_idx(root / (img + suffix), rng.integers(0, 256, size=(n, 28, 28), dtype=np.uint8))
        write_idx(root / (lbl + suffix), (np.arange(n) % 10).astype(np.uint8))
    return root
