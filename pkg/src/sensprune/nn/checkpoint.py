"""Binary checkpoint container.

Layout (all little-endian)::

    magic     8 bytes  b"SNPRCKPT"
    version   uint16
    digest    32 bytes sha256 of the canonical ModelSpec JSON
    count     uint32   number of tensors
    per tensor:
        name_len uint16, name utf-8, ndim uint8, dims uint32 * ndim,
        data float32 * prod(dims)
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataFormatError
from .network import Network
from .spec import ModelSpec

MAGIC = b"SNPRCKPT"
VERSION = 1


def checkpoint_bytes(net: Network) -> bytes:
    buf = io.BytesIO()
    tensors = list(net.named_tensors())
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(net.spec.digest())
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def net_digest(net: Network) -> str:
    return hashlib.sha256(checkpoint_bytes(net)).hexdigest()


def save_checkpoint(net: Network, path):
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path, spec: ModelSpec, kept=None) -> Network:
    """Rebuild a float32 Network for ``spec`` from ``path``.

    Raises ConfigError when the stored spec digest differs from ``spec``.
    """
    data = Path(path).read_bytes()
    return checkpoint_from_bytes(data, spec, kept=kept, source=path)


def checkpoint_from_bytes(data: bytes, spec: ModelSpec, kept=None, source=None) -> Network:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataFormatError("truncated checkpoint", offset=pos, path=source)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic = take(8)
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}", offset=0, path=source)
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}", offset=8, path=source)
    digest = take(32)
    if digest != spec.digest():
        raise ConfigError(f"checkpoint spec digest {digest.hex()[:16]} does not match model "
                          f"{spec.name!r} ({spec.digest().hex()[:16]})")
    (count,) = struct.unpack("<I", take(4))
    stored = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        stored[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    net = Network.init(spec, seed=0)
    if kept is not None:
        net.kept = {int(k): np.asarray(v) for k, v in kept.items()}
    names = [name for name, _ in net.named_tensors()]
    if sorted(names) != sorted(stored):
        raise DataFormatError("checkpoint tensor set does not match the model", path=source)
    for name, arr in net.named_tensors():
        if stored[name].shape != arr.shape:
            raise DataFormatError(f"tensor {name} has shape {stored[name].shape}, model wants {arr.shape}",
                                  path=source)
        arr[...] = stored[name]
    return net
