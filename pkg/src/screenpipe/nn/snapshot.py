"""Flat binary parameter snapshots.

Layout (little-endian)::

    b"SPT1"  uint32 layer_count
    per layer:  uint32 array_count
        per array:  uint32 ndim, ndim x uint32 dims, prod(dims) x float64

Only layers that own parameters or buffers are written, in depth-first order.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from ..errors import DimensionError

MAGIC = b"SPT1"


def _stateful_layers(net):
    return [l for l in net.layers() if l.own_parameters() or l.own_buffers()]


def _arrays(layer):
    return [p.data for p in layer.own_parameters()] + list(layer.own_buffers())


def dumps(net) -> bytes:
    buf = io.BytesIO()
    layers = _stateful_layers(net)
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(layers)))
    for layer in layers:
        arrays = _arrays(layer)
        buf.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            buf.write(struct.pack("<I", a.ndim))
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
            buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(net, payload: bytes):
    """Copy a snapshot into ``net`` in place; shapes must match exactly."""
    view = memoryview(payload)
    if bytes(view[:4]) != MAGIC:
        raise ValueError("not an SPT1 snapshot")
    pos = 4
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    layers = _stateful_layers(net)
    if count != len(layers):
        raise DimensionError(f"snapshot has {count} layers, network has {len(layers)}")
    for layer in layers:
        (n_arr,) = struct.unpack_from("<I", view, pos)
        pos += 4
        targets = _arrays(layer)
        if n_arr != len(targets):
            raise DimensionError(f"{layer!r}: snapshot has {n_arr} arrays, layer has {len(targets)}")
        for target in targets:
            (ndim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            if tuple(shape) != target.shape:
                raise DimensionError(f"{layer!r}: snapshot shape {shape} != {target.shape}")
            n = int(np.prod(shape))
            target[...] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape)
            pos += 8 * n
    if pos != len(payload):
        raise ValueError("trailing bytes after snapshot payload")
    return net


def save(net, path):
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load(net, path):
    with open(path, "rb") as fh:
        return loads(net, fh.read())
