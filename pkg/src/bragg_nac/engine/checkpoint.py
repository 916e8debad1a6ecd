"""Binary checkpoint container (``NACF``).

Layout, all integers little-endian::

    b"NACF" | u32 version
    u32 len | architecture JSON (input_shape + layer specs)
    u32 len | metadata JSON
    u32 n   | n x (name, u8 ndim, ndim x u32 dims, float32 values)
    u32 n   | n x (name, u32 size, size x u8 mask)          prune masks
    u32 n   | n x (name, u8 bits)                            quantization

``name`` is a u16 length followed by UTF-8 bytes.
"""
from __future__ import annotations

import io
import json
import struct

import numpy as np

from .network import LayerSpec, Network

MAGIC = b"NACF"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _write_blob(buf, s):
    raw = s.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read(buf, fmt):
    size = struct.calcsize(fmt)
    raw = buf.read(size)
    if len(raw) != size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack(fmt, raw)


def _read_str(buf):
    (n,) = _read(buf, "<H")
    return buf.read(n).decode("utf-8")


def _read_blob(buf):
    (n,) = _read(buf, "<I")
    return buf.read(n).decode("utf-8")


def dumps(network, layer_specs, metadata=None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    arch = {"input_shape": list(network.input_shape),
            "layers": [s.to_dict() for s in layer_specs]}
    _write_blob(buf, json.dumps(arch))
    _write_blob(buf, json.dumps(metadata or {}))

    state = network.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        _write_str(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    weighted = network.weighted_layers()
    masks = {k: l.mask for k, l in weighted.items() if l.mask is not None}
    buf.write(struct.pack("<I", len(masks)))
    for name, mask in masks.items():
        _write_str(buf, name)
        flat = np.ascontiguousarray(mask, dtype=np.uint8).ravel()
        buf.write(struct.pack("<I", flat.size))
        buf.write(flat.tobytes())
    quant = {k: l.quant_bits for k, l in weighted.items() if l.quant_bits is not None}
    buf.write(struct.pack("<I", len(quant)))
    for name, bits in quant.items():
        _write_str(buf, name)
        buf.write(struct.pack("<B", bits))
    return buf.getvalue()


def loads(data):
    """Return ``(network, layer_specs, metadata)``."""
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError("not a NACF checkpoint (bad magic)")
    (version,) = _read(buf, "<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arch = json.loads(_read_blob(buf))
    metadata = json.loads(_read_blob(buf))
    specs = [LayerSpec.from_dict(d) for d in arch["layers"]]
    network = Network.from_specs(specs, tuple(arch["input_shape"]))

    (n,) = _read(buf, "<I")
    state = {}
    for _ in range(n):
        name = _read_str(buf)
        (ndim,) = _read(buf, "<B")
        shape = _read(buf, f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(buf.read(4 * count), dtype="<f4").reshape(shape)
    network.load_state_dict(state)

    weighted = network.weighted_layers()
    (n,) = _read(buf, "<I")
    for _ in range(n):
        name = _read_str(buf)
        (size,) = _read(buf, "<I")
        layer = weighted[name]
        flat = np.frombuffer(buf.read(size), dtype=np.uint8)
        layer.mask = flat.reshape(layer.weight.shape).astype(np.float32)
    (n,) = _read(buf, "<I")
    for _ in range(n):
        name = _read_str(buf)
        (bits,) = _read(buf, "<B")
        weighted[name].quant_bits = bits
    return network, specs, metadata


def save(path, network, layer_specs, metadata=None):
    with open(path, "wb") as fh:
        fh.write(dumps(network, layer_specs, metadata))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
