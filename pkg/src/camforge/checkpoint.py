"""CGF checkpoint files.

Layout (little-endian)::

    "CGF1" | u32 version | u32 c, h, w | u32 classes
    u32 n_layers | n_layers x (u8 kind, u32 in, out, kernel, stride, padding, u16 len, slot)
    u32 n_params | n_params x (u16 len, name, u8 ndim, ndim x u32 dim, T4F record)
    u32 crc32 of all preceding bytes
"""

import struct
import zlib
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError, UnsupportedLayerError, ModelValidationError
from .io import atomic_write_bytes, write_json
from .model import LayerKind, LayerSpec, ModelGraph, validate

MAGIC = b"CGF1"
VERSION = 1

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_LAYER = struct.Struct("<B5I")


def to_bytes(model):
    validate(model)
    out = bytearray(MAGIC)
    out += _U32.pack(VERSION)
    out += struct.pack("<4I", *model.input_shape, model.class_count)
    out += _U32.pack(len(model.layers))
    for layer in model.layers:
        out += _LAYER.pack(int(layer.kind), layer.in_channels, layer.out_channels,
                           layer.kernel, layer.stride, layer.padding)
        slot = layer.slot.encode()
        out += _U16.pack(len(slot)) + slot
    out += _U32.pack(len(model.params))
    for name, arr in model.params.items():
        raw = name.encode()
        out += _U16.pack(len(raw)) + raw
        out += _U8.pack(arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += T.t4f_bytes(arr.reshape((1,) * (4 - arr.ndim) + arr.shape))
    out += _U32.pack(zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        if self.pos + fmt.size > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        vals = fmt.unpack_from(self.buf, self.pos)
        self.pos += fmt.size
        return vals

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        data = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(data)


def from_bytes(buf):
    if len(buf) < len(MAGIC) + 8:
        raise CheckpointError("truncated checkpoint")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not a CGF checkpoint (magic {bytes(buf[:4])!r})")
    body, (crc,) = buf[:-4], _U32.unpack_from(buf, len(buf) - 4)
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch (file truncated or corrupted)")
    r = _Reader(body)
    r.pos = 4
    (version,) = r.take(_U32)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    c, h, w, classes = r.take(struct.Struct("<4I"))
    (n_layers,) = r.take(_U32)
    layers = []
    for i in range(n_layers):
        tag, cin, cout, kernel, stride, padding = r.take(_LAYER)
        try:
            kind = LayerKind(tag)
        except ValueError:
            raise UnsupportedLayerError(f"layer {i}: unsupported layer kind tag {tag}") from None
        (slen,) = r.take(_U16)
        layers.append(LayerSpec(kind, cin, cout, kernel, stride, padding, r.raw(slen).decode()))
    (n_params,) = r.take(_U32)
    params = {}
    for _ in range(n_params):
        (nlen,) = r.take(_U16)
        name = r.raw(nlen).decode()
        (ndim,) = r.take(_U8)
        shape = r.take(struct.Struct(f"<{ndim}I"))
        try:
            arr, r.pos = T.parse_t4f(body, r.pos)
        except ValueError as exc:
            raise CheckpointError(f"parameter {name!r}: {exc}") from None
        params[name] = arr.reshape(shape)
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} unexpected trailing bytes")
    model = ModelGraph(tuple(layers), params, (c, h, w), classes)
    try:
        validate(model)
    except ModelValidationError as exc:
        raise CheckpointError(f"checkpoint describes an invalid model: {exc}") from exc
    return model


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save(model, path, metadata=None):
    """Write ``model`` to ``path``; ``metadata`` goes to the JSON sidecar ``<path>.json``."""
    atomic_write_bytes(path, to_bytes(model))
    side = {
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "class_names": [str(i) for i in range(model.class_count)],
        "head_kind": model.head_kind.value,
    }
    side.update(metadata or {})
    write_json(sidecar_path(path), side)


def load(path):
    return from_bytes(Path(path).read_bytes())


def params_equal(a, b):
    return (a.params.keys() == b.params.keys()
            and all(np.array_equal(a.params[k], b.params[k]) for k in a.params))
