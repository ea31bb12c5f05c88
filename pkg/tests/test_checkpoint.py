import json

import numpy as np
import pytest

from camforge import checkpoint as ckpt, model as M, surgery
from camforge.errors import CheckpointError, UnsupportedLayerError


def test_round_trip_is_bitwise(tmp_path):
    net = M.tinynet(seed=3)
    ckpt.save(net, tmp_path / "n.cgf", {"seed": 3})
    back = ckpt.load(tmp_path / "n.cgf")
    assert back.layers == net.layers and back.input_shape == net.input_shape
    assert ckpt.params_equal(net, back)
    assert ckpt.to_bytes(back) == ckpt.to_bytes(net)
    side = json.loads((tmp_path / "n.cgf.json").read_text())
    assert side["head_kind"] == "gap_fc" and side["seed"] == 3 and side["class_count"] == 2


def test_transformed_model_round_trip(tmp_path):
    tte = surgery.transform(M.tinynet(seed=1))
    ckpt.save(tte, tmp_path / "t.cgf")
    back = ckpt.load(tmp_path / "t.cgf")
    assert back.head_kind == M.HeadKind.BUILTIN_CAM
    assert ckpt.params_equal(tte, back)


def test_truncation_detected():
    raw = ckpt.to_bytes(M.tinynet(seed=0))
    for cut in (3, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointError):
            ckpt.from_bytes(raw[:cut])


def test_corruption_detected():
    raw = bytearray(ckpt.to_bytes(M.tinynet(seed=0)))
    raw[100] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        ckpt.from_bytes(bytes(raw))


def test_bad_magic():
    raw = ckpt.to_bytes(M.tinynet(seed=0))
    with pytest.raises(CheckpointError, match="magic"):
        ckpt.from_bytes(b"XXXX" + raw[4:])


def test_unknown_layer_tag():
    import struct
    import zlib
    raw = bytearray(ckpt.to_bytes(M.tinynet(seed=0)))
    # first layer record starts after magic, version, 4 dims and the layer count
    raw[4 + 4 + 16 + 4] = 42
    body = bytes(raw[:-4])
    fixed = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(UnsupportedLayerError, match="42"):
        ckpt.from_bytes(fixed)
