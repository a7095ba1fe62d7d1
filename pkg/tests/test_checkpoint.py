import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from playerembed.checkpoint import MAGIC, CheckpointError, load_tensors, save_tensors


def test_layout_by_hand(tmp_path):
    save_tensors(tmp_path / "t.b2v", {"w": np.array([[1.0, 2.0]])})
    raw = (tmp_path / "t.b2v").read_bytes()
    want = (MAGIC + struct.pack("<I", 1) + struct.pack("<I", 1) + b"w" + struct.pack("<I", 2)
            + struct.pack("<2Q", 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert raw == want


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4)), max_size=4))
def test_roundtrip(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("ck") / "x.b2v"
    save_tensors(path, tensors)
    back = load_tensors(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)


def test_bad_magic_version_and_truncation(tmp_path):
    p = tmp_path / "x.b2v"
    save_tensors(p, {"a": np.arange(6.0).reshape(2, 3)})
    raw = p.read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:4] + struct.pack("<I", 9) + raw[8:], raw[:-3], raw[:14]):
        p.write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_tensors(p)
