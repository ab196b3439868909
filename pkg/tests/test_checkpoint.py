import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from adageo.checkpoint import load_checkpoint, load_descriptors, save_checkpoint, save_descriptors, sidecar_path
from adageo.model import GeoNet, NetConfig


def test_model_round_trip_bit_exact(tmp_path):
    net = GeoNet(NetConfig(clusters=3), seed=4)
    save_checkpoint(tmp_path / "m.ckpt", net.state_dict(), {"lr": 1e-5, "name": "x"})
    state, hyper = load_checkpoint(tmp_path / "m.ckpt")
    assert hyper == {"lr": 1e-5, "name": "x"}
    for k, v in net.state_dict().items():
        assert state[k].tobytes() == v.tobytes()
    other = GeoNet(NetConfig(clusters=3), seed=5)
    other.load_state_dict(state)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(other.state_dict().values(), net.state_dict().values()))


@given(st.dictionaries(st.text("abcdef._", min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                              elements=st.floats(allow_nan=False)), max_size=4))
def test_arbitrary_tensors_round_trip(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("ck") / "t.ckpt"
    save_checkpoint(path, tensors)
    back, _ = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()


def test_layout_is_little_endian(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", {"w": np.array([1.0, 2.0])})
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == b"ADAGCKPT"
    assert struct.unpack_from("<II", raw, 8) == (1, 1)
    assert raw[-16:] == struct.pack("<2d", 1.0, 2.0)
    assert sidecar_path(tmp_path / "a.ckpt").exists()


def test_bad_files_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage!")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.ckpt")
    net = GeoNet(NetConfig(), seed=0)
    with pytest.raises(KeyError, match="missing"):
        net.load_state_dict({})
    state = net.state_dict()
    state["centroids"] = np.zeros((1, 1))
    with pytest.raises(ValueError, match="shape"):
        net.load_state_dict(state)


def test_descriptor_dump_round_trip(tmp_path, rng):
    m = rng.normal(size=(5, 12))
    save_descriptors(tmp_path / "d.desc", [4, 8, 15, 16, 23], m, {"split": "test"})
    ids, back, header = load_descriptors(tmp_path / "d.desc")
    assert ids == [4, 8, 15, 16, 23] and header["split"] == "test"
    assert back.tobytes() == m.tobytes()
    with pytest.raises(ValueError):
        save_descriptors(tmp_path / "e.desc", [1], m)
