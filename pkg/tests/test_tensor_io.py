import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leopart import tensor_io


def test_file_layout_f32_2x2(tmp_path):
    path = tmp_path / "t.lpt"
    tensor_io.write_tensor(np.array([[1, 2], [3, 4]], dtype=np.float32), path)
    raw = path.read_bytes()
    assert raw[:4] == b"LPT1"
    assert raw[4] == 1  # f32 code
    assert raw[5] == 2  # ndim
    assert struct.unpack("<2I", raw[6:14]) == (2, 2)
    assert len(raw) == 14 + 16
    assert np.frombuffer(raw[14:], dtype="<f4").tolist() == [1, 2, 3, 4]


def test_zero_shape_rejected(tmp_path):
    with pytest.raises(tensor_io.TensorFormatError):
        tensor_io.write_tensor(np.zeros((0,), dtype=np.float32), tmp_path / "t.lpt")


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.normal(size=(3, 5, 7)).astype(np.float32)
    path = tmp_path / "t.lpt"
    tensor_io.write_tensor(t, path)
    back = tensor_io.read_tensor(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, t)
    assert back.tobytes() == t.tobytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "t.lpt"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(tensor_io.TensorFormatError, match="magic"):
        tensor_io.read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.lpt"
    tensor_io.write_tensor(np.arange(100, dtype=np.float32), path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 200])  # keep 50 of 100 values
    with pytest.raises(tensor_io.TensorFormatError, match="truncated"):
        tensor_io.read_tensor(path)


@settings(max_examples=50, deadline=None)
@given(
    dtype=st.sampled_from(["f4", "u2", "u1"]),
    shape=st.lists(st.integers(1, 6), min_size=1, max_size=4),
    seed=st.integers(0, 2**31),
)
def test_roundtrip_property(tmp_path_factory, dtype, shape, seed):
    rng = np.random.default_rng(seed)
    if dtype == "f4":
        t = rng.normal(size=shape).astype(np.float32)
    else:
        t = rng.integers(0, 200, size=shape).astype(np.dtype(dtype))
    path = tmp_path_factory.mktemp("rt") / "t.lpt"
    tensor_io.write_tensor(t, path)
    back = tensor_io.read_tensor(path)
    assert back.dtype == t.dtype and np.array_equal(back, t)


def _write_feature(tmp_path, name, shape=(4, 3, 3)):
    t = np.zeros(shape, dtype=np.float32)
    tensor_io.write_tensor(t, tmp_path / name)


def test_manifest_two_records(tmp_path):
    _write_feature(tmp_path, "a.lpt")
    _write_feature(tmp_path, "b.lpt")
    mpath = tmp_path / "manifest.txt"
    mpath.write_text("id=img1 feature=a.lpt\nid=img2 feature=b.lpt\n")
    m = tensor_io.load_manifest(mpath)
    assert len(m) == 2
    assert m.records[0].id == "img1"


def test_manifest_duplicate_id(tmp_path):
    mpath = tmp_path / "manifest.txt"
    mpath.write_text("id=img1 feature=a.lpt\nid=img1 feature=b.lpt\n")
    with pytest.raises(tensor_io.ManifestError, match="img1"):
        tensor_io.load_manifest(mpath)


def test_manifest_missing_feature(tmp_path):
    mpath = tmp_path / "manifest.txt"
    mpath.write_text("id=img1 attention=a.lpt\n")
    with pytest.raises(tensor_io.ManifestError, match="feature"):
        tensor_io.load_manifest(mpath)


def test_manifest_dim_mismatch_on_first_load(tmp_path):
    _write_feature(tmp_path, "a.lpt", shape=(64, 3, 3))
    mpath = tmp_path / "manifest.txt"
    mpath.write_text("# dim=32\nid=img1 feature=a.lpt\n")
    m = tensor_io.load_manifest(mpath)
    with pytest.raises(tensor_io.ManifestError):
        m.load_features(m.records[0])


def test_manifest_roundtrip(tmp_path):
    _write_feature(tmp_path, "a.lpt")
    m = tensor_io.DatasetManifest(
        records=[tensor_io.ManifestRecord(id="x", feature_path="a.lpt")],
        token_grid=(3, 3), feature_dim=4, root=tmp_path,
    )
    tensor_io.write_manifest(m, tmp_path / "m.txt")
    back = tensor_io.load_manifest(tmp_path / "m.txt")
    assert back.token_grid == (3, 3) and back.feature_dim == 4
    assert back.records[0].id == "x"


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    protos = rng.normal(size=(5, 8)).astype(np.float32)
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    ckpt = tensor_io.Checkpoint(
        tensors={"student/prototypes": protos,
                 "student/encoder.w": rng.normal(size=(4, 4)).astype(np.float32)},
        step=17, config_hash="abc123",
    )
    tensor_io.save_checkpoint(ckpt, tmp_path / "c.lpc")
    back = tensor_io.load_checkpoint(tmp_path / "c.lpc")
    assert back.step == 17 and back.config_hash == "abc123"
    for name in ckpt.tensors:
        assert np.array_equal(back.tensors[name], ckpt.tensors[name])


def test_checkpoint_rejects_unnormalized_prototypes(tmp_path):
    ckpt = tensor_io.Checkpoint(
        tensors={"student/prototypes": np.ones((3, 4), dtype=np.float32)},
        step=0, config_hash="h",
    )
    with pytest.raises(tensor_io.TensorFormatError, match="unit-norm"):
        tensor_io.save_checkpoint(ckpt, tmp_path / "c.lpc")
