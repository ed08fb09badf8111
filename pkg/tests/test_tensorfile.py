import struct

import numpy as np
import pytest

from tokencompress import tensorfile as tf
from tokencompress.errors import FormatError
from tokencompress.pipeline import CompressionConfig


@pytest.mark.parametrize("shape", [(), (3,), (2, 5), (4, 4, 8), (0, 12)])
def test_round_trip_bit_exact(tmp_path, rng, shape):
    a = rng.normal(size=shape).astype(np.float32)
    tf.write_tensor(tmp_path / "t.ctf", a)
    b = tf.read_tensor(tmp_path / "t.ctf")
    assert b.shape == a.shape and b.dtype == np.float32
    assert a.tobytes() == b.tobytes()


def test_layout():
    data = tf.tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert data[:4] == b"CTF1" and data[4] == 2
    assert struct.unpack("<2I", data[5:13]) == (1, 2)
    assert struct.unpack("<2f", data[13:]) == (1.0, 2.0)


def test_trailing_and_truncated():
    data = tf.tensor_to_bytes(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(FormatError, match="trailing"):
        tf.tensor_from_bytes(data + b"\0")
    with pytest.raises(FormatError, match="truncated"):
        tf.tensor_from_bytes(data[:-1])
    with pytest.raises(FormatError, match="truncated dims"):
        tf.tensor_from_bytes(data[:7])
    with pytest.raises(FormatError, match="not a CTF1"):
        tf.tensor_from_bytes(b"CTF2" + data[4:])


def test_gray_levels_linear():
    g = tf.to_gray_levels(np.array([0.0, 0.25, 0.5, 1.0]))
    assert g.tolist() == [0, 4, 8, 15]
    assert tf.to_gray_levels(np.full(3, 0.2)).tolist() == [0, 0, 0]


def test_pgm_round_trip(tmp_path, rng):
    a = rng.random((3, 7))
    tf.write_pgm(tmp_path / "m.pgm", a)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n# linear gray map")
    pixels, maxval = tf.read_pgm(tmp_path / "m.pgm")
    assert maxval == 15 and pixels.shape == (3, 7)
    assert np.array_equal(pixels, tf.to_gray_levels(a))


def test_tile_local_attention():
    attn = np.arange(16).reshape(4, 4)  # 4 windows of 2x2 on a 4x4 grid
    tiled = tf.tile_local_attention(attn, 4, 4, 2)
    assert tiled[:2, :2].ravel().tolist() == [0, 1, 2, 3]
    assert tiled[:2, 2:].ravel().tolist() == [4, 5, 6, 7]
    assert tiled[2:, 2:].ravel().tolist() == [12, 13, 14, 15]


def test_export_attention_files(tmp_path, rng):
    cfg = CompressionConfig(k=2, H=4, W=4, views=1)
    files = tf.export_attention(tmp_path, [rng.random((2, 16))], [rng.random((4, 4))], cfg)
    names = sorted(f.name for f in files)
    assert names == ["view0_global.pgm", "view0_local.pgm", "view0_query0.pgm", "view0_query1.pgm"]
    assert tf.read_pgm(tmp_path / "view0_query1.pgm")[0].shape == (4, 4)
    assert tf.read_pgm(tmp_path / "view0_global.pgm")[0].shape == (2, 16)
