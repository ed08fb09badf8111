"""CTF tensor files and PGM attention heatmaps.

CTF layout: b"CTF1", rank (u8), rank x u32 little-endian dims, then
float32 little-endian payload in row-major order. Nothing may follow the
payload.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

CTF_MAGIC = b"CTF1"
PGM_LEVELS = 16


def tensor_to_bytes(array) -> bytes:
    a = np.asarray(array)
    if a.ndim > 255:
        raise FormatError(f"rank {a.ndim} does not fit in a CTF header")
    head = CTF_MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 5 or data[:4] != CTF_MAGIC:
        raise FormatError("corrupt header: not a CTF1 tensor file")
    rank = data[4]
    end = 5 + 4 * rank
    if len(data) < end:
        raise FormatError("corrupt header: truncated dims")
    dims = struct.unpack(f"<{rank}I", data[5:end])
    need = 4 * math.prod(dims)
    have = len(data) - end
    if have != need:
        kind = "truncated payload" if have < need else "trailing bytes after payload"
        raise FormatError(f"{kind}: dims {list(dims)} need {need} bytes, found {have}")
    return np.frombuffer(data, dtype="<f4", offset=end).reshape(dims).astype(np.float32)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def to_gray_levels(values, levels=PGM_LEVELS) -> np.ndarray:
    """Map linearly from the map's min (0) to its max (levels - 1); a constant
    map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    scaled = np.floor((v - lo) / (hi - lo) * levels)
    return np.clip(scaled, 0, levels - 1).astype(np.uint8)


def pgm_bytes(values, levels=PGM_LEVELS) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.size == 0:
        raise FormatError(f"heatmap must be a non-empty 2-D array, got shape {v.shape}")
    gray = to_gray_levels(v, levels)
    h, w = v.shape
    comment = (f"# linear gray map: 0 = min {v.min():.6g}, {levels - 1} = max {v.max():.6g}, "
               f"level = floor((x - min) / (max - min) * {levels}) clipped")
    header = f"P5\n{comment}\n{w} {h}\n{levels - 1}\n".encode()
    return header + gray.tobytes()


def write_pgm(path, values, levels=PGM_LEVELS) -> None:
    Path(path).write_bytes(pgm_bytes(values, levels))


def read_pgm(path):
    """Parse a binary PGM written by :func:`write_pgm`; returns (pixels, maxval)."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode())
    if fields[0] != "P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pixels = np.frombuffer(data[pos + 1:], dtype=np.uint8)
    if pixels.size != w * h:
        raise FormatError("PGM payload size mismatch")
    return pixels.reshape(h, w), maxval


def tile_local_attention(attn_local, H, W, w) -> np.ndarray:
    """Place each window's w*w attention weights back at its grid position."""
    a = np.asarray(attn_local)
    nh, nw = H // w, W // w
    return a.reshape(nh, nw, w, w).transpose(0, 2, 1, 3).reshape(H, W)


def export_attention(out_dir, attn_global, attn_local, config) -> list[Path]:
    """Write per-view heatmaps; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for v in range(config.views):
        if attn_global:
            a = attn_global[v]
            path = out_dir / f"view{v}_global.pgm"
            write_pgm(path, a)
            written.append(path)
            for q in range(a.shape[0]):
                path = out_dir / f"view{v}_query{q}.pgm"
                write_pgm(path, a[q].reshape(config.H, config.W))
                written.append(path)
        if attn_local:
            path = out_dir / f"view{v}_local.pgm"
            write_pgm(path, tile_local_attention(attn_local[v], config.H, config.W, config.w))
            written.append(path)
    return written
