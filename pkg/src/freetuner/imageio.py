"""Binary PPM (P6, 8-bit) and PGM (P5) reading and writing."""
from __future__ import annotations

import os

import numpy as np

from .errors import InvalidArgument


def to_bytes(img) -> np.ndarray:
    """(3, H, W) or (H, W) floats in [0, 1] -> uint8 HWC with round-half-up quantisation."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = np.stack([a, a, a])
    if a.ndim != 3 or a.shape[0] != 3:
        raise InvalidArgument(f"expected (3, H, W) or (H, W), got {a.shape}")
    q = np.floor(np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def encode_ppm(img) -> bytes:
    px = to_bytes(img)
    H, W = px.shape[:2]
    return f"P6\n{W} {H}\n255\n".encode() + px.tobytes()


def write_ppm(path, img) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def _tokens(blob: bytes, n: int):
    """First ``n`` whitespace-separated header fields (comments skipped) and the data offset."""
    out, i = [], 0
    while len(out) < n:
        while i < len(blob) and blob[i:i + 1].isspace():
            i += 1
        if blob[i:i + 1] == b"#":
            while i < len(blob) and blob[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(blob) and not blob[j:j + 1].isspace():
            j += 1
        if j == i:
            raise InvalidArgument("truncated image header")
        out.append(blob[i:j].decode("ascii"))
        i = j
    return out, i + 1


def decode_pnm(blob: bytes) -> np.ndarray:
    """P6 -> (3, H, W), P5 -> (H, W); values in [0, 1]."""
    (magic, w, h, maxval), off = _tokens(blob, 4)
    if magic not in ("P5", "P6"):
        raise InvalidArgument(f"unsupported image format {magic!r}")
    W, H, mv = int(w), int(h), int(maxval)
    if mv != 255:
        raise InvalidArgument("only 8-bit images are supported")
    ch = 3 if magic == "P6" else 1
    if len(blob) - off < H * W * ch:
        raise InvalidArgument("truncated pixel data")
    data = np.frombuffer(blob, dtype=np.uint8, count=H * W * ch, offset=off)
    a = data.astype(np.float64) / 255.0
    return a.reshape(H, W, 3).transpose(2, 0, 1).copy() if ch == 3 else a.reshape(H, W)


def read_image(path) -> np.ndarray:
    """PPM/PGM, or a .npy array already in [0, 1]."""
    if os.fspath(path).endswith(".npy"):
        return np.load(path).astype(np.float64)
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def read_mask(path) -> np.ndarray:
    """Binary mask from PGM/PPM (any channel > 0.5) or .npy."""
    a = read_image(path)
    if a.ndim == 3:
        a = a.max(axis=0)
    return (a > 0.5).astype(np.float64)


def minmax(a) -> np.ndarray:
    """Scale to [0, 1] by (a - min) / (max - min); constant input maps to 0."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi - lo <= 0 else (a - lo) / (hi - lo)
