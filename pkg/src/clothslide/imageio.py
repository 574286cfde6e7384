"""Binary PGM and versioned JSON helpers shared by the dataset writers."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

DEPTH_METERS_PER_UNIT = 1e-4
SCHEMA_VERSION = 1


def write_pgm(path, arr: np.ndarray) -> None:
    """Write a 2D uint8 or uint16 array as binary PGM (P5, big-endian for 16 bit)."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError("PGM data must be 2D")
    if arr.dtype == np.uint8:
        maxval, payload = 255, arr.tobytes()
    elif arr.dtype == np.uint16:
        maxval, payload = 65535, arr.astype(">u2").tobytes()
    else:
        raise TypeError(f"unsupported PGM dtype {arr.dtype}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(payload)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8)


def depth_to_u16(depth: np.ndarray) -> np.ndarray:
    units = np.rint(np.asarray(depth) / DEPTH_METERS_PER_UNIT)
    return np.clip(units, 0, 65535).astype(np.uint16)


def u16_to_depth(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) * DEPTH_METERS_PER_UNIT


def unit_to_u16(values: np.ndarray) -> np.ndarray:
    """Quantize values in [0, 1] to the full 16-bit range."""
    return np.rint(np.clip(values, 0.0, 1.0) * 65535).astype(np.uint16)


def mask_to_u8(mask: np.ndarray) -> np.ndarray:
    return np.where(mask, 255, 0).astype(np.uint8)


def write_json(path, obj) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(text + "\n")
    os.replace(tmp, path)


def read_json(path):
    return json.loads(Path(path).read_text())
