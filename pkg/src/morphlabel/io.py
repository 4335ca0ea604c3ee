"""File formats and atomic persistence.

- binary masks: 8-bit binary PGM (P5), foreground 255
- heatmaps / images: raw little-endian float32, row-major, with a JSON
  sidecar {"width", "height", "dtype": "f32", "order": "row-major"}
- checkpoints: one JSON header line (model config + parameter names and
  shapes) followed by the concatenated little-endian float64 buffers
- all writes go through a temp file + rename so interrupted runs leave
  no truncated artifacts
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# PGM masks


def write_pgm(path, mask) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {m.shape}")
    h, w = m.shape
    payload = (np.where(m != 0, 255, 0).astype(np.uint8)).tobytes()
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode("ascii") + payload)


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary (P5) PGM file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos: pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos: pos + 1] == b"#":
            while pos < len(raw) and raw[pos: pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos: pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise DataError(f"{path}: expected 8-bit PGM, maxval={maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    if data.size != w * h:
        raise DataError(f"{path}: truncated PGM payload")
    return (data.reshape(h, w) != 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# raw float32 grids with JSON sidecar


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_raw_f32(path, grid) -> None:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise DataError(f"grid must be 2-D, got shape {g.shape}")
    h, w = g.shape
    atomic_write_bytes(path, g.astype("<f4").tobytes(order="C"))
    write_json(
        sidecar_path(path),
        {"width": w, "height": h, "dtype": "f32", "order": "row-major"},
    )


def read_raw_f32(path) -> np.ndarray:
    meta = read_json(sidecar_path(path))
    if meta.get("dtype") != "f32" or meta.get("order") != "row-major":
        raise DataError(f"{path}: unsupported raw grid metadata {meta}")
    w, h = int(meta["width"]), int(meta["height"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != w * h:
        raise DataError(f"{path}: expected {w * h} f32 values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, named_params, model_config: dict) -> None:
    header = {
        "format": "morphlabel-checkpoint-v1",
        "dtype": "<f8",
        "model": model_config,
        "params": [
            {"name": name, "shape": list(arr.shape)} for name, arr in named_params
        ],
    }
    blob = bytearray(json.dumps(header, sort_keys=True).encode("utf-8"))
    blob += b"\n"
    for _, arr in named_params:
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
    atomic_write_bytes(path, bytes(blob))


def load_checkpoint(path):
    """Returns (model_config dict, {name: float64 array})."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != "morphlabel-checkpoint-v1":
        raise DataError(f"{path}: unknown checkpoint format")
    state = {}
    offset = nl + 1
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        state[entry["name"]] = arr.reshape(shape).astype(np.float64)
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return header["model"], state


# ---------------------------------------------------------------------------
# content hashing for run provenance


def hash_tree(root) -> str:
    """Stable sha256 over the files of a directory (or a single file)."""
    root = Path(root)
    h = hashlib.sha256()
    if root.is_file():
        h.update(root.read_bytes())
        return h.hexdigest()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode("utf-8"))
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()
