"""On-disk formats: pose datasets, JSON Lines streams, digests.

Pose dataset (binary): b"XDEXPOSE", u32 LE count N, u32 LE dim, then
N*dim little-endian float32 values, row-major. CSV fallback: ``dim``
comma-separated columns per line, no header.

Column layout of a 45-D pose row: 15 axis-angle triples, finger-major
(thumb, index, middle, ring, little), proximal to distal (MCP, PIP, DIP).
Motion-capture exports that use this per-joint order can be converted
with :func:`poses_from_hand_pose`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Iterable

import numpy as np

POSE_MAGIC = b"XDEXPOSE"


class FormatError(ValueError):
    """Input file does not follow the expected layout."""


def write_poses(path: str | Path, poses) -> None:
    X = np.asarray(poses, dtype="<f4")
    if X.ndim != 2:
        raise ValueError("poses must be a 2-D array")
    with open(path, "wb") as fh:
        fh.write(POSE_MAGIC)
        fh.write(struct.pack("<II", X.shape[0], X.shape[1]))
        fh.write(np.ascontiguousarray(X).tobytes())


def write_poses_csv(path: str | Path, poses) -> None:
    X = np.asarray(poses, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for row in X:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_poses(path: str | Path, dim: int = 45) -> np.ndarray:
    """Read a binary or CSV pose dataset as float64 (N, dim)."""
    raw = Path(path).read_bytes()
    if raw[:8] == POSE_MAGIC:
        return _decode_binary(raw, dim)
    if _looks_binary(raw):
        raise FormatError(
            f"{path}: bad magic bytes {raw[:8]!r}, expected {POSE_MAGIC!r}"
        )
    return _decode_csv(raw.decode("utf-8"), dim, path)


def _looks_binary(raw: bytes) -> bool:
    head = raw[:64]
    try:
        text = head.decode("utf-8")
    except UnicodeDecodeError:
        return True
    return any(c not in "0123456789+-.eEinfaINFA, \t\r\n" for c in text)


def _decode_binary(raw: bytes, dim: int) -> np.ndarray:
    if len(raw) < 16:
        raise FormatError("truncated pose header at offset 8")
    count, file_dim = struct.unpack_from("<II", raw, 8)
    if file_dim != dim:
        raise FormatError(f"pose dim {file_dim} at offset 12, expected {dim}")
    need = 16 + 4 * count * file_dim
    if len(raw) != need:
        raise FormatError(f"pose payload is {len(raw) - 16} bytes at offset 16, expected {need - 16}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(count, file_dim).astype(np.float64)


def _decode_csv(text: str, dim: int, path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != dim:
            raise FormatError(f"{path}:{lineno}: expected {dim} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, dim)


def poses_from_hand_pose(rows, has_global_orient: bool = False) -> np.ndarray:
    """Pose rows in the 45-column layout from a per-joint axis-angle export.

    With ``has_global_orient`` the first three columns (the wrist rotation,
    held at zero here) are dropped from 48-column rows. Frame filtering and
    any finger reordering remain the caller's job.
    """
    X = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    want = 48 if has_global_orient else 45
    if X.shape[1] != want:
        raise FormatError(f"expected {want} columns, got {X.shape[1]}")
    if has_global_orient:
        X = X[:, 3:]
    if not np.all(np.isfinite(X)):
        raise FormatError("pose rows contain non-finite values")
    return X.copy()


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc.msg}") from exc
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: record must be a JSON object")
            records.append(rec)
    return records


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_json(path: str | Path, payload: Any) -> None:
    # repr-based float output is the shortest exact round-trip form
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
