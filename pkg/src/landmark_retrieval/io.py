"""Binary and text file formats.

EMB1 layout (all little-endian)::

    b"EMB1" | u32 count N | u32 dim D
    N x ( u16 id length L | L bytes UTF-8 id | u64 label | D x f32 )

Values are stored as float32; reading yields float64 arrays holding the
exact float32 values.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable, List, Sequence

import numpy as np

from .core import LabeledEmbedding
from .exceptions import DimMismatchError, FormatError

EMB_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
_ID_LEN = struct.Struct("<H")
_LABEL = struct.Struct("<Q")


def encode_embeddings(rows: Sequence[LabeledEmbedding]) -> bytes:
    dim = rows[0].dim if rows else 0
    parts = [_HEADER.pack(EMB_MAGIC, len(rows), dim)]
    for row in rows:
        if row.dim != dim:
            raise DimMismatchError(f"row {row.id!r} has dim {row.dim}, expected {dim}")
        with np.errstate(over="ignore"):
            values = np.asarray(row.vector, dtype="<f4")
        if not np.all(np.isfinite(values)):
            raise FormatError(f"row {row.id!r} is not finite at float32 precision")
        ident = row.id.encode("utf-8")
        if len(ident) > 0xFFFF:
            raise FormatError(f"id {row.id[:20]!r}... longer than 65535 bytes")
        if row.label > 0xFFFFFFFFFFFFFFFF:
            raise FormatError(f"label {row.label} does not fit in u64")
        parts += [_ID_LEN.pack(len(ident)), ident, _LABEL.pack(row.label), values.tobytes()]
    return b"".join(parts)


def decode_embeddings(data: bytes) -> List[LabeledEmbedding]:
    if len(data) < _HEADER.size:
        raise FormatError("truncated EMB1 header")
    magic, count, dim = _HEADER.unpack_from(data, 0)
    if magic != EMB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}")
    if count and dim == 0:
        raise FormatError("non-empty file declares dim 0")
    pos = _HEADER.size
    payload = 4 * dim
    rows = []
    for i in range(count):
        if pos + _ID_LEN.size > len(data):
            raise FormatError(f"truncated record {i}")
        (n,) = _ID_LEN.unpack_from(data, pos)
        pos += _ID_LEN.size
        end = pos + n + _LABEL.size + payload
        if end > len(data):
            raise FormatError(f"truncated record {i}")
        try:
            ident = data[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"record {i}: id is not UTF-8") from exc
        pos += n
        (label,) = _LABEL.unpack_from(data, pos)
        pos += _LABEL.size
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += payload
        try:
            rows.append(LabeledEmbedding(ident, label, vec))
        except (ValueError, FormatError) as exc:
            raise FormatError(f"record {i}: {exc}") from exc
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after {count} records")
    return rows


def write_embeddings(path, rows: Sequence[LabeledEmbedding]) -> None:
    data = encode_embeddings(list(rows))
    Path(path).write_bytes(data)


def read_embeddings(path) -> List[LabeledEmbedding]:
    return decode_embeddings(Path(path).read_bytes())


def write_manifest(path, records: Iterable[dict]) -> None:
    """JSON-lines manifest, one ``{"id", "label", "split"}`` record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# --- PPM / PGM -------------------------------------------------------------


def write_pnm(path, image: np.ndarray) -> None:
    """Write an ``(H, W, 1|3)`` image in [0, 1] as binary PGM (P5) or PPM (P6)."""
    img = np.asarray(image, dtype=np.float64)
    h, w, c = img.shape
    if c not in (1, 3):
        raise FormatError(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P6" if c == 3 else b"P5"
    pixels = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def _pnm_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _pnm_tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("non-integer PNM header field") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    c = 3 if magic == b"P6" else 1
    n = w * h * c
    if len(data) - pos < n:
        raise FormatError("truncated PNM raster")
    raster = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return raster.reshape(h, w, c).astype(np.float64) / 255.0
