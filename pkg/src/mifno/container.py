"""Binary dataset container.

Layout (all integers little-endian):

    magic \"MFNO\" | version u16 | endian flag u8 (1 = little) | count u32
    entry table, per entry:
        name_len u16 | name UTF-8 | dtype tag u8 | rank u8 |
        shape u64 * rank | offset u64 | byte_length u64 | crc32 u32
    payload: contiguous row-major array bytes at the stated offsets

CRCs cover each entry's payload bytes. Writes go to a temporary file in
the same directory followed by an atomic rename, so a crashed write never
leaves a file carrying a valid magic.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"MFNO"
VERSION = 1

# tag -> numpy dtype; complex payloads are stored as interleaved f64 pairs
_TAGS = {0: np.float64, 1: np.complex128, 2: np.int64, 3: np.uint8, 4: np.float32}
_TAG_OF = {np.dtype(np.float64): 0, np.dtype(np.complex128): 1,
           np.dtype(np.int64): 2, np.dtype(np.uint8): 3, np.dtype(np.float32): 4}

CANONICAL_NAMES = (
    "geology/vs", "geology/vp", "geology/rho",
    "source/position", "source/angles", "source/moment",
    "wavefield/data", "wavefield/dt",
    "meta/seed", "meta/provenance",
)


class ContainerError(Exception):
    """Base class for container format violations."""


class MagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def _coerce(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype not in _TAG_OF:
        if np.issubdtype(arr.dtype, np.complexfloating):
            arr = arr.astype(np.complex128, copy=False)
        elif np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64, copy=False)
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int64, copy=False)
        else:
            raise TypeError(f"unsupported dtype {arr.dtype}")
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # never hit by 0-d arrays
    return arr


def write_container(path, entries: dict) -> None:
    """Write named arrays to `path` atomically.

    `entries` maps unique names to arrays; dtypes outside
    {f64, c128, i64, u8, f32} are coerced to the nearest supported one.
    """
    names = list(entries)
    if len(set(names)) != len(names):
        raise ValueError("entry names must be unique")
    arrays = {}
    for name in names:
        if not name or len(name.encode("utf-8")) > 65535:
            raise ValueError(f"bad entry name {name!r}")
        arrays[name] = _coerce(entries[name])

    table = io.BytesIO()
    payload = io.BytesIO()
    offset = 0
    for name in names:
        arr = arrays[name]
        raw = arr.tobytes()
        crc = zlib.crc32(raw)
        nb = name.encode("utf-8")
        table.write(struct.pack("<H", len(nb)))
        table.write(nb)
        table.write(struct.pack("<BB", _TAG_OF[arr.dtype], arr.ndim))
        table.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        table.write(struct.pack("<QQI", offset, len(raw), crc))
        payload.write(raw)
        offset += len(raw)

    header = MAGIC + struct.pack("<HBI", VERSION, 1, len(names))
    blob = header + table.getvalue() + payload.getvalue()

    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".mfno-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, names=None) -> dict:
    """Read a container back into {name: array}.

    Every returned entry has passed its CRC check. Magic mismatch,
    truncation, and checksum failure raise distinct errors. Passing
    `names` restricts reading (and checksumming) to those entries.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 11:
        raise TruncatedError(f"{path}: too short for a container header")
    if blob[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {blob[:4]!r}")
    version, endian, count = struct.unpack("<HBI", blob[4:11])
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version}")
    if endian != 1:
        raise ContainerError(f"{path}: unsupported byte order flag {endian}")

    pos = 11
    metas = []
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos: pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            offset, length, crc = struct.unpack_from("<QQI", blob, pos)
            pos += 20
        except struct.error as exc:
            raise TruncatedError(f"{path}: entry table cut short") from exc
        if tag not in _TAGS:
            raise ContainerError(f"{path}: unknown dtype tag {tag} for {name!r}")
        metas.append((name, tag, shape, offset, length, crc))

    base = pos
    out = {}
    for name, tag, shape, offset, length, crc in metas:
        if names is not None and name not in names:
            continue
        start, stop = base + offset, base + offset + length
        if stop > len(blob):
            raise TruncatedError(f"{path}: payload of {name!r} beyond end of file")
        raw = blob[start:stop]
        if zlib.crc32(raw) != crc:
            raise ChecksumError(f"{path}: checksum mismatch in entry {name!r}")
        dtype = _TAGS[tag]
        n_expected = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(raw, dtype=dtype)
        if arr.size != n_expected:
            raise ContainerError(f"{path}: size mismatch in entry {name!r}")
        out[name] = arr.reshape(shape).copy()
    if names is not None:
        missing = set(names) - set(out)
        if missing:
            raise KeyError(f"{path}: missing entries {sorted(missing)}")
    return out


def list_entries(path) -> list:
    """Entry summaries (name, dtype, shape, bytes) without payload reads."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 11:
        raise TruncatedError(f"{path}: too short for a container header")
    if blob[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {blob[:4]!r}")
    _, _, count = struct.unpack("<HBI", blob[4:11])
    pos = 11
    infos = []
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos: pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            _, length, _ = struct.unpack_from("<QQI", blob, pos)
            pos += 20
        except struct.error as exc:
            raise TruncatedError(f"{path}: entry table cut short") from exc
        infos.append({"name": name, "dtype": np.dtype(_TAGS.get(tag, np.uint8)).name,
                      "shape": tuple(int(s) for s in shape), "bytes": int(length)})
    return infos
