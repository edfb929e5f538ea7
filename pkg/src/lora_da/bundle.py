"""Bit-exact container for named dense tensors plus scalar metadata.

This is the wire format every tool in this project speaks: statistics
exporters write it, the init/train commands read it. The layout is a fixed
little-endian framing (magic ``LDB1``, version 1) so that writers in other
languages can produce byte-identical files.

Layout::

    magic  "LDB1" | version u32 | meta_count u32 | entry_count u32
    meta record:  name_len u16 | name utf-8 | kind u8 (0=i64, 1=f64) | value 8B
    entry record: name_len u16 | name utf-8 | dtype u8 (0=f32, 1=f64)
                  | ndim u8 | dims u64 each | payload (row-major, raw)

Meta records are written in sorted key order so that logically equal bundles
serialize to identical bytes; entry order is preserved as given.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LDB1"
VERSION = 1
MAX_NDIM = 4
_HEADER = struct.Struct("<4sIII")

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class BundleError(Exception):
    """Malformed, truncated or otherwise unusable bundle data."""

    def __init__(self, message, partial_names=None):
        super().__init__(message)
        self.partial_names = list(partial_names) if partial_names else []


@dataclass
class TensorEntry:
    """One named tensor: float32 or float64, at most 4 dims, row-major."""

    name: str
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data)
        if arr.dtype not in _DTYPE_CODES:
            raise BundleError(
                f"entry {self.name!r}: dtype {arr.dtype} unsupported (f32/f64 only)"
            )
        if arr.ndim > MAX_NDIM:
            raise BundleError(f"entry {self.name!r}: {arr.ndim} dims exceeds {MAX_NDIM}")
        if any(d < 1 for d in arr.shape):
            raise BundleError(f"entry {self.name!r}: zero-sized dim in {arr.shape}")
        if len(self.name.encode("utf-8")) > 0xFFFF:
            raise BundleError("entry name longer than 65535 bytes")
        self.data = arr

    def __eq__(self, other):
        if not isinstance(other, TensorEntry):
            return NotImplemented
        return (
            self.name == other.name
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class TensorBundle:
    """Ordered tensor entries plus a flat map of integer/float metadata.

    Immutable by convention once written; readers may share an instance
    across threads freely.
    """

    entries: list[TensorEntry] = field(default_factory=list)
    meta: dict[str, int | float] = field(default_factory=dict)

    def add(self, name: str, data: np.ndarray) -> "TensorBundle":
        if any(e.name == name for e in self.entries):
            raise BundleError(f"duplicate entry name {name!r}")
        self.entries.append(TensorEntry(name, data))
        return self

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def has(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    def get(self, name: str) -> TensorEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise BundleError(
            f"missing entry {name!r}; available: {', '.join(self.names()) or '(none)'}"
        )

    def get_matrix(self, name: str, expect_dims=None) -> np.ndarray:
        """Return an entry as float64, checking shape when ``expect_dims`` is given.

        Float32 payloads are widened exactly (every f32 value is representable
        in f64). Entries with more than 2 dims are rejected.
        """
        entry = self.get(name)
        if entry.data.ndim > 2:
            raise BundleError(f"entry {name!r} has {entry.data.ndim} dims, expected <= 2")
        if expect_dims is not None and tuple(entry.data.shape) != tuple(expect_dims):
            raise BundleError(
                f"entry {name!r} has dims {entry.data.shape}, expected {tuple(expect_dims)}"
            )
        return entry.data.astype(np.float64, copy=True)

    def __eq__(self, other):
        if not isinstance(other, TensorBundle):
            return NotImplemented
        return self.entries == other.entries and self.meta == other.meta


def _validate_meta_value(key, value):
    if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
        raise BundleError(f"meta {key!r}: value must be int or float, got {type(value).__name__}")


def _encode(bundle: TensorBundle) -> bytes:
    seen = set()
    for e in bundle.entries:
        if e.name in seen:
            raise BundleError(f"duplicate entry name {e.name!r}")
        seen.add(e.name)
    parts = [_HEADER.pack(MAGIC, VERSION, len(bundle.meta), len(bundle.entries))]
    for key in sorted(bundle.meta):
        value = bundle.meta[key]
        _validate_meta_value(key, value)
        kb = key.encode("utf-8")
        if len(kb) > 0xFFFF:
            raise BundleError("meta key longer than 65535 bytes")
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        if isinstance(value, (int, np.integer)):
            parts.append(struct.pack("<Bq", 0, int(value)))
        else:
            parts.append(struct.pack("<Bd", 1, float(value)))
    for e in bundle.entries:
        nb = e.name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _DTYPE_CODES[e.data.dtype], e.data.ndim))
        for d in e.data.shape:
            parts.append(struct.pack("<Q", d))
        # force little-endian payload bytes; on LE hosts this is the raw buffer
        parts.append(e.data.astype(e.data.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(parts)


def write_bundle(bundle: TensorBundle, path) -> None:
    """Serialize atomically: write to a temp file in the same dir, then rename."""
    payload = _encode(bundle)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Cursor:
    def __init__(self, buf, names):
        self.buf = buf
        self.pos = 0
        self.names = names

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise BundleError(
                f"truncated file while reading {what} "
                f"(needed {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}); "
                f"entries parsed so far: {', '.join(self.names) or '(none)'}",
                partial_names=self.names,
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def read_bundle(path) -> TensorBundle:
    """Read a bundle file, or raise :class:`BundleError` describing the defect."""
    with open(path, "rb") as fh:
        buf = fh.read()
    names: list[str] = []
    cur = _Cursor(buf, names)
    head = cur.take(_HEADER.size, "header")
    magic, version, meta_count, entry_count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise BundleError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BundleError(f"unsupported version {version}, expected {VERSION}")
    meta: dict[str, int | float] = {}
    for _ in range(meta_count):
        (klen,) = struct.unpack("<H", cur.take(2, "meta key length"))
        key = cur.take(klen, "meta key").decode("utf-8")
        (kind,) = struct.unpack("<B", cur.take(1, f"meta {key!r} kind"))
        raw = cur.take(8, f"meta {key!r} value")
        if kind == 0:
            meta[key] = struct.unpack("<q", raw)[0]
        elif kind == 1:
            meta[key] = struct.unpack("<d", raw)[0]
        else:
            raise BundleError(f"meta {key!r}: unknown kind {kind}")
    entries: list[TensorEntry] = []
    for _ in range(entry_count):
        (nlen,) = struct.unpack("<H", cur.take(2, "entry name length"))
        name = cur.take(nlen, "entry name").decode("utf-8")
        dtype_code, ndim = struct.unpack("<BB", cur.take(2, f"entry {name!r} header"))
        if dtype_code not in _CODE_DTYPES:
            raise BundleError(f"entry {name!r}: unknown dtype code {dtype_code}")
        if ndim > MAX_NDIM:
            raise BundleError(f"entry {name!r}: ndim {ndim} exceeds {MAX_NDIM}")
        dims = [struct.unpack("<Q", cur.take(8, f"entry {name!r} dims"))[0] for _ in range(ndim)]
        if any(d < 1 for d in dims):
            raise BundleError(f"entry {name!r}: zero-sized dim in {dims}")
        dtype = _CODE_DTYPES[dtype_code]
        count = 1
        for d in dims:
            count *= d
        raw = cur.take(count * dtype.itemsize, f"entry {name!r} payload")
        data = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        if name in (e.name for e in entries):
            raise BundleError(f"duplicate entry name {name!r} in file")
        entries.append(TensorEntry(name, data))
        names.append(name)
    if cur.pos != len(buf):
        raise BundleError(
            f"{len(buf) - cur.pos} trailing bytes after last entry", partial_names=names
        )
    return TensorBundle(entries=entries, meta=meta)
