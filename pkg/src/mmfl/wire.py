"""Bit-exact binary container for parameter sets.

Layout::

    b"FMM1" | u32 little-endian header length | UTF-8 JSON header | payload

The header is ``{"version": 1, "tensors": [...], "crc32": int}``, each tensor
entry giving ``name``, ``shape``, ``dtype`` (always ``"f32"``), and the byte
``offset``/``len`` of its row-major little-endian float32 values inside the
payload. ``crc32`` covers the whole payload.
"""

from __future__ import annotations

import json
import socket
import struct
import zlib
from typing import Mapping

import numpy as np

from .errors import CorruptHeader, LengthMismatch, UnsupportedVersion

MAGIC = b"FMM1"
VERSION = 1
_F32 = np.dtype("<f4")


def pack_container(magic: bytes, header: dict, payload: bytes) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(head)) + head + payload


def unpack_container(blob: bytes, magic: bytes, error=CorruptHeader) -> tuple[dict, bytes]:
    """Split a container into (header dict, payload bytes)."""
    if len(blob) < 8 or blob[:4] != magic:
        raise error(f"bad magic: expected {magic!r}")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    if 8 + hlen > len(blob):
        raise error(f"header length {hlen} exceeds message size {len(blob)}")
    try:
        header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise error(f"unreadable header: {exc}") from None
    if not isinstance(header, dict):
        raise error("header is not a JSON object")
    return header, blob[8 + hlen:]


def serialize_params(params: Mapping[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, value in params.items():
        arr = np.asarray(value)
        if not np.isfinite(arr).all():
            raise ValueError(f"parameter {name!r} has non-finite values")
        raw = np.ascontiguousarray(arr, dtype=_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"version": VERSION, "tensors": entries, "crc32": zlib.crc32(payload)}
    return pack_container(MAGIC, header, payload)


def deserialize_params(blob: bytes) -> dict[str, np.ndarray]:
    header, payload = unpack_container(blob, MAGIC)
    if header.get("version") != VERSION:
        raise UnsupportedVersion(f"unsupported wire version {header.get('version')!r}")
    tensors = header.get("tensors")
    if not isinstance(tensors, list) or "crc32" not in header:
        raise CorruptHeader("header lacks tensors or crc32")
    expected = sum(int(t.get("len", 0)) for t in tensors)
    if expected != len(payload):
        raise LengthMismatch(f"payload is {len(payload)} bytes, header describes {expected}")
    if zlib.crc32(payload) != header["crc32"]:
        raise CorruptHeader("payload checksum mismatch")
    out: dict[str, np.ndarray] = {}
    for t in tensors:
        try:
            name, shape, off, length = t["name"], tuple(t["shape"]), int(t["offset"]), int(t["len"])
        except (KeyError, TypeError, ValueError):
            raise CorruptHeader(f"malformed tensor entry {t!r}") from None
        if t.get("dtype") != "f32":
            raise CorruptHeader(f"unsupported dtype {t.get('dtype')!r}")
        count = int(np.prod(shape, dtype=np.int64))
        if length != 4 * count or off < 0 or off + length > len(payload):
            raise LengthMismatch(f"tensor {name!r}: {length} bytes at {off} for shape {shape}")
        out[name] = np.frombuffer(payload, dtype=_F32, count=count, offset=off).astype(np.float32).reshape(shape)
    return out


class LoopbackTransport:
    """Moves encoded messages through a connected local socket pair.

    Length-prefixed framing; exercises the codec over a byte stream instead
    of passing ``bytes`` objects in memory.
    """

    def __init__(self):
        self._a, self._b = socket.socketpair()

    def roundtrip(self, blob: bytes) -> bytes:
        frame = struct.pack("<Q", len(blob)) + blob
        received = bytearray()
        view = memoryview(frame)
        sent = 0
        while sent < len(frame) or len(received) < len(frame):
            if sent < len(frame):
                sent += self._a.send(view[sent:sent + 65536])
            chunk = self._b.recv(65536)
            received.extend(chunk)
        (n,) = struct.unpack_from("<Q", received, 0)
        return bytes(received[8:8 + n])

    def close(self) -> None:
        self._a.close()
        self._b.close()


def transfer(params: Mapping[str, np.ndarray], transport: LoopbackTransport | None = None) -> dict[str, np.ndarray]:
    """Encode, ship, and decode a parameter set."""
    blob = serialize_params(params)
    if transport is not None:
        blob = transport.roundtrip(blob)
    return deserialize_params(blob)
