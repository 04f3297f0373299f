"""Versioned binary container for snapshot records and dense checkpoints.

Layout (little endian)::

    header   magic "SPCK" | u16 version | u8 kind | u8 compute_bytes
             i64 iteration | i64 window_start | u32 window | u32 slot
             u64 seed | i64 cursor | u32 n_entries
    entry    u16 id_len | id (utf-8) | u8 mode | i64 step | u64 n_params | payload
             Full: master f32[n] | m f32[n] | v f32[n]
             ComputeOnly: compute weights at ``compute_bytes`` per value
    trailer  8-byte BLAKE2b digest of everything before it
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from ..core import SnapshotMode
from .numerics import decode, encode
from .snapshot import DENSE, SPARSE, Entry, SnapshotRecord

MAGIC = b"SPCK"
VERSION = 1
_HDR = struct.Struct("<4sHBBqqIIQqI")
_ENT = struct.Struct("<BqQ")
_KINDS = {DENSE: 0, SPARSE: 1}
_MODES = {SnapshotMode.FULL: 0, SnapshotMode.COMPUTE_ONLY: 1}


class CorruptRecord(ValueError):
    pass


def _digest(b: bytes) -> bytes:
    return hashlib.blake2b(b, digest_size=8).digest()


def to_bytes(rec: SnapshotRecord) -> bytes:
    parts = [_HDR.pack(MAGIC, VERSION, _KINDS[rec.kind], rec.compute_bytes, rec.iteration, rec.window_start,
                       rec.window, rec.slot, rec.seed, rec.cursor, len(rec.entries))]
    for e in rec.entries:
        ident = e.id.encode()
        parts.append(struct.pack("<H", len(ident)) + ident)
        if e.mode == SnapshotMode.FULL:
            parts.append(_ENT.pack(0, e.step, e.master.size))
            for a in (e.master, e.m, e.v):
                parts.append(np.asarray(a, dtype="<f4").tobytes())
        else:
            parts.append(_ENT.pack(1, e.step, e.compute.size))
            parts.append(encode(e.compute, rec.compute_bytes))
    body = b"".join(parts)
    return body + _digest(body)


def from_bytes(buf: bytes, slot_hint: int | None = None) -> SnapshotRecord:
    where = f"slot {slot_hint}" if slot_hint is not None else "record"
    if len(buf) < _HDR.size + 8:
        raise CorruptRecord(f"{where}: truncated")
    body, tail = buf[:-8], buf[-8:]
    if _digest(body) != tail:
        raise CorruptRecord(f"{where}: checksum mismatch")
    magic, ver, kind, cb, it, ws, w, slot, seed, cursor, n = _HDR.unpack_from(body, 0)
    if magic != MAGIC or ver != VERSION:
        raise CorruptRecord(f"{where}: bad magic/version")
    off = _HDR.size
    ents = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", body, off)
        off += 2
        ident = body[off : off + ln].decode()
        off += ln
        mode, step, cnt = _ENT.unpack_from(body, off)
        off += _ENT.size
        if mode == 0:
            arrs = []
            for _ in range(3):
                arrs.append(np.frombuffer(body, dtype="<f4", count=cnt, offset=off).astype(np.float32))
                off += 4 * cnt
            ents.append(Entry(ident, SnapshotMode.FULL, step, *arrs))
        else:
            nb = cnt * cb
            ents.append(Entry(ident, SnapshotMode.COMPUTE_ONLY, step, compute=decode(body[off : off + nb], cb)))
            off += nb
    if off != len(body):
        raise CorruptRecord(f"{where}: trailing bytes")
    kind_name = {v: k for k, v in _KINDS.items()}[kind]
    return SnapshotRecord(kind_name, it, ws, w, slot, seed, cursor, cb, tuple(ents))
