"""Reduced-precision emulation and canonical-order linear algebra.

Every value lives in float32 storage.  ``quantize`` snaps it onto the value
grid of the compute width (1 = E4M3, 2 = IEEE half, 4 = float32 itself), and
the reductions below always accumulate in ascending index order so that a
replayed computation produces the same bits as the original.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32
E4M3_MAX = 448.0
_E4M3_MIN_EXP = -6  # smallest normal exponent; subnormal spacing is 2**-9


def _e4m3_table() -> np.ndarray:
    """All 256 E4M3 (fn variant) code points decoded to float32; NaN codes map to nan."""
    out = np.empty(256, dtype=np.float64)
    for code in range(256):
        s = -1.0 if code & 0x80 else 1.0
        e = (code >> 3) & 0xF
        m = code & 0x7
        if e == 0xF and m == 0x7:
            out[code] = np.nan
        elif e == 0:
            out[code] = s * m * 2.0 ** -9
        else:
            out[code] = s * (1 + m / 8) * 2.0 ** (e - 7)
    return out.astype(F32)


E4M3_VALUES = _e4m3_table()
_POS = E4M3_VALUES[:0x7F]  # codes 0x00..0x7E, ascending, finite


def quantize_e4m3(x: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even onto the E4M3 grid, saturating at +-448."""
    x = np.asarray(x, dtype=F32)
    a = np.abs(x).astype(np.float64)
    _, ex = np.frexp(a)
    e = np.maximum(ex - 1, _E4M3_MIN_EXP)
    quantum = np.ldexp(1.0, e - 3)
    q = np.round(a / quantum) * quantum  # np.round is half-to-even
    q = np.minimum(q, E4M3_MAX)
    return (np.sign(x) * q).astype(F32)


def quantize(master: np.ndarray, width: int) -> np.ndarray:
    """Compute-precision copy of ``master`` (returned in float32 storage)."""
    master = np.asarray(master, dtype=F32)
    if width == 4:
        return master.copy()
    if width == 2:
        # numpy's float32->float16 cast rounds half to even; overflow goes to inf
        return master.astype(np.float16).astype(F32)
    if width == 1:
        return quantize_e4m3(master)
    raise ValueError(f"unsupported compute width {width} (expected 1, 2 or 4)")


def encode(values: np.ndarray, width: int) -> bytes:
    """Pack already-quantized values at ``width`` bytes each (little endian)."""
    values = np.asarray(values, dtype=F32)
    if width == 4:
        return values.astype("<f4").tobytes()
    if width == 2:
        return values.astype("<f2").tobytes()
    if width == 1:
        mag = np.abs(values)
        idx = np.searchsorted(_POS, mag)
        idx = np.minimum(idx, len(_POS) - 1)
        if not np.array_equal(_POS[idx], mag):
            raise ValueError("value not on the E4M3 grid; quantize first")
        codes = idx.astype(np.uint8) | np.where(np.signbit(values), 0x80, 0).astype(np.uint8)
        return codes.tobytes()
    raise ValueError(f"unsupported compute width {width}")


def decode(buf: bytes, width: int) -> np.ndarray:
    if width == 4:
        return np.frombuffer(buf, dtype="<f4").astype(F32)
    if width == 2:
        return np.frombuffer(buf, dtype="<f2").astype(F32)
    if width == 1:
        return E4M3_VALUES[np.frombuffer(buf, dtype=np.uint8)]
    raise ValueError(f"unsupported compute width {width}")


def cmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b with the inner dimension accumulated strictly left to right."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=F32)
    for i in range(a.shape[1]):
        out += a[:, i : i + 1] * b[i : i + 1, :]
    return out


def csum(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Sequential sum along ``axis`` (index 0 first)."""
    x = np.moveaxis(np.asarray(x, dtype=F32), axis, 0)
    out = np.zeros(x.shape[1:], dtype=F32)
    for i in range(x.shape[0]):
        out += x[i]
    return out
