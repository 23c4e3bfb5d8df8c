"""Message codecs: parameter streaming, 16/8-bit quantisation, DEFLATE/Gzip,
and the cost ledger.

Payload layout (little-endian)::

    count u32
    per entry: name_len u16 | name utf8 | rank u8 | dims u32 * rank
               | dtype u8 | [scale f32 when dtype == i8] | data

The same bytes are the wire payload and the ``.fsp`` checkpoint format.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from fedtune.errors import ConfigError, DecodeError, UsageError
from fedtune.tree import HALF_MAX, ParamTree

CODECS = {"none": 0, "deflate": 1, "gzip": 2}
DTYPES = {"f32": 0, "f16": 1, "i8": 2}
DTYPE_BY_BITS = {32: "f32", 16: "f16", 8: "i8"}
_CODEC_NAMES = {v: k for k, v in CODECS.items()}
_DTYPE_NAMES = {v: k for k, v in DTYPES.items()}
_NUMPY = {"f32": "<f4", "f16": "<f2", "i8": "i1"}

I8_LEVELS = 127


@dataclass(frozen=True)
class CodecFlags:
    codec: str = "none"
    dtype: str = "f32"

    def __post_init__(self):
        if self.codec not in CODECS:
            raise ConfigError(f"unknown codec {self.codec!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"unknown dtype {self.dtype!r}")

    def to_byte(self) -> int:
        return CODECS[self.codec] | (DTYPES[self.dtype] << 2)

    @classmethod
    def from_byte(cls, b: int) -> CodecFlags:
        codec, dtype = b & 0b11, (b >> 2) & 0b11
        if b >> 4 or codec not in _CODEC_NAMES or dtype not in _DTYPE_NAMES:
            raise DecodeError(f"invalid flags byte 0x{b:02x}")
        return cls(_CODEC_NAMES[codec], _DTYPE_NAMES[dtype])


# --------------------------------------------------------------------------
# quantisation


def quantize_i8(x: np.ndarray) -> tuple[float, np.ndarray]:
    """Symmetric per-tensor int8 codes; the scale is stored (and used) as float32."""
    x = np.asarray(x, dtype=np.float64)
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    scale = float(np.float32(amax / I8_LEVELS)) if amax > 0 else 1.0
    if scale == 0.0:
        # amax/127 underflowed float32
        scale = float(np.finfo(np.float32).smallest_subnormal)
    codes = np.clip(np.rint(x / scale), -I8_LEVELS, I8_LEVELS).astype(np.int8)
    return scale, codes


def dequantize_i8(scale: float, codes: np.ndarray) -> np.ndarray:
    return codes.astype(np.float64) * scale


def _to_half(v: np.ndarray) -> np.ndarray:
    return np.clip(v, -HALF_MAX, HALF_MAX).astype("<f2")


def quantize_tree(tree: ParamTree, dtype: str) -> ParamTree:
    """The values a receiver reconstructs after sending ``tree`` at ``dtype``."""
    if dtype == "f32":
        return tree.map(lambda v: v.astype(np.float32).astype(np.float64))
    if dtype == "f16":
        return tree.map(lambda v: _to_half(v).astype(np.float64))
    if dtype == "i8":
        return tree.map(lambda v: dequantize_i8(*quantize_i8(v)))
    raise ConfigError(f"unknown dtype {dtype!r}")


# --------------------------------------------------------------------------
# streaming serialisation


def serialize_params(tree: ParamTree, dtype: str = "f32") -> bytes:
    if dtype not in DTYPES:
        raise ConfigError(f"unknown dtype {dtype!r}")
    out = [struct.pack("<I", len(tree))]
    for name, v in tree.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise UsageError(f"parameter name too long: {name[:40]}...")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape))
        out.append(struct.pack("<B", DTYPES[dtype]))
        if dtype == "i8":
            scale, codes = quantize_i8(v)
            out.append(struct.pack("<f", scale))
            out.append(codes.tobytes())
        elif dtype == "f16":
            out.append(_to_half(v).tobytes())
        else:
            out.append(v.astype("<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if n < 0 or self.pos + n > len(self.buf):
            raise DecodeError(f"truncated payload: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_params(buf: bytes) -> ParamTree:
    r = _Reader(buf)
    (count,) = r.unpack("<I")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = bytes(r.take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("parameter name is not valid UTF-8") from exc
        if name in entries:
            raise DecodeError(f"duplicate parameter name {name!r}")
        (rank,) = r.unpack("<B")
        if rank not in (1, 2):
            raise DecodeError(f"unsupported tensor rank {rank}")
        dims = r.unpack(f"<{rank}I")
        if 0 in dims:
            raise DecodeError(f"empty tensor {name!r}")
        size = int(np.prod(dims))
        (code,) = r.unpack("<B")
        if code not in _DTYPE_NAMES:
            raise DecodeError(f"unknown dtype code {code}")
        dtype = _DTYPE_NAMES[code]
        if dtype == "i8":
            (scale,) = r.unpack("<f")
            codes = np.frombuffer(r.take(size), dtype="i1")
            if np.any(codes == -128):
                raise DecodeError("int8 code -128 is outside the symmetric range")
            arr = dequantize_i8(scale, codes)
        else:
            width = 4 if dtype == "f32" else 2
            arr = np.frombuffer(r.take(size * width), dtype=_NUMPY[dtype]).astype(np.float64)
        if not np.isfinite(arr).all():
            raise DecodeError(f"non-finite values in {name!r}")
        entries[name] = arr.reshape(dims)
    if r.pos != len(r.buf):
        raise DecodeError(f"{len(r.buf) - r.pos} trailing bytes after {count} entries")
    return ParamTree(entries)


def data_section_bytes(tree: ParamTree, dtype: str) -> int:
    """Bytes of the typed data sections alone (i8 includes the 4-byte scale)."""
    width = {"f32": 4, "f16": 2, "i8": 1}[dtype]
    extra = 4 if dtype == "i8" else 0
    return sum(v.size * width + extra for v in tree.values())


def save_checkpoint(tree: ParamTree, path, dtype: str = "f32") -> None:
    Path(path).write_bytes(serialize_params(tree, dtype))


def load_checkpoint(path) -> ParamTree:
    return deserialize_params(Path(path).read_bytes())


# --------------------------------------------------------------------------
# compression


def compress(data: bytes, codec: str) -> bytes:
    if codec == "none":
        return bytes(data)
    if codec == "deflate":
        return zlib.compress(data, 9)
    if codec == "gzip":
        # mtime pinned so identical inputs give identical bytes
        return gzip.compress(data, compresslevel=9, mtime=0)
    raise ConfigError(f"unknown codec {codec!r}")


def decompress(data: bytes, codec: str) -> bytes:
    try:
        if codec == "none":
            return bytes(data)
        if codec == "deflate":
            return zlib.decompress(data)
        if codec == "gzip":
            return gzip.decompress(data)
    except (zlib.error, OSError, EOFError) as exc:
        raise DecodeError(f"corrupt {codec} stream: {exc}") from exc
    raise ConfigError(f"unknown codec {codec!r}")


def encode_tree(tree: ParamTree, flags: CodecFlags) -> bytes:
    """quantise -> serialise -> compress."""
    return compress(serialize_params(tree, flags.dtype), flags.codec)


def decode_tree(payload: bytes, flags: CodecFlags) -> ParamTree:
    return deserialize_params(decompress(payload, flags.codec))


def transport(tree: ParamTree, flags: CodecFlags) -> ParamTree:
    return decode_tree(encode_tree(tree, flags), flags)


# --------------------------------------------------------------------------
# cost accounting


def estimate_transmission_time(payload_bytes: float, bandwidth_bps: float, directions: int = 1) -> float:
    """Seconds to move ``payload_bytes`` ``directions`` times at ``bandwidth_bps`` bits/s."""
    if bandwidth_bps <= 0:
        raise ConfigError("bandwidth must be positive")
    if payload_bytes < 0 or directions < 0:
        raise UsageError("payload size and direction count must be non-negative")
    return directions * payload_bytes * 8.0 / bandwidth_bps


@dataclass(frozen=True)
class CostLedger:
    bytes_up: int = 0
    bytes_down: int = 0
    flops: int = 0
    wall_seconds: float = 0.0
    param_bytes_resident: int = 0
    warnings: tuple[str, ...] = field(default=())

    def as_dict(self) -> dict:
        return {
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "flops": self.flops,
            "seconds": self.wall_seconds,
            "param_bytes_resident": self.param_bytes_resident,
            "warnings": list(self.warnings),
        }

    def __add__(self, other: CostLedger) -> CostLedger:
        return ledger_record(self, bytes_up=other.bytes_up, bytes_down=other.bytes_down, flops=other.flops,
                             seconds=other.wall_seconds, resident=other.param_bytes_resident,
                             warnings=other.warnings)


def ledger_record(ledger: CostLedger, *, bytes_up: int = 0, bytes_down: int = 0, flops: int = 0,
                  seconds: float = 0.0, resident: int = 0, warnings=()) -> CostLedger:
    """Pure update; every delta must be non-negative. Residency is a high-water mark."""
    if min(bytes_up, bytes_down, flops, seconds, resident) < 0:
        raise UsageError("ledger deltas must be non-negative")
    return replace(
        ledger,
        bytes_up=ledger.bytes_up + int(bytes_up),
        bytes_down=ledger.bytes_down + int(bytes_down),
        flops=ledger.flops + int(flops),
        wall_seconds=ledger.wall_seconds + float(seconds),
        param_bytes_resident=max(ledger.param_bytes_resident, int(resident)),
        warnings=ledger.warnings + tuple(warnings),
    )
