"""Binary framing for server/client messages.

    magic u32 | version u8 | kind u8 | flags u8 | reserved u8
    | round u32 | sender u32 | payload_len u64 | payload | crc32 u32

All integers little-endian; the CRC (IEEE) covers the payload only.
"""

from __future__ import annotations

import enum
import json
import struct
import zlib
from dataclasses import dataclass

from fedtune.comm import CodecFlags, compress, decode_tree, decompress, encode_tree
from fedtune.errors import DecodeError, ProtocolError, TransportError
from fedtune.tree import ParamTree

MAGIC = 0x46534C4D
VERSION = 1
HEADER = struct.Struct("<IBBBBIIQ")
TRAILER = struct.Struct("<I")
SERVER_ID = 0
MAX_PAYLOAD = 1 << 32


class Kind(enum.IntEnum):
    MODEL_BROADCAST = 1
    ADAPTER_UPLOAD = 2
    ADAPTER_DISTRIBUTE = 3
    EVAL_REQUEST = 4
    EVAL_REPORT = 5
    FINISH = 6


TREE_KINDS = {Kind.MODEL_BROADCAST, Kind.ADAPTER_UPLOAD, Kind.ADAPTER_DISTRIBUTE}


@dataclass(frozen=True)
class Message:
    kind: Kind
    round: int
    sender: int
    flags: CodecFlags
    payload: bytes

    def tree(self) -> ParamTree:
        return decode_tree(self.payload, self.flags)

    def record(self) -> dict:
        if not self.payload:
            return {}
        try:
            return json.loads(decompress(self.payload, self.flags.codec).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DecodeError(f"malformed metrics record: {exc}") from exc


def tree_message(kind: Kind, rnd: int, sender: int, tree: ParamTree, flags: CodecFlags) -> Message:
    return Message(kind, rnd, sender, flags, encode_tree(tree, flags))


def record_message(kind: Kind, rnd: int, sender: int, record: dict, flags: CodecFlags) -> Message:
    # metrics records are JSON; the dtype bits are meaningless for them
    f = CodecFlags(flags.codec, "f32")
    body = json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return Message(kind, rnd, sender, f, compress(body, f.codec))


def encode_frame(msg: Message) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, int(msg.kind), msg.flags.to_byte(), 0,
                         msg.round, msg.sender, len(msg.payload))
    return header + msg.payload + TRAILER.pack(zlib.crc32(msg.payload) & 0xFFFFFFFF)


def _parse_header(buf: bytes):
    magic, version, kind, flags, reserved, rnd, sender, length = HEADER.unpack(buf)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if reserved != 0:
        raise ProtocolError("reserved header byte must be zero")
    try:
        kind = Kind(kind)
        codec_flags = CodecFlags.from_byte(flags)
    except (ValueError, DecodeError) as exc:
        raise ProtocolError(str(exc)) from exc
    if length >= MAX_PAYLOAD:
        raise ProtocolError(f"payload length {length} too large")
    return kind, codec_flags, rnd, sender, length


def decode_frame(buf: bytes) -> Message:
    """Decode exactly one frame occupying all of ``buf``."""
    if len(buf) < HEADER.size + TRAILER.size:
        raise ProtocolError("frame too short")
    kind, flags, rnd, sender, length = _parse_header(buf[:HEADER.size])
    if len(buf) != HEADER.size + length + TRAILER.size:
        raise ProtocolError("frame length does not match payload_len")
    payload = bytes(buf[HEADER.size:HEADER.size + length])
    (crc,) = TRAILER.unpack(buf[HEADER.size + length:])
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise ProtocolError("crc mismatch")
    return Message(kind, rnd, sender, flags, payload)


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 20))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock) -> Message:
    """Blocking read of one frame from a stream socket."""
    head = _recv_exact(sock, HEADER.size)
    _, _, _, _, length = _parse_header(head)
    rest = _recv_exact(sock, length + TRAILER.size)
    return decode_frame(head + rest)


def write_frame(sock, msg: Message) -> None:
    try:
        sock.sendall(encode_frame(msg))
    except OSError as exc:
        raise TransportError(f"send failed: {exc}") from exc
