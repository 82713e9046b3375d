"""Wire messages and codec for client/server and server/server traffic.

Every message starts with a fixed 44-byte header, all fields little-endian
32-bit unless noted:

    offset  field
    0       magic "VIP1"
    4       msg_type
    8       msg_class
    12      sender_id
    16      recipient_id
    20      client_id
    24      file_id
    28      request_id
    32      status (signed)
    36      param_len
    40      data_len

followed by ``param_len`` bytes of parameters and ``data_len`` bytes of
raw data.  Frames on a stream transport are length-delimited by a u32
prefix; the codec itself is transport-agnostic.

Per-type parameter layouts (all little-endian; strings are u16 length
plus UTF-8 bytes):

    CONNECT reply       u32 client_id, u32 buddy_id
    OPEN                u32 flags, str name, u8 has_layout [, layout json]
    OPEN reply          u32 file_id, u64 size
    READ / WRITE        u64 view_offset, u64 length, u64 explicit_at_flag
    READ / WRITE (DI/BI and local parts) carry a piece table instead:
                        u32 n, n * (u64 abs_offset, u64 view_offset,
                        u64 length), u8 inline_flag
    SET_VIEW            u64 disp, u32 etype_code, u8 contiguous,
                        u32 blob_len, descriptor blob
    SET_SIZE            u64 size
    GET_SIZE reply      u64 size
    REMOVE              str name
    HINT                u8 kind, UTF-8 JSON body
    ADMIN               str subkind, UTF-8 JSON body
    ACK                 u8 flags (1 final, 2 write_pull, 4 has_plan),
                        u32 n_remote, u64 served_total, u32 n_pieces,
                        n_pieces * (u64 view_offset, u64 length)

The ``-1`` explicit-offset sentinel of the compatibility API never
crosses the wire; it is replaced by the explicit_at flag word.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field


class ProtocolError(Exception):
    pass


class BadMagic(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


MAGIC = b"VIP1"


class MsgType(enum.IntEnum):
    CONNECT = 1
    DISCONNECT = 2
    OPEN = 3
    CLOSE = 4
    READ = 5
    WRITE = 6
    SEEK = 7  # reserved for the compatibility surface; never sent
    REMOVE = 8
    SET_SIZE = 9
    GET_SIZE = 10
    SET_VIEW = 11
    HINT = 12
    ADMIN = 13
    SHUTDOWN = 14
    ACK = 15
    DATA = 16


class MsgClass(enum.IntEnum):
    ER = 0   # external: interface library to buddy
    DI = 1   # directed internal: server to a specific server
    BI = 2   # broadcast internal: server to all other servers
    ACK = 3  # acknowledge, to a server or to the interface library


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    msg_class: MsgClass
    sender_id: int
    recipient_id: int
    client_id: int = 0
    file_id: int = 0
    request_id: int = 0
    status: int = 0
    params: bytes = b""
    data: bytes = b""


_HEADER = struct.Struct("<4sIIIIIIIiII")
HEADER_SIZE = _HEADER.size
assert HEADER_SIZE == 44


def encode(msg: Message) -> bytes:
    if len(msg.params) > 0xFFFFFFFF or len(msg.data) > 0xFFFFFFFF:
        raise ProtocolError("payload exceeds 32-bit length")
    return (
        _HEADER.pack(
            MAGIC,
            msg.msg_type,
            msg.msg_class,
            msg.sender_id,
            msg.recipient_id,
            msg.client_id,
            msg.file_id,
            msg.request_id,
            msg.status,
            len(msg.params),
            len(msg.data),
        )
        + msg.params
        + msg.data
    )


def decode(frame: bytes) -> Message:
    if len(frame) < 4 or frame[:4] != MAGIC:
        raise BadMagic("frame does not start with the protocol magic")
    if len(frame) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, frame has {len(frame)}")
    (_, mtype, mclass, sender, recipient, client, file_id, request, status,
     param_len, data_len) = _HEADER.unpack_from(frame)
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise UnknownType(f"unknown message type {mtype}") from None
    try:
        mclass = MsgClass(mclass)
    except ValueError:
        raise UnknownType(f"unknown message class {mclass}") from None
    if len(frame) != HEADER_SIZE + param_len + data_len:
        raise Truncated(
            f"frame length {len(frame)} does not match header "
            f"{HEADER_SIZE}+{param_len}+{data_len}"
        )
    params = frame[HEADER_SIZE:HEADER_SIZE + param_len]
    data = frame[HEADER_SIZE + param_len:]
    return Message(mtype, mclass, sender, recipient, client, file_id, request,
                   status, params, data)


class Method(enum.Enum):
    INLINE = "inline"
    SEPARATE_DATA = "separate"


def choose_transmission(data_len: int, threshold: int) -> Method:
    """Inline data rides the request or acknowledge; otherwise a DATA
    message carries the raw bytes.  The boundary data_len == threshold is
    inline."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return Method.INLINE if data_len <= threshold else Method.SEPARATE_DATA


# ---------------------------------------------------------------------------
# parameter packing helpers


def pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string too long")
    return struct.pack("<H", len(raw)) + raw


def unpack_str(buf: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(buf):
        raise Truncated("string length missing")
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if pos + n > len(buf):
        raise Truncated("string body missing")
    return buf[pos:pos + n].decode("utf-8"), pos + n


@dataclass(frozen=True)
class Piece:
    """One contiguous stretch of a transfer, in view-linear coordinates."""

    view_offset: int
    length: int


@dataclass(frozen=True)
class Run:
    """A piece bound to its absolute byte position in the logical file."""

    abs_offset: int
    view_offset: int
    length: int


ACK_FINAL = 1
ACK_WRITE_PULL = 2
ACK_HAS_PLAN = 4


@dataclass(frozen=True)
class AckParams:
    flags: int = 0
    n_remote: int = 0
    served_total: int = 0
    pieces: tuple[Piece, ...] = ()

    @property
    def final(self) -> bool:
        return bool(self.flags & ACK_FINAL)

    @property
    def write_pull(self) -> bool:
        return bool(self.flags & ACK_WRITE_PULL)

    @property
    def has_plan(self) -> bool:
        return bool(self.flags & ACK_HAS_PLAN)


def pack_ack(p: AckParams) -> bytes:
    out = struct.pack("<BIQI", p.flags, p.n_remote, p.served_total, len(p.pieces))
    for piece in p.pieces:
        out += struct.pack("<QQ", piece.view_offset, piece.length)
    return out


def unpack_ack(buf: bytes) -> AckParams:
    try:
        flags, n_remote, served, n = struct.unpack_from("<BIQI", buf, 0)
        pieces = []
        pos = struct.calcsize("<BIQI")
        for _ in range(n):
            vo, ln = struct.unpack_from("<QQ", buf, pos)
            pos += 16
            pieces.append(Piece(vo, ln))
    except struct.error as exc:
        raise Truncated(f"bad acknowledge parameters: {exc}") from None
    return AckParams(flags, n_remote, served, tuple(pieces))


def pack_rw(view_offset: int, length: int, explicit_at: bool) -> bytes:
    return struct.pack("<QQQ", view_offset, length, 1 if explicit_at else 0)


def unpack_rw(buf: bytes) -> tuple[int, int, bool]:
    try:
        vo, ln, at = struct.unpack_from("<QQQ", buf, 0)
    except struct.error as exc:
        raise Truncated(f"bad read/write parameters: {exc}") from None
    return vo, ln, bool(at)


def pack_runs(runs: list[Run], inline: bool) -> bytes:
    out = struct.pack("<I", len(runs))
    for r in runs:
        out += struct.pack("<QQQ", r.abs_offset, r.view_offset, r.length)
    return out + struct.pack("<B", 1 if inline else 0)


def unpack_runs(buf: bytes) -> tuple[list[Run], bool, int]:
    try:
        (n,) = struct.unpack_from("<I", buf, 0)
        pos = 4
        runs = []
        for _ in range(n):
            ao, vo, ln = struct.unpack_from("<QQQ", buf, pos)
            pos += 24
            runs.append(Run(ao, vo, ln))
        (inline,) = struct.unpack_from("<B", buf, pos)
        pos += 1
    except struct.error as exc:
        raise Truncated(f"bad run table: {exc}") from None
    return runs, bool(inline), pos
