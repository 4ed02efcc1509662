"""Length-prefixed binary wire protocol.

Frame layout (little-endian)::

    magic "OFRA" | version u8 (=1) | type u8 | payload_len u32 | payload

Payloads:

* HELLO         u32 protocol_version
* INIT_STATIC   u32 n, u32 sh_degree, n records of
                pos 3f32, rot 4f32, scale 3f32, opacity f32, sh k f32
* BS_FRAME      u64 frame_id, u64 timestamp_us, 51 f32
* GAUSS_UPDATE  u64 frame_id, u32 n, n records of pos 3f32, quat 4f32, scale 3f32
* STATS_REQ     empty
* STATS         UTF-8 JSON
* ERROR         UTF-8 JSON {"error": class, "detail": str}
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Union

import numpy as np

MAGIC = b"OFRA"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10
MAX_PAYLOAD = 64 * 1024 * 1024
N_COEFFS = 51

UPDATE_RECORD = np.dtype([("pos", "<f4", 3), ("rot", "<f4", 4), ("scale", "<f4", 3)])
assert UPDATE_RECORD.itemsize == 40


class MsgType(IntEnum):
    HELLO = 1
    INIT_STATIC = 2
    BS_FRAME = 3
    GAUSS_UPDATE = 4
    STATS_REQ = 5
    STATS = 6
    ERROR = 7


class ProtocolError(ValueError):
    kind = "protocol"


class BadMagic(ProtocolError):
    kind = "bad-magic"


class BadVersion(ProtocolError):
    kind = "bad-version"


class UnknownType(ProtocolError):
    kind = "unknown-type"


class LengthMismatch(ProtocolError):
    kind = "length-mismatch"


class IncompleteMessage(ProtocolError):
    """Not an error in the stream: more bytes are needed."""
    kind = "incomplete"

    def __init__(self, needed):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


# --- messages --------------------------------------------------------------------

def _arr_eq(a, b):
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class Hello:
    protocol_version: int = VERSION
    type = MsgType.HELLO

    def __eq__(self, o):
        return isinstance(o, Hello) and o.protocol_version == self.protocol_version


@dataclass(eq=False)
class InitStatic:
    sh_degree: int
    positions: np.ndarray  # (n, 3) f32
    rotations: np.ndarray  # (n, 4)
    scales: np.ndarray     # (n, 3)
    opacity: np.ndarray    # (n,)
    sh: np.ndarray         # (n, k)
    type = MsgType.INIT_STATIC

    def __post_init__(self):
        k = 3 * (self.sh_degree + 1) ** 2
        n = np.shape(self.positions)[0]
        self.positions = np.asarray(self.positions, np.float32).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, np.float32).reshape(n, 4)
        self.scales = np.asarray(self.scales, np.float32).reshape(n, 3)
        self.opacity = np.asarray(self.opacity, np.float32).reshape(n)
        self.sh = np.asarray(self.sh, np.float32).reshape(n, k)

    @property
    def n_gaussians(self):
        return self.positions.shape[0]

    def __eq__(self, o):
        return (isinstance(o, InitStatic) and o.sh_degree == self.sh_degree
                and all(_arr_eq(getattr(self, a), getattr(o, a))
                        for a in ("positions", "rotations", "scales", "opacity", "sh")))


@dataclass(eq=False)
class BsFrame:
    frame_id: int
    timestamp_us: int
    coeffs: np.ndarray  # 51 f32
    type = MsgType.BS_FRAME

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, np.float32).reshape(N_COEFFS)

    def __eq__(self, o):
        return (isinstance(o, BsFrame) and o.frame_id == self.frame_id
                and o.timestamp_us == self.timestamp_us and _arr_eq(o.coeffs, self.coeffs))


@dataclass(eq=False)
class GaussUpdate:
    frame_id: int
    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    type = MsgType.GAUSS_UPDATE

    def __post_init__(self):
        n = np.shape(self.positions)[0]
        self.positions = np.asarray(self.positions, np.float32).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, np.float32).reshape(n, 4)
        self.scales = np.asarray(self.scales, np.float32).reshape(n, 3)

    @property
    def n_gaussians(self):
        return self.positions.shape[0]

    def __eq__(self, o):
        return (isinstance(o, GaussUpdate) and o.frame_id == self.frame_id
                and all(_arr_eq(getattr(self, a), getattr(o, a)) for a in ("positions", "rotations", "scales")))


@dataclass(eq=False)
class StatsReq:
    type = MsgType.STATS_REQ

    def __eq__(self, o):
        return isinstance(o, StatsReq)


@dataclass(eq=False)
class Stats:
    payload: dict = field(default_factory=dict)
    type = MsgType.STATS

    def __eq__(self, o):
        return isinstance(o, Stats) and o.payload == self.payload


@dataclass(eq=False)
class Error:
    error: str
    detail: str = ""
    type = MsgType.ERROR

    def __eq__(self, o):
        return isinstance(o, Error) and (o.error, o.detail) == (self.error, self.detail)


Message = Union[Hello, InitStatic, BsFrame, GaussUpdate, StatsReq, Stats, Error]


# --- encoding --------------------------------------------------------------------

_BS = struct.Struct("<QQ")
_UPD = struct.Struct("<QI")
_INIT = struct.Struct("<II")


def _frame(mtype, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(mtype), len(payload)) + payload


def encode_update_payload(frame_id, positions, rotations, scales) -> bytes:
    """Fast path used by the server: one structured array, one copy."""
    n = positions.shape[0]
    rec = np.empty(n, UPDATE_RECORD)
    rec["pos"] = positions
    rec["rot"] = rotations
    rec["scale"] = scales
    return _UPD.pack(frame_id, n) + rec.tobytes()


def encode_message(msg: Message) -> bytes:
    t = msg.type
    if t == MsgType.HELLO:
        payload = struct.pack("<I", msg.protocol_version)
    elif t == MsgType.BS_FRAME:
        payload = _BS.pack(msg.frame_id, msg.timestamp_us) + msg.coeffs.astype("<f4").tobytes()
    elif t == MsgType.GAUSS_UPDATE:
        payload = encode_update_payload(msg.frame_id, msg.positions, msg.rotations, msg.scales)
    elif t == MsgType.INIT_STATIC:
        k = msg.sh.shape[1]
        dt = _init_dtype(k)
        rec = np.empty(msg.n_gaussians, dt)
        rec["pos"], rec["rot"], rec["scale"] = msg.positions, msg.rotations, msg.scales
        rec["opacity"], rec["sh"] = msg.opacity, msg.sh
        payload = _INIT.pack(msg.n_gaussians, msg.sh_degree) + rec.tobytes()
    elif t == MsgType.STATS_REQ:
        payload = b""
    elif t == MsgType.STATS:
        payload = json.dumps(msg.payload, sort_keys=True).encode()
    elif t == MsgType.ERROR:
        payload = json.dumps({"error": msg.error, "detail": msg.detail}, sort_keys=True).encode()
    else:  # pragma: no cover
        raise UnknownType(f"cannot encode {msg!r}")
    if len(payload) > MAX_PAYLOAD:
        raise LengthMismatch(f"payload of {len(payload)} bytes exceeds limit")
    return _frame(t, payload)


def _init_dtype(k):
    return np.dtype([("pos", "<f4", 3), ("rot", "<f4", 4), ("scale", "<f4", 3),
                     ("opacity", "<f4"), ("sh", "<f4", (k,))])


# --- decoding --------------------------------------------------------------------

def decode_header(buf):
    """Returns ``(type, payload_len)`` or raises."""
    if len(buf) < HEADER_SIZE:
        if bytes(buf[:4]) != MAGIC[:min(4, len(buf))]:
            raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
        raise IncompleteMessage(HEADER_SIZE - len(buf))
    magic, version, mtype, length = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersion(f"protocol version {version} not supported")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise UnknownType(f"unknown message type {mtype}") from None
    if length > MAX_PAYLOAD:
        raise LengthMismatch(f"payload length {length} exceeds limit")
    return mtype, length


def _json(payload):
    try:
        obj = json.loads(bytes(payload).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise LengthMismatch(f"invalid JSON payload: {exc}") from None
    if not isinstance(obj, dict):
        raise LengthMismatch("JSON payload must be an object")
    return obj


def _decode_payload(mtype, p: memoryview) -> Message:
    n_bytes = len(p)
    if mtype == MsgType.HELLO:
        if n_bytes != 4:
            raise LengthMismatch(f"HELLO payload must be 4 bytes, got {n_bytes}")
        return Hello(struct.unpack("<I", p)[0])
    if mtype == MsgType.BS_FRAME:
        if n_bytes != 16 + 4 * N_COEFFS:
            raise LengthMismatch(f"BS_FRAME payload must be {16 + 4 * N_COEFFS} bytes, got {n_bytes}")
        fid, ts = _BS.unpack_from(p, 0)
        return BsFrame(fid, ts, np.frombuffer(p, "<f4", N_COEFFS, 16).astype(np.float32))
    if mtype == MsgType.GAUSS_UPDATE:
        if n_bytes < _UPD.size:
            raise LengthMismatch("GAUSS_UPDATE payload too short")
        fid, n = _UPD.unpack_from(p, 0)
        if n_bytes != _UPD.size + 40 * n:
            raise LengthMismatch(f"GAUSS_UPDATE declares {n} Gaussians but carries {n_bytes - _UPD.size} bytes")
        rec = np.frombuffer(p, UPDATE_RECORD, n, _UPD.size)
        return GaussUpdate(fid, rec["pos"], rec["rot"], rec["scale"])
    if mtype == MsgType.INIT_STATIC:
        if n_bytes < _INIT.size:
            raise LengthMismatch("INIT_STATIC payload too short")
        n, deg = _INIT.unpack_from(p, 0)
        if deg > 8:
            raise LengthMismatch(f"implausible SH degree {deg}")
        dt = _init_dtype(3 * (deg + 1) ** 2)
        if n_bytes != _INIT.size + dt.itemsize * n:
            raise LengthMismatch(f"INIT_STATIC declares {n} Gaussians but payload has {n_bytes} bytes")
        rec = np.frombuffer(p, dt, n, _INIT.size)
        return InitStatic(deg, rec["pos"], rec["rot"], rec["scale"], rec["opacity"], rec["sh"])
    if mtype == MsgType.STATS_REQ:
        if n_bytes:
            raise LengthMismatch("STATS_REQ carries no payload")
        return StatsReq()
    if mtype == MsgType.STATS:
        return Stats(_json(p))
    obj = _json(p)
    if not isinstance(obj.get("error"), str) or not isinstance(obj.get("detail", ""), str):
        raise LengthMismatch("ERROR payload needs string 'error' and 'detail'")
    return Error(obj["error"], obj.get("detail", ""))


def decode_message(buf) -> tuple[Message, int]:
    """Decode one message from the front of ``buf``; returns ``(msg, consumed)``.

    Raises :class:`IncompleteMessage` when the buffer holds a valid prefix only,
    and another :class:`ProtocolError` subclass for malformed input.
    """
    view = memoryview(buf).cast("B") if not isinstance(buf, memoryview) else buf.cast("B")
    mtype, length = decode_header(view)
    end = HEADER_SIZE + length
    if len(view) < end:
        raise IncompleteMessage(end - len(view))
    return _decode_payload(mtype, view[HEADER_SIZE:end]), end


def try_decode(buf):
    """Decode without raising: ``(msg, consumed, None)`` or ``(None, 0, error)``;
    an incomplete buffer yields ``(None, 0, IncompleteMessage)``."""
    try:
        msg, used = decode_message(buf)
        return msg, used, None
    except ProtocolError as exc:
        return None, 0, exc
