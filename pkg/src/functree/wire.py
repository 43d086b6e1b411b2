"""Length-prefixed frames for the provisioning protocol.

Frame: ``u32 length | u8 tag | fields``; ``length`` counts the tag and the
fields.  Integers are little-endian, strings are ``u16 length + UTF-8``.
"""
from __future__ import annotations

import struct
from dataclasses import astuple, dataclass, fields
from typing import BinaryIO, Iterator


class WireError(ValueError):
    pass


@dataclass(frozen=True)
class PrepareFunction:
    function_id: str
    image_id: str
    memory_mb: int
    vm_id: int
    upstream: str


@dataclass(frozen=True)
class WorkerReady:
    function_id: str
    vm_id: int


@dataclass(frozen=True)
class CreateContainer:
    function_id: str
    vm_id: int


@dataclass(frozen=True)
class BlockRequest:
    image_id: str
    block_index: int


@dataclass(frozen=True)
class BlockData:
    image_id: str
    block_index: int
    payload_len: int


@dataclass(frozen=True)
class ContainerCreated:
    function_id: str
    vm_id: int


@dataclass(frozen=True)
class Ping:
    seq: int


@dataclass(frozen=True)
class Pong:
    seq: int


# tag -> (class, per-field codes); "s" string, "I" u32, "Q" u64
SCHEMA = {
    1: (PrepareFunction, "ssIQs"),
    2: (WorkerReady, "sQ"),
    3: (CreateContainer, "sQ"),
    4: (BlockRequest, "sQ"),
    5: (BlockData, "sQI"),
    6: (ContainerCreated, "sQ"),
    7: (Ping, "Q"),
    8: (Pong, "Q"),
}
TAGS = {cls: (tag, codes) for tag, (cls, codes) in SCHEMA.items()}
CONTROL_TYPES = (PrepareFunction, WorkerReady, CreateContainer, ContainerCreated)


def encode(msg) -> bytes:
    try:
        tag, codes = TAGS[type(msg)]
    except KeyError:
        raise WireError(f"not a protocol message: {msg!r}") from None
    out = [struct.pack("<B", tag)]
    for code, value in zip(codes, astuple(msg)):
        if code == "s":
            raw = str(value).encode()
            if len(raw) > 0xFFFF:
                raise WireError("string field longer than 65535 bytes")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
        else:
            out.append(struct.pack("<" + code, value))
    body = b"".join(out)
    return struct.pack("<I", len(body)) + body


def decode(frame: bytes):
    """Decode one complete frame; returns the message."""
    if len(frame) < 5:
        raise WireError("frame too short")
    (length,) = struct.unpack_from("<I", frame)
    if length != len(frame) - 4:
        raise WireError(f"frame length {length} != {len(frame) - 4}")
    tag = frame[4]
    try:
        cls, codes = SCHEMA[tag]
    except KeyError:
        raise WireError(f"unknown tag {tag}") from None
    pos = 5
    values = []
    try:
        for code in codes:
            if code == "s":
                (n,) = struct.unpack_from("<H", frame, pos)
                pos += 2
                raw = frame[pos:pos + n]
                if len(raw) != n:
                    raise WireError("truncated string")
                values.append(raw.decode())
                pos += n
            else:
                (v,) = struct.unpack_from("<" + code, frame, pos)
                values.append(v)
                pos += struct.calcsize(code)
    except struct.error as exc:
        raise WireError(str(exc)) from None
    if pos != len(frame):
        raise WireError("trailing bytes in frame")
    return cls(*values)


def iter_frames(stream: BinaryIO) -> Iterator[bytes]:
    while True:
        head = stream.read(4)
        if not head:
            return
        if len(head) < 4:
            raise WireError("truncated frame header")
        (length,) = struct.unpack("<I", head)
        body = stream.read(length)
        if len(body) != length:
            raise WireError("truncated frame body")
        yield head + body


# sim log record: f64 time | u16 src | u16 dst | frame
_LOG_HEAD = struct.Struct("<dHH")


def log_record(t: float, src: str, dst: str, msg) -> bytes:
    s, d = src.encode(), dst.encode()
    return _LOG_HEAD.pack(t, len(s), len(d)) + s + d + encode(msg)


def read_log(stream: BinaryIO) -> Iterator[tuple[float, str, str, object]]:
    while True:
        head = stream.read(_LOG_HEAD.size)
        if not head:
            return
        if len(head) < _LOG_HEAD.size:
            raise WireError("truncated log record")
        t, ns, nd = _LOG_HEAD.unpack(head)
        src = stream.read(ns).decode()
        dst = stream.read(nd).decode()
        frame = next(iter_frames(stream), None)
        if frame is None:
            raise WireError("log record without frame")
        yield t, src, dst, decode(frame)


def field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]
