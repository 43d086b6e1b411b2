"""Block-compressed image format with an offset table for random access.

The payload is cut into fixed-size blocks, each compressed on its own.  A
little-endian header and an offset table precede the compressed body so a
reader can fetch and inflate only the blocks overlapping a byte range.

Layout::

    "FNBF" | u32 version=1 | u32 codec | u32 block_size | u64 n_blocks
    | u64 uncompressed_size | u32 digest_id | 32-byte digest
    | (n_blocks + 1) x u64 offsets | compressed blocks

A zlib block is the zlib stream followed by a u32 CRC-32 of that stream.
Deflate has don't-care padding bits that inflate silently ignores; the
trailer makes every flipped bit in a compressed block detectable.
"""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

MAGIC = b"FNBF"
VERSION = 1
DEFAULT_BLOCK_SIZE = 512 * 1024
MIN_BLOCK_SIZE = 4096

CODEC_STORE = 0
CODEC_ZLIB = 1
CODEC_NAMES = {"store": CODEC_STORE, "zlib": CODEC_ZLIB}

DIGEST_SHA256 = 1

_HEADER = struct.Struct("<4sIIIQQI32s")
HEADER_SIZE = _HEADER.size

ZLIB_LEVEL = 1


class BlockStoreError(Exception):
    pass


class EmptyInput(BlockStoreError, ValueError):
    pass


class InvalidBlockSize(BlockStoreError, ValueError):
    pass


class RangeOutOfBounds(BlockStoreError, IndexError):
    pass


class CorruptBlock(BlockStoreError):
    pass


class FormatError(BlockStoreError, ValueError):
    pass


def codec_id(codec) -> int:
    if isinstance(codec, str):
        try:
            return CODEC_NAMES[codec]
        except KeyError:
            raise FormatError(f"unknown codec {codec!r}") from None
    if codec not in CODEC_NAMES.values():
        raise FormatError(f"unknown codec id {codec}")
    return int(codec)


def _compress(codec: int, raw: bytes) -> bytes:
    if codec == CODEC_STORE:
        return raw
    z = zlib.compress(raw, ZLIB_LEVEL)
    return z + _CRC.pack(zlib.crc32(z))


_CRC = struct.Struct("<I")


def _decompress(codec: int, comp: bytes, expect: int) -> bytes:
    if codec == CODEC_STORE:
        raw = comp
    else:
        if len(comp) < _CRC.size:
            raise CorruptBlock("block shorter than its checksum")
        z = memoryview(comp)[:-_CRC.size]
        if zlib.crc32(z) != _CRC.unpack_from(comp, len(comp) - _CRC.size)[0]:
            raise CorruptBlock("compressed block checksum mismatch")
        try:
            raw = zlib.decompress(z)
        except zlib.error as exc:
            raise CorruptBlock(str(exc)) from None
    if len(raw) != expect:
        raise CorruptBlock(f"block inflated to {len(raw)} bytes, expected {expect}")
    return raw


def check_block_size(block_size: int) -> None:
    if block_size < MIN_BLOCK_SIZE or block_size & (block_size - 1):
        raise InvalidBlockSize(f"block size must be a power of two >= {MIN_BLOCK_SIZE}: {block_size}")


def n_blocks_for(size: int, block_size: int) -> int:
    return -(-size // block_size)


def block_range(offset: int, length: int, block_size: int, size: int | None = None):
    """Indices of the first and last block touched by ``[offset, offset+length)``."""
    if length < 1 or offset < 0:
        raise RangeOutOfBounds(f"bad range offset={offset} length={length}")
    if size is not None and offset + length > size:
        raise RangeOutOfBounds(f"range [{offset}, {offset + length}) beyond {size}")
    return offset // block_size, (offset + length - 1) // block_size


@dataclass
class Manifest:
    image_id: str
    block_size: int
    n_blocks: int
    uncompressed_size: int
    codec: int
    offsets: list[int]
    content_digest: bytes
    startup_ranges: list[tuple[int, int]] = field(default_factory=list)

    def block_len(self, i: int) -> int:
        """Uncompressed length of block ``i``."""
        if i == self.n_blocks - 1:
            return self.uncompressed_size - i * self.block_size
        return self.block_size

    def compressed_len(self, i: int) -> int:
        return self.offsets[i + 1] - self.offsets[i]

    @property
    def compressed_size(self) -> int:
        return self.offsets[-1]

    def validate(self) -> list[str]:
        problems = []
        if self.n_blocks != n_blocks_for(self.uncompressed_size, self.block_size):
            problems.append("n_blocks does not match uncompressed_size / block_size")
        if len(self.offsets) != self.n_blocks + 1:
            problems.append("offset table length is not n_blocks + 1")
        elif self.offsets[0] != 0 or any(
            a >= b for a, b in zip(self.offsets, self.offsets[1:])
        ):
            problems.append("offsets not strictly increasing from 0")
        if len(self.content_digest) != 32:
            problems.append("content digest is not 32 bytes")
        for off, length in self.startup_ranges:
            if length < 1 or off < 0 or off + length > self.uncompressed_size:
                problems.append(f"startup range ({off}, {length}) out of bounds")
        return problems

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "block_size": self.block_size,
            "n_blocks": self.n_blocks,
            "uncompressed_size": self.uncompressed_size,
            "codec": self.codec,
            "offsets": list(self.offsets),
            "content_digest": self.content_digest.hex(),
            "startup_ranges": [list(r) for r in self.startup_ranges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            return cls(
                image_id=str(d["image_id"]),
                block_size=int(d["block_size"]),
                n_blocks=int(d["n_blocks"]),
                uncompressed_size=int(d["uncompressed_size"]),
                codec=int(d["codec"]),
                offsets=[int(x) for x in d["offsets"]],
                content_digest=bytes.fromhex(d["content_digest"]),
                startup_ranges=[(int(a), int(b)) for a, b in d.get("startup_ranges", [])],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad manifest: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad manifest JSON: {exc}") from None


@dataclass
class ReadStats:
    logical_bytes: int = 0
    blocks_fetched: int = 0
    compressed_bytes_fetched: int = 0
    decompressed_bytes: int = 0

    @property
    def amplification(self) -> float:
        return self.decompressed_bytes / self.logical_bytes if self.logical_bytes else 0.0


class BlockFile:
    """An immutable block-compressed file held in memory."""

    def __init__(self, codec, block_size, uncompressed_size, digest, offsets, body):
        self.codec = codec
        self.block_size = block_size
        self.uncompressed_size = uncompressed_size
        self.digest = digest
        self.offsets = offsets
        self.body = body

    @property
    def n_blocks(self) -> int:
        return len(self.offsets) - 1

    def compressed_block(self, i: int) -> bytes:
        return self.body[self.offsets[i]:self.offsets[i + 1]]

    def block_len(self, i: int) -> int:
        if i == self.n_blocks - 1:
            return self.uncompressed_size - i * self.block_size
        return self.block_size

    def block(self, i: int) -> bytes:
        return _decompress(self.codec, self.compressed_block(i), self.block_len(i))

    def read(self, offset: int, length: int) -> tuple[bytes, ReadStats]:
        first, last = block_range(offset, length, self.block_size, self.uncompressed_size)
        stats = ReadStats(logical_bytes=length)
        parts = []
        for i in range(first, last + 1):
            raw = self.block(i)
            stats.blocks_fetched += 1
            stats.compressed_bytes_fetched += self.offsets[i + 1] - self.offsets[i]
            stats.decompressed_bytes += len(raw)
            parts.append(raw)
        joined = b"".join(parts)
        start = offset - first * self.block_size
        data = joined[start:start + length]
        if offset == 0 and length == self.uncompressed_size:
            if hashlib.sha256(data).digest() != self.digest:
                raise CorruptBlock("content digest mismatch")
        return data, stats

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            MAGIC, VERSION, self.codec, self.block_size, self.n_blocks,
            self.uncompressed_size, DIGEST_SHA256, self.digest,
        )
        table = struct.pack(f"<{len(self.offsets)}Q", *self.offsets)
        return header + table + self.body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "BlockFile":
        if len(buf) < HEADER_SIZE:
            raise FormatError("file shorter than header")
        magic, version, codec, bsize, n, usize, digest_id, digest = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if digest_id != DIGEST_SHA256:
            raise FormatError(f"unsupported digest id {digest_id}")
        codec_id(codec)
        table_end = HEADER_SIZE + 8 * (n + 1)
        if len(buf) < table_end:
            raise FormatError("truncated offset table")
        offsets = list(struct.unpack_from(f"<{n + 1}Q", buf, HEADER_SIZE))
        body = bytes(buf[table_end:])
        if offsets[-1] != len(body):
            raise FormatError(f"body is {len(body)} bytes, offset table says {offsets[-1]}")
        if n != n_blocks_for(usize, bsize):
            raise FormatError("block count inconsistent with size")
        return cls(codec, bsize, usize, digest, offsets, body)

    def write(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BlockFile":
        return cls.from_bytes(Path(path).read_bytes())


def convert(data: bytes, block_size: int = DEFAULT_BLOCK_SIZE, codec="zlib",
            image_id: str = "", startup_ranges=()) -> tuple[BlockFile, Manifest]:
    if not data:
        raise EmptyInput("cannot convert empty input")
    check_block_size(block_size)
    cid = codec_id(codec)
    view = memoryview(data)
    offsets = [0]
    chunks = []
    # identical blocks (zero pages, duplicated files) are compressed once
    seen: dict[bytes, bytes] = {}
    for start in range(0, len(data), block_size):
        raw = bytes(view[start:start + block_size])
        comp = seen.get(raw)
        if comp is None:
            comp = _compress(cid, raw)
            if len(seen) >= 256:
                seen.clear()
            seen[raw] = comp
        chunks.append(comp)
        offsets.append(offsets[-1] + len(comp))
    digest = hashlib.sha256(data).digest()
    bf = BlockFile(cid, block_size, len(data), digest, offsets, b"".join(chunks))
    manifest = Manifest(
        image_id=image_id or digest.hex()[:16],
        block_size=block_size,
        n_blocks=bf.n_blocks,
        uncompressed_size=len(data),
        codec=cid,
        offsets=list(offsets),
        content_digest=digest,
        startup_ranges=[(int(o), int(n)) for o, n in startup_ranges],
    )
    problems = manifest.validate()
    if problems:
        raise RangeOutOfBounds("; ".join(problems))
    return bf, manifest


def read(file: BlockFile, offset: int, length: int) -> tuple[bytes, ReadStats]:
    return file.read(offset, length)


def startup_block_set(manifest: Manifest) -> list[int]:
    return blocks_covering(manifest.startup_ranges, manifest.block_size)


def blocks_covering(ranges, block_size: int) -> list[int]:
    """Ascending, deduplicated block indices touched by ``(offset, length)`` ranges."""
    spans = sorted(block_range(o, n, block_size) for o, n in ranges)
    out: list[int] = []
    for first, last in spans:
        if out and first <= out[-1]:
            first = out[-1] + 1
        out.extend(range(first, last + 1))
    return out


def verify(file, manifest: Manifest | None = None) -> bool:
    """True iff the file inflates to content matching the manifest digest."""
    try:
        bf = file if isinstance(file, BlockFile) else BlockFile.from_bytes(file)
        expect = manifest.content_digest if manifest is not None else bf.digest
        if manifest is not None and (
            manifest.offsets != bf.offsets or manifest.uncompressed_size != bf.uncompressed_size
            or manifest.block_size != bf.block_size or manifest.codec != bf.codec
        ):
            return False
        h = hashlib.sha256()
        for i in range(bf.n_blocks):
            h.update(bf.block(i))
        return h.digest() == expect
    except BlockStoreError:
        return False


def startup_prefix(size: int, fraction: float) -> list[tuple[int, int]]:
    """Contiguous-from-prefix startup range covering ``fraction`` of ``size`` bytes."""
    n = max(1, min(size, round(size * fraction)))
    return [(0, n)]


def decompress_block(codec: int, comp: bytes, expect: int) -> bytes:
    """Inflate one stored block, checking its checksum and length."""
    return _decompress(codec, comp, expect)
