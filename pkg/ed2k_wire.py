"""ed2k_wire.py – eDonkey UDP message model and byte-exact codec.

Every datagram carries one message: magic byte ``0xE3``, one opcode byte,
then a little-endian body.  Lists are prefixed by a 16-bit count (the
source-search query uses an 8-bit count), strings by a 16-bit length and
fileIDs are 16 raw bytes.

Decoding is done in two steps, as on the capture machine: a structural
walk that only looks at lengths (:func:`validate_structure`), then the
effective decoding (:func:`decode_message`).
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

# ── Constants ─────────────────────────────────────────────────────────────────

MAGIC = 0xE3
FILE_ID_LEN = 16
MAX_LIST = 0xFFFF
MAX_SHORT_LIST = 0xFF
MAX_STRING = 0xFFFF
LOW_ID_LIMIT = 1 << 24


class Opcode(enum.IntEnum):
    SERVER_LIST_QUERY = 0x14
    SERVER_LIST_ANSWER = 0x15
    SERVER_STATUS = 0x16
    FILE_SEARCH_QUERY = 0x98
    FILE_SEARCH_ANSWER = 0x99
    SOURCE_SEARCH_QUERY = 0x9A
    SOURCE_SEARCH_ANSWER = 0x9B
    ANNOUNCE = 0x9C


class TagKind(enum.IntEnum):
    NAME = 0x01
    SIZE = 0x02
    TYPE = 0x03
    OTHER = 0xFF


class DecodeErrorKind(enum.Enum):
    STRUCTURALLY_INVALID = "StructurallyInvalid"
    UNKNOWN_OPCODE = "UnknownOpcode"
    BAD_MAGIC = "BadMagic"
    TRAILING_BYTES = "TrailingBytes"


class DecodeError(Exception):
    """A payload that is not a decodable eDonkey message."""

    def __init__(self, kind: DecodeErrorKind, detail: str = "") -> None:
        super().__init__(f"{kind.value}: {detail}" if detail else kind.value)
        self.kind = kind
        self.detail = detail


# ── Message model ─────────────────────────────────────────────────────────────
#
# The same classes carry anonymized messages: fileIDs and clientIDs become
# integers, strings become MD5 hex digests and sizes kilobytes.

FileRef = Union[bytes, int]
Text = Union[bytes, str]


@dataclass(frozen=True)
class MetaTag:
    kind: TagKind
    value: Union[bytes, str, int]
    code: int = 0  # only meaningful for TagKind.OTHER


@dataclass(frozen=True)
class FileEntry:
    file_id: FileRef
    tags: tuple[MetaTag, ...] = ()


@dataclass(frozen=True)
class Source:
    client_id: int
    port: int


@dataclass(frozen=True)
class ServerAddr:
    ip: int
    port: int


@dataclass(frozen=True)
class ServerListQuery:
    pass


@dataclass(frozen=True)
class ServerListAnswer:
    servers: tuple[ServerAddr, ...] = ()


@dataclass(frozen=True)
class ServerStatus:
    users: int
    files: int
    description: Text = b""


@dataclass(frozen=True)
class FileSearchQuery:
    pattern: Text
    filters: tuple[MetaTag, ...] = ()


@dataclass(frozen=True)
class FileSearchAnswer:
    results: tuple[FileEntry, ...] = ()


@dataclass(frozen=True)
class SourceSearchQuery:
    file_ids: tuple[FileRef, ...] = ()


@dataclass(frozen=True)
class SourceSearchAnswer:
    file_id: FileRef
    sources: tuple[Source, ...] = ()


@dataclass(frozen=True)
class Announce:
    client_id: int
    port: int
    files: tuple[FileEntry, ...] = ()


EdonkeyMessage = Union[
    ServerListQuery,
    ServerListAnswer,
    ServerStatus,
    FileSearchQuery,
    FileSearchAnswer,
    SourceSearchQuery,
    SourceSearchAnswer,
    Announce,
]

OPCODES: dict[type, Opcode] = {
    ServerListQuery: Opcode.SERVER_LIST_QUERY,
    ServerListAnswer: Opcode.SERVER_LIST_ANSWER,
    ServerStatus: Opcode.SERVER_STATUS,
    FileSearchQuery: Opcode.FILE_SEARCH_QUERY,
    FileSearchAnswer: Opcode.FILE_SEARCH_ANSWER,
    SourceSearchQuery: Opcode.SOURCE_SEARCH_QUERY,
    SourceSearchAnswer: Opcode.SOURCE_SEARCH_ANSWER,
    Announce: Opcode.ANNOUNCE,
}

# Names used for the ``type`` attribute of the XML trace.
MESSAGE_TYPES: dict[type, str] = {
    ServerListQuery: "server-list-query",
    ServerListAnswer: "server-list-answer",
    ServerStatus: "server-status",
    FileSearchQuery: "file-search-query",
    FileSearchAnswer: "file-search-answer",
    SourceSearchQuery: "source-search-query",
    SourceSearchAnswer: "source-search-answer",
    Announce: "announce",
}

FAMILIES: dict[type, str] = {
    ServerListQuery: "management",
    ServerListAnswer: "management",
    ServerStatus: "management",
    FileSearchQuery: "file-search",
    FileSearchAnswer: "file-search",
    SourceSearchQuery: "source-search",
    SourceSearchAnswer: "source-search",
    Announce: "announce",
}


def message_type(m: EdonkeyMessage) -> str:
    return MESSAGE_TYPES[type(m)]


def family_of(m: EdonkeyMessage) -> str:
    return FAMILIES[type(m)]


def is_low_id(client_id: int) -> bool:
    """Low IDs are assigned to clients that are not directly reachable."""
    return client_id < LOW_ID_LIMIT


def client_id_from_ip(ip: int) -> int:
    """High ID of the IPv4 address *ip* (network-order integer).

    eDonkey carries high IDs as the address bytes read little-endian, so
    ``1.2.3.4`` becomes ``0x04030201``.
    """
    return int.from_bytes(ip.to_bytes(4, "big"), "little")


def _has_name_and_size(entry: FileEntry) -> bool:
    kinds = {t.kind for t in entry.tags}
    return TagKind.NAME in kinds and TagKind.SIZE in kinds


# ── Parsing primitives ────────────────────────────────────────────────────────

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def _need(pos: int, size: int, data: bytes) -> None:
    if pos + size > len(data):
        raise DecodeError(
            DecodeErrorKind.STRUCTURALLY_INVALID,
            f"need {size} bytes at offset {pos}, payload has {len(data)}",
        )


def parse_uchar(pos: int, data: bytes) -> tuple[int, int]:
    _need(pos, 1, data)
    return pos + 1, data[pos]


def parse_short(pos: int, data: bytes) -> tuple[int, int]:
    _need(pos, 2, data)
    return pos + 2, _U16.unpack_from(data, pos)[0]


def parse_int(pos: int, data: bytes) -> tuple[int, int]:
    _need(pos, 4, data)
    return pos + 4, _U32.unpack_from(data, pos)[0]


def parse_string(pos: int, data: bytes) -> tuple[int, bytes]:
    pos, length = parse_short(pos, data)
    _need(pos, length, data)
    return pos + length, bytes(data[pos:pos + length])


def parse_file_id(pos: int, data: bytes) -> tuple[int, bytes]:
    _need(pos, FILE_ID_LEN, data)
    return pos + FILE_ID_LEN, bytes(data[pos:pos + FILE_ID_LEN])


def parse_tag(pos: int, data: bytes) -> tuple[int, MetaTag]:
    pos, raw_kind = parse_uchar(pos, data)
    if raw_kind == TagKind.SIZE:
        pos, size = parse_int(pos, data)
        return pos, MetaTag(TagKind.SIZE, size)
    if raw_kind in (TagKind.NAME, TagKind.TYPE):
        pos, value = parse_string(pos, data)
        return pos, MetaTag(TagKind(raw_kind), value)
    if raw_kind == TagKind.OTHER:
        pos, code = parse_uchar(pos, data)
        pos, value = parse_string(pos, data)
        return pos, MetaTag(TagKind.OTHER, value, code)
    raise DecodeError(
        DecodeErrorKind.STRUCTURALLY_INVALID,
        f"unknown tag kind 0x{raw_kind:02x} at offset {pos - 1}",
    )


def parse_tags(pos: int, data: bytes) -> tuple[int, tuple[MetaTag, ...]]:
    pos, count = parse_short(pos, data)
    tags = []
    for _ in range(count):
        pos, tag = parse_tag(pos, data)
        tags.append(tag)
    return pos, tuple(tags)


def parse_file_entry(pos: int, data: bytes) -> tuple[int, FileEntry]:
    pos, fid = parse_file_id(pos, data)
    pos, tags = parse_tags(pos, data)
    return pos, FileEntry(fid, tags)


def parse_list(pos: int, data: bytes, item_parser, short: bool = False) -> tuple[int, tuple]:
    if short:
        pos, count = parse_uchar(pos, data)
    else:
        pos, count = parse_short(pos, data)
    items = []
    for _ in range(count):
        pos, item = item_parser(pos, data)
        items.append(item)
    return pos, tuple(items)


def _parse_server(pos: int, data: bytes) -> tuple[int, ServerAddr]:
    pos, ip = parse_int(pos, data)
    pos, port = parse_short(pos, data)
    return pos, ServerAddr(ip, port)


def _parse_source(pos: int, data: bytes) -> tuple[int, Source]:
    pos, cid = parse_int(pos, data)
    pos, port = parse_short(pos, data)
    return pos, Source(cid, port)


# ── Structural skimming (validation step) ─────────────────────────────────────
#
# These walk the declared lengths only; they never build values.


def _skip(pos: int, size: int, data: bytes) -> int:
    _need(pos, size, data)
    return pos + size


def _skip_string(pos: int, data: bytes) -> int:
    pos, length = parse_short(pos, data)
    return _skip(pos, length, data)


def _skip_tags(pos: int, data: bytes) -> int:
    pos, count = parse_short(pos, data)
    for _ in range(count):
        pos, raw_kind = parse_uchar(pos, data)
        if raw_kind == TagKind.SIZE:
            pos = _skip(pos, 4, data)
        elif raw_kind in (TagKind.NAME, TagKind.TYPE):
            pos = _skip_string(pos, data)
        elif raw_kind == TagKind.OTHER:
            pos = _skip_string(_skip(pos, 1, data), data)
        else:
            raise DecodeError(
                DecodeErrorKind.STRUCTURALLY_INVALID,
                f"unknown tag kind 0x{raw_kind:02x} at offset {pos - 1}",
            )
    return pos


def _skip_file_entries(pos: int, data: bytes) -> int:
    pos, count = parse_short(pos, data)
    for _ in range(count):
        pos = _skip_tags(_skip(pos, FILE_ID_LEN, data), data)
    return pos


def _skim_server_list_answer(pos: int, data: bytes) -> int:
    pos, count = parse_short(pos, data)
    return _skip(pos, 6 * count, data)


def _skim_server_status(pos: int, data: bytes) -> int:
    return _skip_string(_skip(pos, 8, data), data)


def _skim_file_search_query(pos: int, data: bytes) -> int:
    return _skip_tags(_skip_string(pos, data), data)


def _skim_source_search_query(pos: int, data: bytes) -> int:
    pos, count = parse_uchar(pos, data)
    return _skip(pos, FILE_ID_LEN * count, data)


def _skim_source_search_answer(pos: int, data: bytes) -> int:
    pos, count = parse_short(_skip(pos, FILE_ID_LEN, data), data)
    return _skip(pos, 6 * count, data)


def _skim_announce(pos: int, data: bytes) -> int:
    return _skip_file_entries(_skip(pos, 6, data), data)


_SKIMMERS = {
    Opcode.SERVER_LIST_QUERY: lambda pos, data: pos,
    Opcode.SERVER_LIST_ANSWER: _skim_server_list_answer,
    Opcode.SERVER_STATUS: _skim_server_status,
    Opcode.FILE_SEARCH_QUERY: _skim_file_search_query,
    Opcode.FILE_SEARCH_ANSWER: _skip_file_entries,
    Opcode.SOURCE_SEARCH_QUERY: _skim_source_search_query,
    Opcode.SOURCE_SEARCH_ANSWER: _skim_source_search_answer,
    Opcode.ANNOUNCE: _skim_announce,
}


def validate_structure(payload: bytes) -> int:
    """Check magic, opcode and every declared length; return the opcode.

    Raises :class:`DecodeError` with the failure kind otherwise.
    """
    if len(payload) == 0:
        raise DecodeError(DecodeErrorKind.STRUCTURALLY_INVALID, "empty payload")
    if payload[0] != MAGIC:
        raise DecodeError(DecodeErrorKind.BAD_MAGIC, f"first byte 0x{payload[0]:02x}")
    if len(payload) < 2:
        raise DecodeError(DecodeErrorKind.STRUCTURALLY_INVALID, "missing opcode")
    opcode = payload[1]
    skimmer = _SKIMMERS.get(opcode)
    if skimmer is None:
        raise DecodeError(DecodeErrorKind.UNKNOWN_OPCODE, f"opcode 0x{opcode:02x}")
    end = skimmer(2, payload)
    if end != len(payload):
        raise DecodeError(
            DecodeErrorKind.TRAILING_BYTES,
            f"{len(payload) - end} bytes after offset {end}",
        )
    return opcode


# ── Decoding ──────────────────────────────────────────────────────────────────


def _decode_body(opcode: int, data: bytes) -> EdonkeyMessage:
    pos = 2
    if opcode == Opcode.SERVER_LIST_QUERY:
        return ServerListQuery()
    if opcode == Opcode.SERVER_LIST_ANSWER:
        _, servers = parse_list(pos, data, _parse_server)
        return ServerListAnswer(servers)
    if opcode == Opcode.SERVER_STATUS:
        pos, users = parse_int(pos, data)
        pos, files = parse_int(pos, data)
        _, description = parse_string(pos, data)
        return ServerStatus(users, files, description)
    if opcode == Opcode.FILE_SEARCH_QUERY:
        pos, pattern = parse_string(pos, data)
        _, filters = parse_tags(pos, data)
        return FileSearchQuery(pattern, filters)
    if opcode == Opcode.FILE_SEARCH_ANSWER:
        _, results = parse_list(pos, data, parse_file_entry)
        return FileSearchAnswer(results)
    if opcode == Opcode.SOURCE_SEARCH_QUERY:
        _, fids = parse_list(pos, data, parse_file_id, short=True)
        return SourceSearchQuery(fids)
    if opcode == Opcode.SOURCE_SEARCH_ANSWER:
        pos, fid = parse_file_id(pos, data)
        _, sources = parse_list(pos, data, _parse_source)
        return SourceSearchAnswer(fid, sources)
    # Opcode.ANNOUNCE
    pos, cid = parse_int(pos, data)
    pos, port = parse_short(pos, data)
    _, files = parse_list(pos, data, parse_file_entry)
    for entry in files:
        if not _has_name_and_size(entry):
            raise DecodeError(
                DecodeErrorKind.STRUCTURALLY_INVALID,
                "announced file without name and size tags",
            )
    return Announce(cid, port, files)


def decode_message(payload: bytes) -> EdonkeyMessage:
    """Validate *payload*, then decode it into a message object."""
    opcode = validate_structure(payload)
    return _decode_body(opcode, payload)


# ── Encoding ──────────────────────────────────────────────────────────────────


def pack_string(value: bytes) -> bytes:
    if not isinstance(value, (bytes, bytearray)):
        raise ValueError(f"raw messages carry byte strings, got {value!r}")
    if len(value) > MAX_STRING:
        raise ValueError(f"string of {len(value)} bytes exceeds {MAX_STRING}")
    return _U16.pack(len(value)) + bytes(value)


def pack_file_id(value: bytes) -> bytes:
    if not isinstance(value, (bytes, bytearray)) or len(value) != FILE_ID_LEN:
        raise ValueError(f"fileID must be {FILE_ID_LEN} bytes, got {value!r}")
    return bytes(value)


def _pack_count(items, limit: int = MAX_LIST) -> bytes:
    if len(items) > limit:
        raise ValueError(f"list of {len(items)} elements exceeds {limit}")
    return _U8.pack(len(items)) if limit == MAX_SHORT_LIST else _U16.pack(len(items))


def pack_tag(tag: MetaTag) -> bytes:
    if tag.kind == TagKind.SIZE:
        return _U8.pack(TagKind.SIZE) + _U32.pack(tag.value)
    if tag.kind == TagKind.OTHER:
        return _U8.pack(TagKind.OTHER) + _U8.pack(tag.code) + pack_string(tag.value)
    return _U8.pack(tag.kind) + pack_string(tag.value)


def pack_tags(tags) -> bytes:
    return _pack_count(tags) + b"".join(pack_tag(t) for t in tags)


def pack_file_entries(entries) -> bytes:
    return _pack_count(entries) + b"".join(
        pack_file_id(e.file_id) + pack_tags(e.tags) for e in entries
    )


def _pack_endpoint(ip: int, port: int) -> bytes:
    return _U32.pack(ip) + _U16.pack(port)


def _encode(m: EdonkeyMessage) -> bytes:
    opcode = OPCODES.get(type(m))
    if opcode is None:
        raise ValueError(f"not an eDonkey message: {m!r}")
    head = bytes((MAGIC, opcode))

    if isinstance(m, ServerListQuery):
        return head
    if isinstance(m, ServerListAnswer):
        return head + _pack_count(m.servers) + b"".join(
            _pack_endpoint(s.ip, s.port) for s in m.servers
        )
    if isinstance(m, ServerStatus):
        return head + _U32.pack(m.users) + _U32.pack(m.files) + pack_string(m.description)
    if isinstance(m, FileSearchQuery):
        return head + pack_string(m.pattern) + pack_tags(m.filters)
    if isinstance(m, FileSearchAnswer):
        return head + pack_file_entries(m.results)
    if isinstance(m, SourceSearchQuery):
        return head + _pack_count(m.file_ids, MAX_SHORT_LIST) + b"".join(
            pack_file_id(f) for f in m.file_ids
        )
    if isinstance(m, SourceSearchAnswer):
        return head + pack_file_id(m.file_id) + _pack_count(m.sources) + b"".join(
            _pack_endpoint(s.client_id, s.port) for s in m.sources
        )
    # Announce
    for entry in m.files:
        if not _has_name_and_size(entry):
            raise ValueError(f"announced file {entry.file_id!r} lacks name or size tag")
    return head + _pack_endpoint(m.client_id, m.port) + pack_file_entries(m.files)


def encode_message(m: EdonkeyMessage) -> bytes:
    """Serialise *m*; raises ``ValueError`` for messages breaking the layout limits."""
    try:
        return _encode(m)
    except struct.error as exc:
        raise ValueError(f"field out of range in {type(m).__name__}: {exc}") from exc
