"""xml_trace.py – Line-oriented XML trace of anonymized messages.

Layout::

    <?xml version="1.0" encoding="UTF-8"?>
    <trace version="1">
    <msg seq="0" t="0.000000" type="announce" dir="q" peer="0"><src cid="0" port="4662"/><file fid="0"><tag kind="name" value="…"/><tag kind="size" value="716800"/></file></msg>
    …
    </trace>

One ``<msg>`` per line, LF line endings, UTF-8.  ``cid``/``fid`` are the
anonymized integers, string tag values MD5 digests, size tag values KB.
A file without the closing ``</trace>`` line is recognisably truncated.
Paths ending in ``.gz`` are transparently gzip-compressed.
"""

from __future__ import annotations

import gzip
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Optional
from xml.sax.saxutils import quoteattr

from ed2k_wire import (
    MESSAGE_TYPES,
    Announce,
    EdonkeyMessage,
    FileEntry,
    FileSearchAnswer,
    FileSearchQuery,
    MetaTag,
    ServerAddr,
    ServerListAnswer,
    ServerListQuery,
    ServerStatus,
    Source,
    SourceSearchAnswer,
    SourceSearchQuery,
    TagKind,
)

log = logging.getLogger(__name__)

TRACE_VERSION = "1"
HEADER = b'<?xml version="1.0" encoding="UTF-8"?>\n<trace version="1">\n'
FOOTER = b"</trace>\n"
_CHUNK = 1 << 16

_TYPE_CLASSES = {name: cls for cls, name in MESSAGE_TYPES.items()}
_TAG_NAMES = {
    TagKind.NAME: "name",
    TagKind.SIZE: "size",
    TagKind.TYPE: "type",
    TagKind.OTHER: "other",
}
_TAG_KINDS = {name: kind for kind, name in _TAG_NAMES.items()}


class TraceParseError(ValueError):
    """Malformed trace; ``position`` is ``(line, column)`` when known."""

    def __init__(self, message: str, position: Optional[tuple[int, int]] = None, recovered: int = 0) -> None:
        where = f" at line {position[0]}, column {position[1]}" if position else ""
        super().__init__(f"{message}{where} ({recovered} events recovered)")
        self.position = position
        self.recovered = recovered


class TraceTruncatedError(TraceParseError):
    """The trace ends before its closing root tag."""


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    rebased_us: int
    body: EdonkeyMessage
    peer: Optional[int] = None
    to_server: bool = True

    @property
    def rebased_time(self) -> float:
        return self.rebased_us / 1_000_000


def format_time(us: int) -> str:
    if us < 0:
        raise ValueError(f"rebased time must be >= 0, got {us!r}")
    return f"{us // 1_000_000}.{us % 1_000_000:06d}"


def parse_time(text: str) -> int:
    seconds, _, fraction = text.partition(".")
    if not seconds.isdigit() or len(fraction) != 6 or not fraction.isdigit():
        raise ValueError(f"time must have exactly six decimals, got {text!r}")
    return int(seconds) * 1_000_000 + int(fraction)


# ── Writing ───────────────────────────────────────────────────────────────────


def _num(value) -> str:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError(f"trace fields must be anonymized integers, got {value!r}")
    return str(value)


def _text(value) -> str:
    if not isinstance(value, str):
        raise ValueError(f"trace strings must be digests, got {value!r}")
    return quoteattr(value)


def _tag_xml(tag: MetaTag) -> str:
    kind = _TAG_NAMES[tag.kind]
    if tag.kind == TagKind.SIZE:
        return f'<tag kind="size" value="{_num(tag.value)}"/>'
    if tag.kind == TagKind.OTHER:
        return f'<tag kind="other" code="{_num(tag.code)}" value={_text(tag.value)}/>'
    return f"<tag kind=\"{kind}\" value={_text(tag.value)}/>"


def _entry_xml(element: str, entry: FileEntry) -> str:
    if not entry.tags:
        return f'<{element} fid="{_num(entry.file_id)}"/>'
    tags = "".join(_tag_xml(t) for t in entry.tags)
    return f'<{element} fid="{_num(entry.file_id)}">{tags}</{element}>'


def _body_xml(m: EdonkeyMessage) -> str:
    if isinstance(m, ServerListQuery):
        return ""
    if isinstance(m, ServerListAnswer):
        return "".join(f'<server ip="{_num(s.ip)}" port="{_num(s.port)}"/>' for s in m.servers)
    if isinstance(m, ServerStatus):
        return f'<status users="{_num(m.users)}" files="{_num(m.files)}" desc={_text(m.description)}/>'
    if isinstance(m, FileSearchQuery):
        return f"<query pattern={_text(m.pattern)}/>" + "".join(_tag_xml(t) for t in m.filters)
    if isinstance(m, FileSearchAnswer):
        return "".join(_entry_xml("result", e) for e in m.results)
    if isinstance(m, SourceSearchQuery):
        return "".join(f'<file fid="{_num(f)}"/>' for f in m.file_ids)
    if isinstance(m, SourceSearchAnswer):
        return f'<file fid="{_num(m.file_id)}"/>' + "".join(
            f'<src cid="{_num(s.client_id)}" port="{_num(s.port)}"/>' for s in m.sources
        )
    if isinstance(m, Announce):
        return f'<src cid="{_num(m.client_id)}" port="{_num(m.port)}"/>' + "".join(
            _entry_xml("file", e) for e in m.files
        )
    raise ValueError(f"not an eDonkey message: {m!r}")


def event_xml(event: TraceEvent) -> str:
    """One ``<msg>`` element, without the line ending."""
    attrs = (
        f'seq="{_num(event.seq)}" t="{format_time(event.rebased_us)}" '
        f'type="{MESSAGE_TYPES[type(event.body)]}" dir="{"q" if event.to_server else "a"}"'
    )
    if event.peer is not None:
        attrs += f' peer="{_num(event.peer)}"'
    body = _body_xml(event.body)
    if not body:
        return f"<msg {attrs}/>"
    return f"<msg {attrs}>{body}</msg>"


class TraceWriter:
    """Streams events to a binary sink; ``close`` writes the closing root tag."""

    def __init__(self, out: BinaryIO) -> None:
        self.out = out
        self.count = 0
        self._last_seq: Optional[int] = None
        out.write(HEADER)

    def write(self, event: TraceEvent) -> None:
        if self._last_seq is not None and event.seq <= self._last_seq:
            raise ValueError(f"seq {event.seq} does not follow {self._last_seq}")
        self.out.write(event_xml(event).encode("utf-8") + b"\n")
        self._last_seq = event.seq
        self.count += 1

    def close(self) -> None:
        self.out.write(FOOTER)

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        # Leave the root open on failure so the file reads as truncated.
        if exc_type is None:
            self.close()


def write_trace(events: Iterable[TraceEvent], out: BinaryIO) -> int:
    """Write *events* to *out*; return how many were written."""
    with TraceWriter(out) as writer:
        for event in events:
            writer.write(event)
    return writer.count


def open_trace_sink(path: str) -> BinaryIO:
    return gzip.open(path, "wb") if path.endswith(".gz") else open(path, "wb")


def open_trace_source(path: str) -> BinaryIO:
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


# ── Reading ───────────────────────────────────────────────────────────────────


def _int(elem: ET.Element, name: str) -> int:
    value = elem.get(name)
    if value is None or not value.isdigit():
        raise ValueError(f"<{elem.tag}> needs a decimal {name!r} attribute, got {value!r}")
    return int(value)


def _str(elem: ET.Element, name: str) -> str:
    value = elem.get(name)
    if value is None:
        raise ValueError(f"<{elem.tag}> lacks attribute {name!r}")
    return value


def _tag_from(elem: ET.Element) -> MetaTag:
    kind = _TAG_KINDS.get(elem.get("kind", ""))
    if kind is None:
        raise ValueError(f"unknown tag kind {elem.get('kind')!r}")
    if kind == TagKind.SIZE:
        return MetaTag(kind, _int(elem, "value"))
    if kind == TagKind.OTHER:
        return MetaTag(kind, _str(elem, "value"), _int(elem, "code"))
    return MetaTag(kind, _str(elem, "value"))


def _entry_from(elem: ET.Element) -> FileEntry:
    return FileEntry(_int(elem, "fid"), tuple(_tag_from(t) for t in elem.findall("tag")))


def _body_from(cls: type, msg: ET.Element) -> EdonkeyMessage:
    if cls is ServerListQuery:
        return ServerListQuery()
    if cls is ServerListAnswer:
        return ServerListAnswer(tuple(
            ServerAddr(_int(s, "ip"), _int(s, "port")) for s in msg.findall("server")
        ))
    if cls is ServerStatus:
        status = msg.find("status")
        if status is None:
            raise ValueError("server-status without <status>")
        return ServerStatus(_int(status, "users"), _int(status, "files"), _str(status, "desc"))
    if cls is FileSearchQuery:
        query = msg.find("query")
        if query is None:
            raise ValueError("file-search-query without <query>")
        return FileSearchQuery(_str(query, "pattern"), tuple(_tag_from(t) for t in msg.findall("tag")))
    if cls is FileSearchAnswer:
        return FileSearchAnswer(tuple(_entry_from(r) for r in msg.findall("result")))
    if cls is SourceSearchQuery:
        return SourceSearchQuery(tuple(_int(f, "fid") for f in msg.findall("file")))
    sources = tuple(Source(_int(s, "cid"), _int(s, "port")) for s in msg.findall("src"))
    if cls is SourceSearchAnswer:
        file_elem = msg.find("file")
        if file_elem is None:
            raise ValueError("source-search-answer without <file>")
        return SourceSearchAnswer(_int(file_elem, "fid"), sources)
    # Announce
    if len(sources) != 1:
        raise ValueError("announce needs exactly one <src>")
    return Announce(
        sources[0].client_id, sources[0].port,
        tuple(_entry_from(f) for f in msg.findall("file")),
    )


def event_from_element(msg: ET.Element) -> TraceEvent:
    cls = _TYPE_CLASSES.get(msg.get("type", ""))
    if cls is None:
        raise ValueError(f"unknown message type {msg.get('type')!r}")
    peer = msg.get("peer")
    return TraceEvent(
        seq=_int(msg, "seq"),
        rebased_us=parse_time(_str(msg, "t")),
        body=_body_from(cls, msg),
        peer=int(peer) if peer is not None else None,
        to_server=msg.get("dir", "q") != "a",
    )


def read_trace(source: BinaryIO) -> Iterator[TraceEvent]:
    """Stream the events of a trace.

    Raises :class:`TraceTruncatedError` after the last complete event when
    the closing root tag is missing, :class:`TraceParseError` on malformed
    input.
    """
    parser = ET.XMLPullParser(events=("start", "end"))
    root: Optional[ET.Element] = None
    recovered = 0

    def drain() -> Iterator[TraceEvent]:
        nonlocal root, recovered
        for kind, elem in parser.read_events():
            if kind == "start":
                if root is None:
                    root = elem
                    if elem.tag != "trace" or elem.get("version") != TRACE_VERSION:
                        raise TraceParseError(
                            f"expected <trace version=\"{TRACE_VERSION}\">, got <{elem.tag}>",
                            recovered=recovered,
                        )
                continue
            if elem.tag != "msg" or elem is root:
                continue
            try:
                event = event_from_element(elem)
                root.remove(elem)
            except ValueError as exc:
                raise TraceParseError(f"invalid <msg>: {exc}", recovered=recovered) from exc
            recovered += 1
            yield event

    while True:
        chunk = source.read(_CHUNK)
        if not chunk:
            break
        # The pull parser queues syntax errors; they surface from read_events.
        try:
            parser.feed(chunk)
            yield from drain()
        except ET.ParseError as exc:
            raise TraceParseError(f"malformed XML: {exc.msg}", exc.position, recovered) from exc

    try:
        parser.close()
    except ET.ParseError as exc:
        if root is None:
            raise TraceTruncatedError("empty trace", None, recovered) from exc
        log.warning("trace truncated after %d events", recovered)
        raise TraceTruncatedError(f"trace truncated: {exc.msg}", exc.position, recovered) from exc
    yield from drain()
    if root is None:
        raise TraceTruncatedError("empty trace", None, recovered)
