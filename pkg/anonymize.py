"""anonymize.py – Real-time anonymization of decoded eDonkey messages.

* clientIDs and fileIDs are replaced by their order of appearance
  (0, 1, 2, …).  clientIDs are looked up by direct indexing in a dense
  array; fileIDs live in 65,536 sorted buckets selected by two bytes of
  the fileID.
* search strings, file names, types and server descriptions become their
  MD5 hex digest.
* file sizes are reduced to kilobytes.
* timestamps become the time elapsed since the start of the capture.

The tables only accept one writer: indices depend on the order in which
messages are fed.
"""

from __future__ import annotations

import bisect
import hashlib
import logging
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from ed2k_wire import (
    Announce,
    EdonkeyMessage,
    FileEntry,
    FileSearchAnswer,
    FileSearchQuery,
    MetaTag,
    ServerListAnswer,
    ServerListQuery,
    ServerStatus,
    Source,
    SourceSearchAnswer,
    SourceSearchQuery,
    TagKind,
    is_low_id,
)

log = logging.getLogger(__name__)

# ── Constants ─────────────────────────────────────────────────────────────────

NUM_BUCKETS = 65_536
DEFAULT_CLIENT_BITS = 24
DEFAULT_INDEX_BYTES = (2, 3)

SNAPSHOT_MAGIC = b"DKTB"
SNAPSHOT_VERSION = 1
_KIND_CLIENT = 1
_KIND_FILE = 2


def check_index_bytes(index_bytes) -> tuple[int, int]:
    """Return *index_bytes* as a tuple; raise ``ValueError`` unless 0 ≤ i < j ≤ 15."""
    try:
        i, j = (int(b) for b in index_bytes)
    except (TypeError, ValueError) as exc:
        raise ValueError(f"index_bytes must be a pair of integers, got {index_bytes!r}") from exc
    if not 0 <= i < j <= 15:
        raise ValueError(f"index_bytes must satisfy 0 <= i < j <= 15, got {(i, j)!r}")
    return i, j


# ── Client table ──────────────────────────────────────────────────────────────


class ClientTable:
    """Order-of-appearance encoder for 32-bit clientIDs.

    Cell ``c`` holds ``index + 1`` for clientID ``c`` (0 means unseen).  The
    dense array covers ``2**bits`` keys; clientIDs beyond it go to an
    auxiliary dict and are counted in ``overflow``.  ``bits=32`` reproduces
    the full 16 GB table.
    """

    def __init__(self, bits: int = DEFAULT_CLIENT_BITS) -> None:
        if not 8 <= bits <= 32:
            raise ValueError(f"client key-space width must be 8..32 bits, got {bits!r}")
        self.bits = bits
        self.cells = np.zeros(1 << bits, dtype=np.uint32)
        self.next_index = 0
        self.overflow: dict[int, int] = {}
        self.low_ids = 0
        self.high_ids = 0

    def anon(self, client_id: int) -> int:
        if client_id >> self.bits == 0:
            stored = int(self.cells[client_id])
            if stored:
                return stored - 1
            self.cells[client_id] = self.next_index + 1
        else:
            index = self.overflow.get(client_id)
            if index is not None:
                return index
            if not self.overflow:
                log.warning("clientID 0x%08x beyond the %d-bit table, using overflow map", client_id, self.bits)
            self.overflow[client_id] = self.next_index
        if is_low_id(client_id):
            self.low_ids += 1
        else:
            self.high_ids += 1
        self.next_index += 1
        return self.next_index - 1

    def lookup(self, client_id: int) -> Optional[int]:
        if client_id >> self.bits == 0:
            stored = int(self.cells[client_id])
            return stored - 1 if stored else None
        return self.overflow.get(client_id)

    def __len__(self) -> int:
        return self.next_index


# ── File table ────────────────────────────────────────────────────────────────


class FileTable:
    """Order-of-appearance encoder for 128-bit fileIDs.

    fileID ``f`` lives in bucket ``f[i] << 8 | f[j]`` for the table's
    ``index_bytes`` ``(i, j)``.  Each bucket is a sorted list of fileIDs with
    a parallel list of their indices.
    """

    def __init__(self, index_bytes: tuple[int, int] = DEFAULT_INDEX_BYTES) -> None:
        self.index_bytes = check_index_bytes(index_bytes)
        self.keys: list[list[bytes]] = [[] for _ in range(NUM_BUCKETS)]
        self.ids: list[list[int]] = [[] for _ in range(NUM_BUCKETS)]
        self.next_index = 0

    def bucket_of(self, file_id: bytes) -> int:
        i, j = self.index_bytes
        return file_id[i] << 8 | file_id[j]

    def anon(self, file_id: bytes) -> int:
        b = self.bucket_of(file_id)
        keys = self.keys[b]
        pos = bisect.bisect_left(keys, file_id)
        if pos < len(keys) and keys[pos] == file_id:
            return self.ids[b][pos]
        keys.insert(pos, file_id)
        self.ids[b].insert(pos, self.next_index)
        self.next_index += 1
        return self.next_index - 1

    def lookup(self, file_id: bytes) -> Optional[int]:
        b = self.bucket_of(file_id)
        keys = self.keys[b]
        pos = bisect.bisect_left(keys, file_id)
        if pos < len(keys) and keys[pos] == file_id:
            return self.ids[b][pos]
        return None

    def __len__(self) -> int:
        return self.next_index


def anon_client(t: ClientTable, c: int) -> int:
    return t.anon(c)


def anon_file(t: FileTable, f: bytes) -> int:
    return t.anon(f)


# ── Bucket diagnostics ────────────────────────────────────────────────────────


def bucket_sizes(t: FileTable) -> np.ndarray:
    return np.fromiter((len(k) for k in t.keys), dtype=np.int64, count=NUM_BUCKETS)


def bucket_size_distribution(t: FileTable) -> list[tuple[int, int]]:
    """Histogram of bucket occupancies as ``(size, num_buckets)`` pairs."""
    counts = Counter(len(k) for k in t.keys)
    return sorted(counts.items())


def bucket_skew(t: FileTable) -> float:
    """Largest bucket divided by the mean bucket size (0 for an empty table)."""
    sizes = bucket_sizes(t)
    mean = sizes.mean()
    return float(sizes.max() / mean) if mean else 0.0


# ── Strings, sizes, timestamps ───────────────────────────────────────────────


def anon_string(s: bytes) -> str:
    return hashlib.md5(s).hexdigest()


def anon_size(size: int) -> int:
    """Bytes to whole kilobytes."""
    return size // 1024


@dataclass
class AnonStats:
    skewed: int = 0


def rebase_us(t: float, t0: float, stats: Optional[AnonStats] = None) -> int:
    """Microseconds elapsed since *t0*, clamped at 0."""
    elapsed = round((t - t0) * 1_000_000)
    if elapsed < 0:
        if stats is not None:
            stats.skewed += 1
        log.debug("timestamp %.6f precedes capture start %.6f", t, t0)
        return 0
    return elapsed


def rebase_timestamp(t: float, t0: float, stats: Optional[AnonStats] = None) -> float:
    return rebase_us(t, t0, stats) / 1_000_000


# ── Message anonymization ────────────────────────────────────────────────────


@dataclass(frozen=True)
class AnonMessage:
    rebased_us: int
    body: EdonkeyMessage
    peer: Optional[int] = None
    to_server: bool = True

    @property
    def rebased_time(self) -> float:
        return self.rebased_us / 1_000_000


class Anonymizer:
    """Client and file tables plus the capture start, fed in capture order."""

    def __init__(
        self,
        t0: Optional[float] = None,
        client_bits: int = DEFAULT_CLIENT_BITS,
        index_bytes: tuple[int, int] = DEFAULT_INDEX_BYTES,
        clients: Optional[ClientTable] = None,
        files: Optional[FileTable] = None,
    ) -> None:
        self.t0 = t0
        self.clients = clients if clients is not None else ClientTable(client_bits)
        self.files = files if files is not None else FileTable(index_bytes)
        self.stats = AnonStats()

    def tag(self, tag: MetaTag) -> MetaTag:
        if tag.kind == TagKind.SIZE:
            return MetaTag(TagKind.SIZE, anon_size(tag.value))
        return MetaTag(tag.kind, anon_string(tag.value), tag.code)

    def tags(self, tags) -> tuple[MetaTag, ...]:
        return tuple(self.tag(t) for t in tags)

    def entry(self, entry: FileEntry) -> FileEntry:
        return FileEntry(self.files.anon(entry.file_id), self.tags(entry.tags))

    def body(self, m: EdonkeyMessage) -> EdonkeyMessage:
        if isinstance(m, (ServerListQuery, ServerListAnswer)):
            return m
        if isinstance(m, ServerStatus):
            return ServerStatus(m.users, m.files, anon_string(m.description))
        if isinstance(m, FileSearchQuery):
            return FileSearchQuery(anon_string(m.pattern), self.tags(m.filters))
        if isinstance(m, FileSearchAnswer):
            return FileSearchAnswer(tuple(self.entry(e) for e in m.results))
        if isinstance(m, SourceSearchQuery):
            return SourceSearchQuery(tuple(self.files.anon(f) for f in m.file_ids))
        if isinstance(m, SourceSearchAnswer):
            fid = self.files.anon(m.file_id)
            return SourceSearchAnswer(
                fid, tuple(Source(self.clients.anon(s.client_id), s.port) for s in m.sources)
            )
        if isinstance(m, Announce):
            cid = self.clients.anon(m.client_id)
            return Announce(cid, m.port, tuple(self.entry(e) for e in m.files))
        raise ValueError(f"not an eDonkey message: {m!r}")

    def anonymize(
        self,
        m: EdonkeyMessage,
        timestamp: float,
        peer: Optional[int] = None,
        to_server: bool = True,
    ) -> AnonMessage:
        if self.t0 is None:
            self.t0 = timestamp
        anon_peer = self.clients.anon(peer) if peer is not None else None
        return AnonMessage(
            rebase_us(timestamp, self.t0, self.stats),
            self.body(m),
            anon_peer,
            to_server,
        )


def anonymize_message(
    m: EdonkeyMessage,
    tables: Anonymizer,
    timestamp: float,
    peer: Optional[int] = None,
    to_server: bool = True,
) -> AnonMessage:
    """Anonymize *m*; the peer (client endpoint) is encoded before the body."""
    return tables.anonymize(m, timestamp, peer, to_server)


# ── Snapshots ─────────────────────────────────────────────────────────────────

_CLIENT_HEADER = struct.Struct("<4sBBBQQQ")
_FILE_HEADER = struct.Struct("<4sBBBBQ")
_PAIR = struct.Struct("<II")
_COUNT = struct.Struct("<I")
_FILE_REC = struct.Struct("<16sQ")


def save_snapshot(table: Union[ClientTable, FileTable], path: str) -> None:
    """Write *table* in the DKTB snapshot format (little-endian)."""
    with open(path, "wb") as fh:
        if isinstance(table, ClientTable):
            fh.write(_CLIENT_HEADER.pack(
                SNAPSHOT_MAGIC, SNAPSHOT_VERSION, _KIND_CLIENT, table.bits,
                table.next_index, table.low_ids, table.high_ids,
            ))
            fh.write(table.cells.astype("<u4", copy=False).tobytes())
            fh.write(_COUNT.pack(len(table.overflow)))
            for key, index in sorted(table.overflow.items()):
                fh.write(_PAIR.pack(key, index))
            return
        i, j = table.index_bytes
        fh.write(_FILE_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, _KIND_FILE, i, j, table.next_index))
        for keys, ids in zip(table.keys, table.ids):
            fh.write(_COUNT.pack(len(keys)))
            fh.write(b"".join(_FILE_REC.pack(k, n) for k, n in zip(keys, ids)))


class SnapshotError(ValueError):
    """Unreadable or inconsistent table snapshot."""


def _read_exact(fh, size: int, path: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise SnapshotError(f"{path!r}: truncated table snapshot")
    return data


def load_snapshot(path: str) -> Union[ClientTable, FileTable]:
    with open(path, "rb") as fh:
        head = _read_exact(fh, 7, path)
        magic, version, kind = head[:4], head[4], head[5]
        if magic != SNAPSHOT_MAGIC or version != SNAPSHOT_VERSION:
            raise SnapshotError(f"{path!r} is not a version {SNAPSHOT_VERSION} DKTB snapshot")
        if kind == _KIND_CLIENT:
            rest = _read_exact(fh, _CLIENT_HEADER.size - 7, path)
            _, _, _, bits, next_index, low_ids, high_ids = _CLIENT_HEADER.unpack(head + rest)
            if not 8 <= bits <= 32:
                raise SnapshotError(f"{path!r}: client key-space width {bits} outside 8..32")
            table = ClientTable.__new__(ClientTable)
            table.bits = bits
            table.cells = np.frombuffer(_read_exact(fh, 4 << bits, path), dtype="<u4").astype(np.uint32)
            table.next_index, table.low_ids, table.high_ids = next_index, low_ids, high_ids
            (count,) = _COUNT.unpack(_read_exact(fh, 4, path))
            table.overflow = dict(_PAIR.iter_unpack(_read_exact(fh, _PAIR.size * count, path)))
            return table
        if kind == _KIND_FILE:
            rest = _read_exact(fh, _FILE_HEADER.size - 7, path)
            _, _, _, i, j, next_index = _FILE_HEADER.unpack(head + rest)
            try:
                table = FileTable((i, j))
            except ValueError as exc:
                raise SnapshotError(f"{path!r}: {exc}") from exc
            table.next_index = next_index
            for b in range(NUM_BUCKETS):
                (count,) = _COUNT.unpack(_read_exact(fh, 4, path))
                pairs = list(_FILE_REC.iter_unpack(_read_exact(fh, _FILE_REC.size * count, path)))
                table.keys[b] = [k for k, _ in pairs]
                table.ids[b] = [n for _, n in pairs]
            return table
        raise SnapshotError(f"{path!r}: unknown snapshot table kind {kind}")
