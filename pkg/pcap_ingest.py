"""pcap_ingest.py – UDP datagram extraction from classic pcap captures.

Reads Ethernet pcap files with dpkt, keeps IPv4/UDP datagrams exchanged with
the eDonkey server port (queries to the server and its answers), reassembles
IP fragments and keeps the counters reported for a capture: packets seen,
fragments, malformed records and kernel drops (taken from a drop sidecar,
since classic pcap files do not store them).
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Union

import dpkt

log = logging.getLogger(__name__)

# ── Constants ─────────────────────────────────────────────────────────────────

DEFAULT_SERVER_PORT = 4661
DEFAULT_FRAGMENT_HORIZON = 30.0  # seconds of pcap time
MAX_UDP_PAYLOAD = 65507
MAX_LOSS_BUCKETS = 10_000_000

_PCAP_MAGICS = {
    b"\xd4\xc3\xb2\xa1",  # little-endian, microseconds
    b"\xa1\xb2\xc3\xd4",  # big-endian, microseconds
    b"\x4d\x3c\xb2\xa1",  # little-endian, nanoseconds
    b"\xa1\xb2\x3c\x4d",  # big-endian, nanoseconds
}


class PcapFormatError(ValueError):
    """The file does not start with a usable pcap global header."""


# ── Data types ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Datagram:
    timestamp: float
    src_ip: int
    src_port: int
    payload: bytes
    dst_ip: int = 0
    dst_port: int = 0

    def client_ip(self, server_port: int) -> int:
        """Address of the endpoint that is not the server."""
        return self.src_ip if self.dst_port == server_port else self.dst_ip

    def to_server(self, server_port: int) -> bool:
        return self.dst_port == server_port


@dataclass
class IngestStats:
    packets_seen: int = 0
    fragments: int = 0
    malformed: int = 0
    reassembled: int = 0
    fragment_groups: int = 0
    timed_out: int = 0
    filtered: int = 0
    datagrams: int = 0
    first_timestamp: Optional[float] = None
    last_timestamp: Optional[float] = None
    drops_reported: list[tuple[float, int]] = field(default_factory=list)

    @property
    def total_drops(self) -> int:
        return sum(n for _, n in self.drops_reported)

    def as_dict(self) -> dict:
        return {
            "packets_seen": self.packets_seen,
            "fragments": self.fragments,
            "malformed": self.malformed,
            "reassembled": self.reassembled,
            "fragment_groups": self.fragment_groups,
            "timed_out": self.timed_out,
            "filtered": self.filtered,
            "datagrams": self.datagrams,
            "drops": self.total_drops,
        }


@dataclass
class IPFragment:
    """One IPv4 fragment, already stripped of its IP header."""

    timestamp: float
    src: int
    dst: int
    ident: int
    protocol: int
    offset: int  # bytes
    more: bool
    data: bytes


# ── Fragment reassembly ──────────────────────────────────────────────────────


class _FragmentGroup:
    def __init__(self, first_seen: float) -> None:
        self.first_seen = first_seen
        self.pieces: dict[int, bytes] = {}
        self.total: Optional[int] = None
        self.conflict = False

    def add(self, frag: IPFragment) -> None:
        end = frag.offset + len(frag.data)
        for start, data in self.pieces.items():
            lo, hi = max(start, frag.offset), min(start + len(data), end)
            if lo < hi and data[lo - start:hi - start] != frag.data[lo - frag.offset:hi - frag.offset]:
                self.conflict = True
        previous = self.pieces.get(frag.offset)
        if previous is None or len(frag.data) > len(previous):
            self.pieces[frag.offset] = frag.data
        if not frag.more:
            self.total = end

    def assemble(self) -> Optional[bytes]:
        if self.total is None:
            return None
        buf = bytearray(self.total)
        covered = 0
        for start in sorted(self.pieces):
            data = self.pieces[start]
            if start > covered:
                return None
            buf[start:start + len(data)] = data
            covered = max(covered, start + len(data))
        if covered < self.total:
            return None
        return bytes(buf[:self.total])


class Reassembler:
    """Collects IPv4 fragments keyed by (src, dst, id, protocol).

    A group is released as soon as it is complete.  Groups that stay
    incomplete for longer than *horizon* seconds of capture time, or whose
    overlapping fragments disagree, are counted as malformed.
    """

    def __init__(self, stats: IngestStats, horizon: float = DEFAULT_FRAGMENT_HORIZON) -> None:
        self.stats = stats
        self.horizon = horizon
        self._groups: dict[tuple[int, int, int, int], _FragmentGroup] = {}

    def push(self, frag: IPFragment) -> Optional[tuple[float, bytes]]:
        """Add *frag*; return ``(timestamp, ip_payload)`` when its group completes.

        Unfragmented packets pass straight through.
        """
        self.expire(frag.timestamp)
        if not frag.more and frag.offset == 0:
            return frag.timestamp, frag.data
        key = (frag.src, frag.dst, frag.ident, frag.protocol)
        group = self._groups.get(key)
        if group is None:
            group = self._groups[key] = _FragmentGroup(frag.timestamp)
            self.stats.fragment_groups += 1
        group.add(frag)
        if group.conflict:
            del self._groups[key]
            self.stats.malformed += 1
            log.warning("conflicting overlapping fragments for ip id %d", frag.ident)
            return None
        payload = group.assemble()
        if payload is None:
            return None
        del self._groups[key]
        self.stats.reassembled += 1
        return frag.timestamp, payload

    def expire(self, now: float) -> None:
        # Groups are held in arrival order, so the stale ones come first.
        while self._groups:
            key, group = next(iter(self._groups.items()))
            if now - group.first_seen <= self.horizon:
                break
            del self._groups[key]
            self._drop_incomplete(key)

    def flush(self) -> None:
        """Count every still-incomplete group as malformed (end of capture)."""
        for key in list(self._groups):
            del self._groups[key]
            self._drop_incomplete(key)

    def _drop_incomplete(self, key) -> None:
        self.stats.malformed += 1
        self.stats.timed_out += 1
        log.warning("incomplete fragment group for ip id %d timed out", key[2])


def parse_udp(ts: float, src: int, dst: int, transport: Union[bytes, dpkt.udp.UDP]) -> Optional[Datagram]:
    """Build a datagram from a UDP segment; ``None`` when its lengths disagree."""
    if isinstance(transport, dpkt.udp.UDP):
        udp = transport
    elif len(transport) < 8:
        return None
    else:
        udp = dpkt.udp.UDP(transport)
    payload = bytes(udp.data)
    if udp.ulen != 8 + len(payload) or len(payload) > MAX_UDP_PAYLOAD:
        log.debug("udp length %d does not match %d captured bytes", udp.ulen, 8 + len(payload))
        return None
    return Datagram(ts, src, udp.sport, payload, dst, udp.dport)


def reassemble(
    fragments: Iterable[IPFragment],
    stats: Optional[IngestStats] = None,
    horizon: float = DEFAULT_FRAGMENT_HORIZON,
) -> Iterator[Datagram]:
    """Yield a UDP datagram for every unfragmented packet or completed group."""
    stats = stats if stats is not None else IngestStats()
    reassembler = Reassembler(stats, horizon)
    for frag in fragments:
        stats.packets_seen += 1
        if frag.more or frag.offset:
            stats.fragments += 1
        done = reassembler.push(frag)
        if done is None:
            continue
        if frag.protocol != dpkt.ip.IP_PROTO_UDP:
            stats.filtered += 1
            continue
        datagram = parse_udp(done[0], frag.src, frag.dst, done[1])
        if datagram is None:
            stats.malformed += 1
            continue
        stats.datagrams += 1
        yield datagram
    reassembler.flush()


# ── Drop sidecar ─────────────────────────────────────────────────────────────


class DropSidecarError(ValueError):
    """Drop records that cannot be read or placed on the capture timeline."""


def read_drop_sidecar(path: str) -> list[tuple[float, int]]:
    """Parse ``<epoch_seconds> <drops>`` lines."""
    drops: list[tuple[float, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                ts, count = float(parts[0]), int(parts[1])
            except (IndexError, ValueError) as exc:
                raise DropSidecarError(
                    f"{path}:{lineno}: expected '<epoch_seconds> <drops>', got {line!r}"
                ) from exc
            if len(parts) != 2 or count < 0 or not math.isfinite(ts):
                raise DropSidecarError(f"{path}:{lineno}: invalid drop record {line!r}")
            drops.append((ts, count))
    return drops


def write_drop_sidecar(path: str, drops: Iterable[tuple[float, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ts, count in drops:
            fh.write(f"{ts:.6f} {count}\n")


def loss_timeseries(stats: IngestStats, bucket: float) -> list[tuple[float, int]]:
    """Bucket the reported drops over the capture span.

    The span runs from the first to the last packet; bucket starts are
    seconds since the first packet.  Drop records outside the span are
    counted in the nearest edge bucket.  Without packets the span is that
    of the drop records.
    """
    if bucket <= 0:
        raise ValueError(f"bucket must be positive, got {bucket!r}")
    if stats.first_timestamp is not None:
        start, end = stats.first_timestamp, stats.last_timestamp
    elif stats.drops_reported:
        start = min(t for t, _ in stats.drops_reported)
        end = max(t for t, _ in stats.drops_reported)
    else:
        return []
    n_buckets = math.floor((end - start) / bucket) + 1
    if n_buckets > MAX_LOSS_BUCKETS:
        raise DropSidecarError(
            f"capture span of {end - start:.0f} s needs {n_buckets} buckets of {bucket!r} s, "
            f"more than {MAX_LOSS_BUCKETS}"
        )
    losses = [0] * n_buckets
    outside = 0
    for t, count in stats.drops_reported:
        i = math.floor((t - start) / bucket)
        if not 0 <= i < n_buckets:
            outside += 1
            i = min(max(i, 0), n_buckets - 1)
        losses[i] += count
    if outside:
        log.warning("%d drop records lie outside the capture span", outside)
    return [(i * bucket, n) for i, n in enumerate(losses)]


def cumulative_losses(series: list[tuple[float, int]]) -> list[tuple[float, int]]:
    total = 0
    out = []
    for start, n in series:
        total += n
        out.append((start, total))
    return out


# ── Reader ───────────────────────────────────────────────────────────────────


class PcapReader:
    """Iterate over the server-port UDP datagrams of one pcap file.

    ``stats`` is updated while iterating; it is complete once the iterator
    is exhausted.
    """

    def __init__(
        self,
        path: str,
        server_port: int = DEFAULT_SERVER_PORT,
        drops_path: Optional[str] = None,
        horizon: float = DEFAULT_FRAGMENT_HORIZON,
    ) -> None:
        self.path = path
        self.server_port = server_port
        self.stats = IngestStats()
        self._reassembler = Reassembler(self.stats, horizon)
        if drops_path is not None:
            self.stats.drops_reported = read_drop_sidecar(drops_path)
        with open(path, "rb") as fh:
            head = fh.read(24)
        if len(head) < 24 or head[:4] not in _PCAP_MAGICS:
            raise PcapFormatError(f"{path!r} does not start with a pcap global header")

    def __iter__(self) -> Iterator[Datagram]:
        with open(self.path, "rb") as fh:
            try:
                reader = dpkt.pcap.Reader(fh)
            except (ValueError, dpkt.dpkt.Error) as exc:
                raise PcapFormatError(f"{self.path!r}: {exc}") from exc
            if reader.datalink() != dpkt.pcap.DLT_EN10MB:
                raise PcapFormatError(f"{self.path!r}: linktype {reader.datalink()} is not Ethernet")
            records = iter(reader)
            while True:
                try:
                    ts, buf = next(records)
                except StopIteration:
                    break
                except (dpkt.dpkt.NeedData, ValueError) as exc:
                    # A record header cut short ends the file.
                    self.stats.packets_seen += 1
                    self.stats.malformed += 1
                    log.warning("%s: truncated pcap record: %s", self.path, exc)
                    break
                yield from self._handle_record(ts, buf)
        self._reassembler.flush()
        log.info(
            "%s: %d packets, %d datagrams, %d fragments, %d malformed",
            self.path, self.stats.packets_seen, self.stats.datagrams,
            self.stats.fragments, self.stats.malformed,
        )

    def _handle_record(self, ts: float, buf: bytes) -> Iterator[Datagram]:
        stats = self.stats
        stats.packets_seen += 1
        if stats.first_timestamp is None:
            stats.first_timestamp = ts
        stats.last_timestamp = ts if stats.last_timestamp is None else max(stats.last_timestamp, ts)

        try:
            eth = dpkt.ethernet.Ethernet(buf)
        except (dpkt.dpkt.UnpackError, dpkt.dpkt.NeedData):
            stats.malformed += 1
            return
        if eth.type != dpkt.ethernet.ETH_TYPE_IP:
            stats.filtered += 1
            return

        # dpkt leaves the bytes undecoded when the IPv4 header does not parse.
        ip = eth.data
        if not isinstance(ip, dpkt.ip.IP) or ip.v != 4:
            stats.malformed += 1
            log.debug("undecodable IPv4 header at %.6f", ts)
            return
        header_len = ip.hl << 2
        if ip.len < header_len or len(ip.data) != ip.len - header_len:
            stats.malformed += 1
            log.debug("IPv4 length %d does not match the captured frame at %.6f", ip.len, ts)
            return

        src = int.from_bytes(ip.src, "big")
        dst = int.from_bytes(ip.dst, "big")
        offset, more = ip.offset << 3, bool(ip.mf)
        if not (more or offset):
            self._reassembler.expire(ts)
            datagram = self._udp_datagram(ts, src, dst, ip.p, ip.data)
            if datagram is not None:
                yield datagram
            return

        stats.fragments += 1
        done = self._reassembler.push(IPFragment(ts, src, dst, ip.id, ip.p, offset, more, bytes(ip.data)))
        if done is None:
            return
        ts, transport = done
        datagram = self._udp_datagram(ts, src, dst, ip.p, transport)
        if datagram is not None:
            yield datagram

    def _udp_datagram(
        self, ts: float, src: int, dst: int, proto: int, transport: Union[bytes, dpkt.udp.UDP]
    ) -> Optional[Datagram]:
        stats = self.stats
        if proto != dpkt.ip.IP_PROTO_UDP:
            stats.filtered += 1
            return None
        datagram = parse_udp(ts, src, dst, transport)
        if datagram is None:
            stats.malformed += 1
            return None
        if self.server_port not in (datagram.dst_port, datagram.src_port):
            stats.filtered += 1
            return None
        stats.datagrams += 1
        return datagram


def read_pcap(
    path: str,
    server_port: int = DEFAULT_SERVER_PORT,
    drops_path: Optional[str] = None,
    horizon: float = DEFAULT_FRAGMENT_HORIZON,
) -> PcapReader:
    """Open *path* for streaming; iterate the result for datagrams.

    When *drops_path* is ``None`` and ``<path>.drops`` exists, that sidecar is
    used for the drop counters.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"pcap file not found: {path!r}")
    if drops_path is None and os.path.isfile(path + ".drops"):
        drops_path = path + ".drops"
    return PcapReader(path, server_port, drops_path, horizon)
