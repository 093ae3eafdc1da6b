"""workload_gen.py – Synthetic eDonkey workload written as a pcap capture.

A seeded population of clients announces and searches for files through
one directory server.  The output is

* a pcap file (Ethernet/IPv4/UDP, server port answers included),
* a drop sidecar ``<epoch_seconds> <drops>`` next to it,
* a :class:`ground_truth.GroundTruth` sidecar describing exactly what the
  pipeline must find.

Shapes:

* the number of clients announcing each file follows a Zipf law truncated
  to the population (``provide_exponent``),
* the number of clients asking for each asked file likewise
  (``ask_exponent``),
* both are drawn from clients weighted by a Zipf activity law
  (``activity_exponent``, 0 for uniform), so per-client counts are
  heavy-tailed too,
* ``cohort_52`` extra-curious clients ask for exactly 52 files each,
* a fraction of fileIDs is forged with a 2-byte prefix,
* file sizes carry extra mass at CD-ROM splits (``size_peaks``).

Each client's messages are spread uniformly over ``duration`` (a Poisson
process conditioned on its message count).  Server answers follow their
query after a few milliseconds.

Noise is injected per datagram after encoding: payload corruption
(``malformed_rate`` with ``corruption_mix``), IP fragmentation
(``fragment_rate``) and broken IPv4 frames (``broken_frame_rate``).
"""

from __future__ import annotations

import json
import logging
import os
import socket
import sys
from dataclasses import dataclass, field
from typing import Optional

import dpkt
import numpy as np

from ed2k_wire import (
    FILE_ID_LEN,
    MAX_SHORT_LIST,
    Announce,
    DecodeErrorKind,
    EdonkeyMessage,
    FileEntry,
    FileSearchAnswer,
    FileSearchQuery,
    MetaTag,
    Opcode,
    ServerAddr,
    ServerListAnswer,
    ServerListQuery,
    ServerStatus,
    Source,
    SourceSearchAnswer,
    SourceSearchQuery,
    TagKind,
    client_id_from_ip,
    encode_message,
)
from ground_truth import GroundTruth, count_message, write_ground_truth
from pcap_ingest import write_drop_sidecar

log = logging.getLogger(__name__)

# ── Reference data ────────────────────────────────────────────────────────────

_BASE_DIR = getattr(sys, "_MEIPASS", os.path.dirname(os.path.abspath(__file__)))
_TABLES_DIR = os.path.join(_BASE_DIR, "tables")


def _load_json(filename: str) -> dict:
    with open(os.path.join(_TABLES_DIR, filename), "r", encoding="utf-8") as fh:
        return json.load(fh)


_default_workload: dict = _load_json("default_workload.json")

WORDS: list[str] = _default_workload["words"]
EXTENSIONS: list[str] = _default_workload["extensions"]
FILE_TYPES: list[str] = _default_workload["types"]

CORRUPTIONS = ("truncate", "opcode", "magic", "trailing")
CORRUPTION_KINDS = {
    "truncate": DecodeErrorKind.STRUCTURALLY_INVALID,
    "opcode": DecodeErrorKind.UNKNOWN_OPCODE,
    "magic": DecodeErrorKind.BAD_MAGIC,
    "trailing": DecodeErrorKind.TRAILING_BYTES,
}
_UNUSED_OPCODES = np.array([b for b in range(256) if b not in set(Opcode)], dtype=np.uint8)

MAX_FILE_KB = 4_000_000  # sizes stay below the 32-bit Size tag limit
ANSWER_DELAY_US = 2_000
_CLIENT_MAC = b"\x02\x00\x00\x00\x00\x01"
_SERVER_MAC = b"\x02\x00\x00\x00\x00\x02"


# ── Configuration ─────────────────────────────────────────────────────────────


@dataclass
class WorkloadConfig:
    seed: int = 2008
    num_clients: int = 2000
    num_files: int = 5000
    provide_exponent: float = 2.0
    ask_exponent: float = 2.0
    activity_exponent: float = 1.0
    asked_fraction: float = 0.8
    forged_fraction: float = 0.0
    forged_prefixes: list[int] = field(default_factory=lambda: [0x0000, 0x0100])
    malformed_rate: float = 0.0
    fragment_rate: float = 0.0
    broken_frame_rate: float = 0.0
    drop_schedule: list[tuple[float, int]] = field(default_factory=list)
    duration: float = 3600.0
    cohort_52: int = 0
    size_peaks: list[tuple[int, float]] = field(default_factory=list)
    low_id_fraction: float = 0.0
    search_rate: float = 0.0
    server_list_rate: float = 0.0
    announce_batch: int = 20
    query_batch: int = 10
    max_sources: int = 20
    max_results: int = 5
    num_servers: int = 8
    start_time: float = 1199145600.0
    server_ip: str = "192.0.2.10"
    server_port: int = 4661
    corruption_mix: dict[str, float] = field(default_factory=lambda: {"truncate": 1.0})

    @classmethod
    def from_dict(cls, values: dict) -> "WorkloadConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown workload settings: {sorted(unknown)!r}")
        cfg = cls(**values)
        cfg.drop_schedule = [(float(t), int(n)) for t, n in cfg.drop_schedule]
        cfg.size_peaks = [(int(kb), float(w)) for kb, w in cfg.size_peaks]
        cfg.forged_prefixes = [int(p) for p in cfg.forged_prefixes]
        return cfg

    def validate(self) -> None:
        """Raise ``ValueError`` for settings the generator cannot honour."""
        for name in ("malformed_rate", "fragment_rate", "broken_frame_rate", "forged_fraction",
                     "asked_fraction", "low_id_fraction", "server_list_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be within [0, 1], got {value!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned value, got {self.seed!r}")
        if self.num_clients < 1 or self.num_files < 1:
            raise ValueError(
                f"need at least one client and one file, got {self.num_clients!r} and {self.num_files!r}"
            )
        if self.provide_exponent <= 0 or self.ask_exponent <= 0:
            raise ValueError(
                f"exponents must be > 0, got {self.provide_exponent!r} and {self.ask_exponent!r}"
            )
        if self.activity_exponent < 0:
            raise ValueError(f"activity_exponent must be >= 0, got {self.activity_exponent!r}")
        if self.cohort_52 < 0 or self.cohort_52 >= self.num_clients:
            raise ValueError(f"cohort_52 must be below num_clients, got {self.cohort_52!r}")
        if self.cohort_52 and self.num_files < 52:
            raise ValueError(f"a 52-file cohort needs at least 52 files, got {self.num_files!r}")
        if not self.forged_prefixes or any(not 0 <= p <= 0xFFFF for p in self.forged_prefixes):
            raise ValueError(f"forged_prefixes must be 2-byte values, got {self.forged_prefixes!r}")
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration!r}")
        if self.search_rate < 0:
            raise ValueError(f"search_rate must be >= 0, got {self.search_rate!r}")
        if not 1 <= self.announce_batch <= 0xFFFF:
            raise ValueError(f"announce_batch must be 1..65535, got {self.announce_batch!r}")
        if not 1 <= self.query_batch <= MAX_SHORT_LIST:
            raise ValueError(f"query_batch must be 1..{MAX_SHORT_LIST}, got {self.query_batch!r}")
        if self.max_sources < 1 or self.max_results < 0 or self.num_servers < 0:
            raise ValueError("max_sources must be >= 1, max_results and num_servers >= 0")
        if not 0 < self.server_port <= 0xFFFF:
            raise ValueError(f"server_port must be 1..65535, got {self.server_port!r}")
        if any(n < 0 for _, n in self.drop_schedule):
            raise ValueError(f"drop counts must be >= 0, got {self.drop_schedule!r}")
        for kb, weight in self.size_peaks:
            if not 0 <= kb <= MAX_FILE_KB or weight < 0:
                raise ValueError(f"size peak {(kb, weight)!r} out of range")
        if sum(w for _, w in self.size_peaks) > 1.0:
            raise ValueError("size peak weights must sum to at most 1")
        mix = self.corruption_mix
        if set(mix) - set(CORRUPTIONS) or any(w < 0 for w in mix.values()) or sum(mix.values()) <= 0:
            raise ValueError(f"corruption_mix must weigh {CORRUPTIONS!r}, got {mix!r}")
        try:
            socket.inet_aton(self.server_ip)
        except OSError as exc:
            raise ValueError(f"server_ip must be a dotted IPv4 address, got {self.server_ip!r}") from exc


def default_workload_config(**overrides) -> WorkloadConfig:
    """The bundled default workload, with *overrides* applied."""
    values = dict(_default_workload["workload"])
    values.update(overrides)
    return WorkloadConfig.from_dict(values)


# ── Population ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Client:
    ip: int          # network-order IPv4 address
    port: int
    client_id: int   # announced clientID (high ID or 24-bit low ID)

    @property
    def key(self) -> int:
        return client_id_from_ip(self.ip)


def truncated_zipf(rng: np.random.Generator, exponent: float, n_max: int, size: int) -> np.ndarray:
    """Samples of P(k) ∝ k^-exponent over 1..n_max."""
    support = np.arange(1, n_max + 1, dtype=np.float64)
    weights = support ** -exponent
    return rng.choice(n_max, size=size, p=weights / weights.sum()) + 1


def make_clients(rng: np.random.Generator, cfg: WorkloadConfig) -> list[Client]:
    """Unique client addresses; the second octet stays ≥ 128 so no raw
    address pattern is printable ASCII."""
    server = int.from_bytes(socket.inet_aton(cfg.server_ip), "big")
    seen: set[int] = {server}
    low_ids: set[int] = set()
    clients = []
    while len(clients) < cfg.num_clients:
        a = int(rng.integers(1, 224))
        b = int(rng.integers(128, 256))
        c = int(rng.integers(0, 256))
        d = int(rng.integers(1, 255))
        ip = a << 24 | b << 16 | c << 8 | d
        if ip in seen:
            continue
        seen.add(ip)
        port = int(rng.integers(1024, 65536))
        if port == cfg.server_port:
            port = 4672
        if rng.random() < cfg.low_id_fraction:
            cid = int(rng.integers(1, 1 << 24))
            while cid in low_ids:
                cid = int(rng.integers(1, 1 << 24))
            low_ids.add(cid)
        else:
            cid = client_id_from_ip(ip)
        clients.append(Client(ip, port, cid))
    return clients


def make_file_ids(
    rng: np.random.Generator,
    n: int,
    forged_fraction: float = 0.0,
    forged_prefixes=(0x0000, 0x0100),
) -> list[bytes]:
    """*n* distinct fileIDs, ``round(n * forged_fraction)`` of them forged."""
    forged = np.zeros(n, dtype=bool)
    forged[rng.choice(n, size=int(round(n * forged_fraction)), replace=False)] = True
    prefixes = np.asarray(forged_prefixes, dtype=np.uint16)
    seen: set[bytes] = set()
    fids = []
    for is_forged in forged:
        while True:
            raw = rng.bytes(FILE_ID_LEN)
            if is_forged:
                raw = int(prefixes[rng.integers(len(prefixes))]).to_bytes(2, "big") + raw[2:]
            if raw not in seen:
                break
        seen.add(raw)
        fids.append(raw)
    return fids


def make_file_sizes(rng: np.random.Generator, n: int, size_peaks) -> np.ndarray:
    """Sizes in bytes: peak sizes with their weights, log-uniform otherwise."""
    kb = np.exp(rng.uniform(0.0, np.log(MAX_FILE_KB), size=n)).astype(np.int64)
    if size_peaks:
        peaks = np.array([p for p, _ in size_peaks], dtype=np.int64)
        weights = np.array([w for _, w in size_peaks], dtype=np.float64)
        choice = rng.choice(len(peaks) + 1, size=n, p=np.append(weights, 1.0 - weights.sum()))
        on_peak = choice < len(peaks)
        kb[on_peak] = peaks[choice[on_peak]]
    return kb * 1024 + rng.integers(0, 1024, size=n)


def _words(rng: np.random.Generator, k: int) -> list[str]:
    return [WORDS[i] for i in rng.integers(len(WORDS), size=k)]


def make_names(rng: np.random.Generator, n: int) -> list[bytes]:
    return [
        f"{'-'.join(_words(rng, 2))}-{i:05d}.{EXTENSIONS[rng.integers(len(EXTENSIONS))]}".encode()
        for i in range(n)
    ]


# ── Relations and messages ────────────────────────────────────────────────────


@dataclass
class _Planned:
    time_us: int
    order: int
    client: Client
    to_server: bool
    message: EdonkeyMessage


@dataclass
class WorkloadPlan:
    items: list[_Planned]
    secrets: list[bytes]


class _Plan:
    def __init__(self) -> None:
        self.items: list[_Planned] = []

    def add(self, time_us: int, client: Client, to_server: bool, m: EdonkeyMessage) -> None:
        self.items.append(_Planned(time_us, len(self.items), client, to_server, m))

    def sorted(self) -> list[_Planned]:
        return sorted(self.items, key=lambda p: (p.time_us, p.order))


def _chunks(seq: list, size: int) -> list[list]:
    return [seq[i:i + size] for i in range(0, len(seq), size)]


def activity_weights(rng: np.random.Generator, n: int, exponent: float) -> np.ndarray:
    """Selection probabilities ∝ rank^-exponent, ranks shuffled over *n* clients."""
    weights = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return rng.permutation(weights / weights.sum())


def build_relations(rng: np.random.Generator, cfg: WorkloadConfig) -> tuple[list[list[int]], list[list[int]]]:
    """Per client, the file indices it provides and the ones it asks for."""
    provides: list[list[int]] = [[] for _ in range(cfg.num_clients)]
    asks: list[list[int]] = [[] for _ in range(cfg.num_clients)]

    weights = activity_weights(rng, cfg.num_clients, cfg.activity_exponent)
    counts = truncated_zipf(rng, cfg.provide_exponent, cfg.num_clients, cfg.num_files)
    for f, count in enumerate(counts):
        for c in rng.choice(cfg.num_clients, size=int(count), replace=False, p=weights):
            provides[int(c)].append(f)

    pool = cfg.num_clients - cfg.cohort_52
    weights = activity_weights(rng, pool, cfg.activity_exponent)
    asked = np.nonzero(rng.random(cfg.num_files) < cfg.asked_fraction)[0]
    counts = truncated_zipf(rng, cfg.ask_exponent, pool, asked.size)
    for f, count in zip(asked, counts):
        for c in rng.choice(pool, size=int(count), replace=False, p=weights):
            asks[cfg.cohort_52 + int(c)].append(int(f))
    for c in range(cfg.cohort_52):
        asks[c] = sorted(int(f) for f in rng.choice(cfg.num_files, size=52, replace=False))
    return provides, asks


def plan_messages(rng: np.random.Generator, cfg: WorkloadConfig) -> "WorkloadPlan":
    clients = make_clients(rng, cfg)
    fids = make_file_ids(rng, cfg.num_files, cfg.forged_fraction, cfg.forged_prefixes)
    sizes = make_file_sizes(rng, cfg.num_files, cfg.size_peaks)
    names = make_names(rng, cfg.num_files)
    types = [FILE_TYPES[i].encode() for i in rng.integers(len(FILE_TYPES), size=cfg.num_files)]
    provides, asks = build_relations(rng, cfg)

    providers: list[list[int]] = [[] for _ in range(cfg.num_files)]
    for c, files in enumerate(provides):
        for f in files:
            providers[f].append(c)

    def entry(f: int) -> FileEntry:
        return FileEntry(fids[f], (
            MetaTag(TagKind.NAME, names[f]),
            MetaTag(TagKind.SIZE, int(sizes[f])),
            MetaTag(TagKind.TYPE, types[f]),
        ))

    servers = tuple(
        ServerAddr(int(rng.integers(1 << 24, 1 << 32)), int(rng.integers(1024, 65536)))
        for _ in range(cfg.num_servers)
    )
    duration_us = int(cfg.duration * 1_000_000)
    plan = _Plan()

    for c, client in enumerate(clients):
        announces = _chunks(provides[c], cfg.announce_batch)
        queries = _chunks(asks[c], cfg.query_batch)
        n_search = int(rng.poisson(cfg.search_rate)) if cfg.search_rate else 0
        list_query = bool(rng.random() < cfg.server_list_rate)
        total = len(announces) + len(queries) + n_search + int(list_query)
        times = np.sort(rng.integers(0, duration_us, size=total))
        slots = iter(int(t) for t in times)

        for batch in announces:
            plan.add(next(slots), client, True, Announce(
                client.client_id, client.port, tuple(entry(f) for f in batch)))

        for batch in queries:
            t = next(slots)
            plan.add(t, client, True, SourceSearchQuery(tuple(fids[f] for f in batch)))
            for k, f in enumerate(batch, 1):
                sources = tuple(
                    Source(clients[p].client_id, clients[p].port)
                    for p in providers[f][: cfg.max_sources]
                )
                plan.add(t + k * ANSWER_DELAY_US, client, False, SourceSearchAnswer(fids[f], sources))

        for _ in range(n_search):
            t = next(slots)
            words = _words(rng, 2)
            pattern = f"{words[0]} {words[1]} {int(rng.integers(10000))}".encode()
            filters = (MetaTag(TagKind.TYPE, FILE_TYPES[rng.integers(len(FILE_TYPES))].encode()),)
            plan.add(t, client, True, FileSearchQuery(pattern, filters))
            n_hits = min(int(rng.integers(0, cfg.max_results + 1)), cfg.num_files)
            hits = rng.choice(cfg.num_files, size=n_hits, replace=False)
            plan.add(t + ANSWER_DELAY_US, client, False,
                     FileSearchAnswer(tuple(entry(int(f)) for f in hits)))

        if list_query:
            t = next(slots)
            plan.add(t, client, True, ServerListQuery())
            plan.add(t + ANSWER_DELAY_US, client, False, ServerListAnswer(servers))
            plan.add(t + 2 * ANSWER_DELAY_US, client, False, ServerStatus(
                int(rng.integers(0, 1_000_000)), int(rng.integers(0, 1_000_000)),
                b"synthetic eDonkey server",
            ))

    secrets: list[bytes] = []
    for client in clients:
        secrets.append(client.ip.to_bytes(4, "big"))
        secrets.append(client.ip.to_bytes(4, "little"))
        secrets.append(socket.inet_ntoa(client.ip.to_bytes(4, "big")).encode())
    for f in range(cfg.num_files):
        secrets += [fids[f], fids[f].hex().encode(), names[f]]
    return WorkloadPlan(plan.sorted(), secrets)


# ── Frames ────────────────────────────────────────────────────────────────────


def ipv4_packet(
    src: int,
    dst: int,
    ident: int,
    payload: bytes,
    offset: int = 0,
    more: bool = False,
    total_len: Optional[int] = None,
) -> bytes:
    """One IPv4 packet carrying *payload* at byte *offset* of its datagram.

    *total_len* overrides the header's length field (broken frames).
    """
    ip = dpkt.ip.IP(
        src=src.to_bytes(4, "big"),
        dst=dst.to_bytes(4, "big"),
        id=ident,
        len=20 + len(payload) if total_len is None else total_len,
        ttl=64,
        p=dpkt.ip.IP_PROTO_UDP,
        data=payload,
    )
    ip.mf = int(more)
    ip.offset = offset >> 3
    return bytes(ip)


def udp_segment(sport: int, dport: int, payload: bytes) -> bytes:
    return bytes(dpkt.udp.UDP(sport=sport, dport=dport, ulen=8 + len(payload), data=payload))


def ethernet_frame(ip_packet: bytes, to_server: bool) -> bytes:
    src, dst = (_CLIENT_MAC, _SERVER_MAC) if to_server else (_SERVER_MAC, _CLIENT_MAC)
    return bytes(dpkt.ethernet.Ethernet(src=src, dst=dst, type=dpkt.ethernet.ETH_TYPE_IP, data=ip_packet))


def fragment(udp: bytes) -> list[tuple[int, bytes, bool]]:
    """Split a UDP segment into ``(offset, data, more)`` pieces on 8-byte bounds."""
    chunk = max(8, (len(udp) // 2) // 8 * 8)
    pieces = []
    for offset in range(0, len(udp), chunk):
        piece = udp[offset:offset + chunk]
        pieces.append((offset, piece, offset + chunk < len(udp)))
    return pieces


def corrupt(rng: np.random.Generator, payload: bytes, how: str) -> bytes:
    """Damage an encoded message so that it fails to decode in the named way."""
    if how == "truncate":
        n = len(payload)
        return payload[: int(rng.integers(min(2, n - 1), n))]
    if how == "opcode":
        return payload[:1] + bytes((int(rng.choice(_UNUSED_OPCODES)),)) + payload[2:]
    if how == "magic":
        return bytes((int(rng.integers(0, 0xE3)),)) + payload[1:]
    if how == "trailing":
        return payload + rng.bytes(int(rng.integers(1, 9)))
    raise ValueError(f"unknown corruption {how!r}")


# ── Generation ────────────────────────────────────────────────────────────────


@dataclass
class WorkloadFiles:
    pcap_path: str
    truth_path: str
    drops_path: str


def sidecar_paths(pcap_path: str) -> WorkloadFiles:
    return WorkloadFiles(pcap_path, pcap_path + ".truth", pcap_path + ".drops")


def generate_workload(
    cfg: WorkloadConfig,
    pcap_path: str,
    truth_path: Optional[str] = None,
    drops_path: Optional[str] = None,
) -> GroundTruth:
    """Write the workload's pcap and sidecars; return its ground truth."""
    cfg.validate()
    paths = sidecar_paths(pcap_path)
    truth_path = truth_path or paths.truth_path
    drops_path = drops_path or paths.drops_path

    rng = np.random.default_rng(cfg.seed)
    plan = plan_messages(rng, cfg)
    planned = plan.items
    secrets = plan.secrets

    mix_names = [k for k in CORRUPTIONS if cfg.corruption_mix.get(k, 0) > 0]
    mix_p = np.array([cfg.corruption_mix[k] for k in mix_names], dtype=np.float64)
    mix_p /= mix_p.sum()

    server_ip = int.from_bytes(socket.inet_aton(cfg.server_ip), "big")
    truth = GroundTruth(secrets=secrets)
    exp = truth.expected
    exp.update(messages=0, undecoded=0, packets_seen=0, fragments=0,
               fragment_groups=0, malformed=0, filtered=0, datagrams=0)
    for kind in DecodeErrorKind:
        exp[f"failures.{kind.value}"] = 0
    first_us: Optional[int] = None
    last_us: Optional[int] = None
    ident = 0

    log.info("generating %d messages (seed %d)", len(planned), cfg.seed)
    with open(pcap_path, "wb") as fh:
        writer = dpkt.pcap.Writer(fh, snaplen=65535, linktype=dpkt.pcap.DLT_EN10MB)
        for item in planned:
            ts = cfg.start_time + item.time_us / 1_000_000
            client = item.client
            payload = encode_message(item.message)

            if cfg.broken_frame_rate and rng.random() < cfg.broken_frame_rate:
                broken = ipv4_packet(client.ip, server_ip, 0, b"\x00" * 4, total_len=1500)
                writer.writepkt(ethernet_frame(broken, True), ts)
                exp["packets_seen"] += 1
                exp["malformed"] += 1

            how = None
            if cfg.malformed_rate and rng.random() < cfg.malformed_rate:
                how = mix_names[int(rng.choice(len(mix_names), p=mix_p))]
                payload = corrupt(rng, payload, how)

            if item.to_server:
                src, sport, dst, dport = client.ip, client.port, server_ip, cfg.server_port
            else:
                src, sport, dst, dport = server_ip, cfg.server_port, client.ip, client.port
            udp = udp_segment(sport, dport, payload)
            ident = (ident + 1) & 0xFFFF

            if cfg.fragment_rate and rng.random() < cfg.fragment_rate and len(udp) > 8:
                pieces = fragment(udp)
                for offset, piece, more in pieces:
                    writer.writepkt(ethernet_frame(
                        ipv4_packet(src, dst, ident, piece, offset, more), item.to_server), ts)
                exp["packets_seen"] += len(pieces)
                exp["fragments"] += len(pieces)
                exp["fragment_groups"] += 1
            else:
                writer.writepkt(ethernet_frame(ipv4_packet(src, dst, ident, udp), item.to_server), ts)
                exp["packets_seen"] += 1
            exp["datagrams"] += 1

            if how is not None:
                exp["undecoded"] += 1
                exp[f"failures.{CORRUPTION_KINDS[how].value}"] += 1
                continue
            truth.observe(client.key, item.message)
            count_message(truth, item.message)
            first_us = item.time_us if first_us is None else first_us
            last_us = item.time_us

    drops = [(cfg.start_time + t, n) for t, n in cfg.drop_schedule]
    write_drop_sidecar(drops_path, drops)
    exp["drops"] = sum(n for _, n in drops)
    exp["span"] = 0 if first_us is None else (last_us - first_us) / 1_000_000
    truth.finish()
    write_ground_truth(truth, truth_path)
    log.info(
        "wrote %d datagrams (%d undecodable) to %s",
        exp["datagrams"], exp["undecoded"], pcap_path,
    )
    return truth
