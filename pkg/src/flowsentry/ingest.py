"""Flow ingestion: NetFlow v5 datagrams, flow CSV files and feature extraction.

All multi-byte integers on the NetFlow v5 wire are big-endian. The CSV
schema is the package's interchange format: one flow per row under the
header ``src_ip,dst_ip,src_port,dst_port,protocol,first_ms,last_ms,
packets,bytes,tcp_flags,label,vector_tag``.
"""

from __future__ import annotations

import csv
import enum
import io
import struct
from dataclasses import dataclass, field, replace
from ipaddress import IPv4Address
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    RowParseError,
    SchemaMismatch,
    TooManyRecords,
    TruncatedDatagram,
    VersionMismatch,
)

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10
TCP_URG = 0x20

# Duration floor applied before any rate division (seconds).
DURATION_FLOOR_S = 0.001

FEATURE_COUNT = 12
FEATURE_NAMES = (
    "log1p_packets",
    "log1p_bytes",
    "duration_s",
    "mean_pkt_size",
    "pps",
    "bps",
    "proto_tcp",
    "proto_udp",
    "proto_icmp",
    "dst_port_privileged",
    "src_port_privileged",
    "syn_flag",
)

CSV_COLUMNS = (
    "src_ip", "dst_ip", "src_port", "dst_port", "protocol",
    "first_ms", "last_ms", "packets", "bytes", "tcp_flags",
    "label", "vector_tag",
)


class Label(enum.Enum):
    BENIGN = "Benign"
    MALICIOUS = "Malicious"
    UNLABELED = "Unlabeled"


@dataclass(frozen=True)
class FlowRecord:
    """One aggregated unidirectional flow.

    Timing is in milliseconds; counters are totals over the flow's life.
    ``tcp_flags`` is the OR-accumulated flag mask (0 for non-TCP flows).
    """

    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    first_ms: int
    last_ms: int
    packets: int
    bytes: int
    tcp_flags: int = 0
    label: Label = Label.UNLABELED
    vector_tag: str | None = None

    def __post_init__(self):
        if not 0 <= self.src_port <= 65535:
            raise ValueError(f"src_port out of range: {self.src_port}")
        if not 0 <= self.dst_port <= 65535:
            raise ValueError(f"dst_port out of range: {self.dst_port}")
        if not 0 <= self.protocol <= 255:
            raise ValueError(f"protocol out of range: {self.protocol}")
        if not 0 <= self.tcp_flags <= 255:
            raise ValueError(f"tcp_flags out of range: {self.tcp_flags}")
        if self.last_ms < self.first_ms:
            raise ValueError("last_ms must be >= first_ms")
        if self.packets < 1:
            raise ValueError("packets must be >= 1")
        if self.bytes < 1:
            raise ValueError("bytes must be >= 1")
        # Validate address syntax eagerly so bad rows fail at construction.
        IPv4Address(self.src_ip)
        IPv4Address(self.dst_ip)

    @property
    def duration_s(self) -> float:
        """Flow duration in seconds, floored at 1 ms."""
        return max((self.last_ms - self.first_ms) / 1000.0, DURATION_FLOOR_S)

    def with_label(self, label: Label, vector_tag: str | None = None) -> "FlowRecord":
        return replace(self, label=label, vector_tag=vector_tag)


@dataclass
class FlowDataset:
    """An ordered list of flows plus a free-text source descriptor."""

    flows: list[FlowRecord] = field(default_factory=list)
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.flows)

    def __iter__(self):
        return iter(self.flows)


# --- NetFlow v5 wire format -------------------------------------------------

# header: version, count, sys_uptime, unix_secs, unix_nsecs, flow_sequence,
#         engine_type, engine_id, sampling_interval
_V5_HEADER = struct.Struct("!HHIIIIBBH")
# record: srcaddr, dstaddr, nexthop, input, output, dPkts, dOctets, First,
#         Last, srcport, dstport, pad, tcp_flags, prot, tos, src_as, dst_as,
#         src_mask, dst_mask, pad
_V5_RECORD = struct.Struct("!IIIHHIIIIHHBBBBHHBBH")

V5_HEADER_LEN = _V5_HEADER.size   # 24
V5_RECORD_LEN = _V5_RECORD.size   # 48
V5_MAX_RECORDS = 30


def parse_netflow_v5(datagram: bytes) -> list[FlowRecord]:
    """Decode one NetFlow v5 export datagram into FlowRecords.

    The whole datagram is rejected (no partial records) on a version or
    length mismatch. Degenerate exports with zero packet/byte counters are
    clamped to 1 to keep the record invariants; uptime fields are taken
    as-is with ``last`` floored at ``first``.
    """
    if len(datagram) < V5_HEADER_LEN:
        raise TruncatedDatagram(
            f"datagram of {len(datagram)} bytes is shorter than the 24-byte header")
    version, count = struct.unpack("!HH", datagram[:4])
    if version != 5:
        raise VersionMismatch(f"expected NetFlow version 5, got {version}")
    expected = V5_HEADER_LEN + V5_RECORD_LEN * count
    if len(datagram) != expected:
        raise TruncatedDatagram(
            f"header declares {count} records ({expected} bytes) but datagram "
            f"has {len(datagram)} bytes")

    flows = []
    offset = V5_HEADER_LEN
    for _ in range(count):
        (srcaddr, dstaddr, _nexthop, _input, _output, d_pkts, d_octets,
         first, last, srcport, dstport, _pad1, tcp_flags, prot, _tos,
         _src_as, _dst_as, _src_mask, _dst_mask, _pad2) = _V5_RECORD.unpack_from(
            datagram, offset)
        offset += V5_RECORD_LEN
        flows.append(FlowRecord(
            src_ip=str(IPv4Address(srcaddr)),
            dst_ip=str(IPv4Address(dstaddr)),
            src_port=srcport,
            dst_port=dstport,
            protocol=prot,
            first_ms=first,
            last_ms=max(first, last),
            packets=max(1, d_pkts),
            bytes=max(1, d_octets),
            tcp_flags=tcp_flags,
            label=Label.UNLABELED,
        ))
    return flows


def serialize_netflow_v5(
    flows: Sequence[FlowRecord],
    sys_uptime: int = 0,
    unix_secs: int = 0,
    unix_nsecs: int = 0,
    flow_sequence: int = 0,
    engine_type: int = 0,
    engine_id: int = 0,
    sampling_interval: int = 0,
) -> bytes:
    """Encode up to 30 flows as one NetFlow v5 datagram.

    Fields the FlowRecord does not retain (nexthop, interfaces, AS numbers,
    masks, TOS) are written as zero.
    """
    if len(flows) > V5_MAX_RECORDS:
        raise TooManyRecords(
            f"{len(flows)} records exceed the v5 per-datagram limit of {V5_MAX_RECORDS}")
    out = bytearray(_V5_HEADER.pack(
        5, len(flows), sys_uptime, unix_secs, unix_nsecs, flow_sequence,
        engine_type, engine_id, sampling_interval))
    for f in flows:
        out += _V5_RECORD.pack(
            int(IPv4Address(f.src_ip)), int(IPv4Address(f.dst_ip)), 0, 0, 0,
            f.packets, f.bytes, f.first_ms, f.last_ms,
            f.src_port, f.dst_port, 0, f.tcp_flags, f.protocol, 0,
            0, 0, 0, 0, 0)
    return bytes(out)


def iter_netflow_v5_stream(data: bytes) -> Iterable[FlowRecord]:
    """Parse a byte stream of back-to-back v5 datagrams (capture file)."""
    offset = 0
    while offset < len(data):
        if len(data) - offset < V5_HEADER_LEN:
            raise TruncatedDatagram(
                f"trailing {len(data) - offset} bytes are not a full v5 header")
        _, count = struct.unpack("!HH", data[offset:offset + 4])
        end = offset + V5_HEADER_LEN + V5_RECORD_LEN * count
        if end > len(data):
            raise TruncatedDatagram(
                f"datagram at offset {offset} declares {count} records past end of stream")
        yield from parse_netflow_v5(data[offset:end])
        offset = end


# --- flow CSV ----------------------------------------------------------------

def read_flow_csv(source: io.TextIOBase | str, provenance: str = "") -> FlowDataset:
    """Read a flow CSV (header required); unknown columns are ignored."""
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.DictReader(source)
    header = reader.fieldnames or []
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise SchemaMismatch(f"flow CSV is missing required columns: {', '.join(missing)}")
    flows = []
    for i, row in enumerate(reader):
        rownum = i + 2  # 1-based, counting the header line
        try:
            label = Label(row["label"])
            tag = row["vector_tag"] or None
            flows.append(FlowRecord(
                src_ip=row["src_ip"],
                dst_ip=row["dst_ip"],
                src_port=int(row["src_port"]),
                dst_port=int(row["dst_port"]),
                protocol=int(row["protocol"]),
                first_ms=int(row["first_ms"]),
                last_ms=int(row["last_ms"]),
                packets=int(row["packets"]),
                bytes=int(row["bytes"]),
                tcp_flags=int(row["tcp_flags"]),
                label=label,
                vector_tag=tag,
            ))
        except (ValueError, KeyError) as e:
            raise RowParseError(rownum, str(e)) from e
    return FlowDataset(flows=flows, provenance=provenance)


def write_flow_csv(dataset: FlowDataset, sink: io.TextIOBase | None = None) -> str:
    """Write a dataset in the flow CSV schema; returns the CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for f in dataset.flows:
        writer.writerow([
            f.src_ip, f.dst_ip, f.src_port, f.dst_port, f.protocol,
            f.first_ms, f.last_ms, f.packets, f.bytes, f.tcp_flags,
            f.label.value, f.vector_tag or "",
        ])
    text = buf.getvalue()
    if sink is not None:
        sink.write(text)
    return text


# --- feature extraction -------------------------------------------------------

def flow_features(flow: FlowRecord) -> np.ndarray:
    """Extract the fixed 12-feature vector of one flow.

    Order: log1p(packets), log1p(bytes), duration_s, mean packet size,
    pps, bps, proto==TCP, proto==UDP, proto==ICMP, dst_port<1024,
    src_port<1024, SYN flag set. Duration is floored at 1 ms before the
    rate divisions, so the result is always finite.
    """
    dur = flow.duration_s
    return np.array([
        np.log1p(flow.packets),
        np.log1p(flow.bytes),
        dur,
        flow.bytes / flow.packets,
        flow.packets / dur,
        flow.bytes * 8.0 / dur,
        1.0 if flow.protocol == PROTO_TCP else 0.0,
        1.0 if flow.protocol == PROTO_UDP else 0.0,
        1.0 if flow.protocol == PROTO_ICMP else 0.0,
        1.0 if flow.dst_port < 1024 else 0.0,
        1.0 if flow.src_port < 1024 else 0.0,
        1.0 if flow.tcp_flags & TCP_SYN else 0.0,
    ], dtype=np.float64)


def feature_matrix(flows: Sequence[FlowRecord]) -> np.ndarray:
    """Vectorized ``flow_features`` over a flow list; shape (n, 12)."""
    n = len(flows)
    if n == 0:
        return np.zeros((0, FEATURE_COUNT), dtype=np.float64)
    packets = np.array([f.packets for f in flows], dtype=np.float64)
    nbytes = np.array([f.bytes for f in flows], dtype=np.float64)
    dur = np.array([f.last_ms - f.first_ms for f in flows], dtype=np.float64) / 1000.0
    dur = np.maximum(dur, DURATION_FLOOR_S)
    proto = np.array([f.protocol for f in flows])
    dport = np.array([f.dst_port for f in flows])
    sport = np.array([f.src_port for f in flows])
    flags = np.array([f.tcp_flags for f in flows])
    out = np.empty((n, FEATURE_COUNT), dtype=np.float64)
    out[:, 0] = np.log1p(packets)
    out[:, 1] = np.log1p(nbytes)
    out[:, 2] = dur
    out[:, 3] = nbytes / packets
    out[:, 4] = packets / dur
    out[:, 5] = nbytes * 8.0 / dur
    out[:, 6] = proto == PROTO_TCP
    out[:, 7] = proto == PROTO_UDP
    out[:, 8] = proto == PROTO_ICMP
    out[:, 9] = dport < 1024
    out[:, 10] = sport < 1024
    out[:, 11] = (flags & TCP_SYN) != 0
    return out
