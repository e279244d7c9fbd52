"""
Classic pcap reading and writing, flow segmentation and anonymization.
"""

import io
import ipaddress
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import BinaryIO, Dict, FrozenSet, Iterable, Iterator, List, NamedTuple, Optional, TextIO, Tuple, Union

import dpkt

from .errors import (
    ConfigError,
    FieldOutOfRange,
    LinktypeMismatch,
    TimestampOverflow,
    TruncatedCapture,
    UnsupportedFormat,
)
from .layers import (
    ETHERTYPE_IPV4,
    ETHERTYPE_IPV6,
    IPV4_MIN_HEADER_LEN,
    IPV6_HEADER_LEN,
    IP_PROTO_TCP,
    IP_PROTO_UDP,
    LINKTYPE_ETHERNET,
    LINKTYPE_IPV4,
    LINKTYPE_IPV6,
    LINKTYPE_LINUX_SLL,
    LINKTYPE_RAW,
    link_address_spans,
    locate_network_layer,
)

logger = logging.getLogger(__name__)

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D
MAGIC_PCAPNG = 0x0A0D0D0A
GLOBAL_HEADER_FMT = "IHHiIII"
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_FMT = "IIII"
RECORD_HEADER_LEN = 16
PCAP_VERSION = (2, 4)
DEFAULT_SNAPLEN = 65535
USEC_PER_SEC = 1_000_000
MAX_TS_SEC = 0xFFFFFFFF

ANONYMIZE_FIELDS = frozenset({"mac", "ip", "ports"})


class Direction(Enum):
    OUTGOING = "outgoing"
    INCOMING = "incoming"


@dataclass(frozen=True)
class PacketRecord:
    """One captured frame. Timestamps are kept as integer microseconds."""
    timestamp_us: int
    linktype: int
    frame: bytes
    direction: Optional[Direction] = None

    def __post_init__(self) -> None:
        if len(self.frame) < 1:
            raise ValueError("PacketRecord frame must hold at least one octet")
        if self.timestamp_us < 0:
            raise ValueError(f"PacketRecord timestamp must be >= 0, got {self.timestamp_us} us")

    @property
    def timestamp(self) -> float:
        """Seconds since the epoch."""
        return self.timestamp_us / USEC_PER_SEC


Endpoint = Tuple[str, int]


class FlowKey(NamedTuple):
    """Canonical 5-tuple: endpoints in sorted order, so both directions match."""
    endpoint_a: Endpoint
    endpoint_b: Endpoint
    protocol: int


@dataclass
class Flow:
    key: FlowKey
    packets: List[PacketRecord]
    initiator: Endpoint

    @property
    def linktype(self) -> int:
        return self.packets[0].linktype if self.packets else LINKTYPE_ETHERNET

    def __len__(self) -> int:
        return len(self.packets)


@dataclass
class FlowSplit:
    """Result of split_flows: the flows plus drop counts per reason."""
    flows: List[Flow]
    dropped: Dict[str, int] = field(default_factory=dict)

    @property
    def dropped_count(self) -> int:
        return sum(self.dropped.values())

    @property
    def kept_count(self) -> int:
        return sum(len(flow) for flow in self.flows)


@dataclass
class IOConfig:
    """pcap-io settings: which fields to anonymize before classification."""
    anonymize: List[str] = field(default_factory=lambda: ["mac", "ip", "ports"])

    def __post_init__(self) -> None:
        unknown = set(self.anonymize) - ANONYMIZE_FIELDS
        if unknown:
            raise ConfigError(f"unknown anonymize fields {sorted(unknown)}; expected subset of {sorted(ANONYMIZE_FIELDS)}")


def _read_global_header(stream: BinaryIO) -> Tuple[str, int]:
    """Parse the 24-byte global header; return (struct byte order, linktype)."""
    header = stream.read(GLOBAL_HEADER_LEN)
    if len(header) < 4:
        raise UnsupportedFormat("input is shorter than a pcap magic number")

    (magic,) = struct.unpack("<I", header[:4])
    (magic_be,) = struct.unpack(">I", header[:4])
    if magic == MAGIC_USEC:
        endian = "<"
    elif magic_be == MAGIC_USEC:
        endian = ">"
    elif MAGIC_NSEC in (magic, magic_be):
        raise UnsupportedFormat("nanosecond-resolution pcap is not supported")
    elif magic == MAGIC_PCAPNG:
        raise UnsupportedFormat("pcapng input must be converted to classic pcap first")
    else:
        raise UnsupportedFormat(f"bad pcap magic 0x{magic_be:08X}")

    if len(header) < GLOBAL_HEADER_LEN:
        raise UnsupportedFormat(f"global header is {len(header)} bytes, expected {GLOBAL_HEADER_LEN}")
    fields = struct.unpack(endian + GLOBAL_HEADER_FMT, header)
    return endian, fields[6] & 0xFFFF


def _iter_records(stream: BinaryIO, endian: str, linktype: int) -> Iterator[PacketRecord]:
    record_header = struct.Struct(endian + RECORD_HEADER_FMT)
    index = 0
    while True:
        raw = stream.read(RECORD_HEADER_LEN)
        if not raw:
            return
        if len(raw) < RECORD_HEADER_LEN:
            raise TruncatedCapture(index, f"record header has {len(raw)} of {RECORD_HEADER_LEN} bytes")
        ts_sec, ts_usec, incl_len, _orig_len = record_header.unpack(raw)
        frame = stream.read(incl_len)
        if len(frame) < incl_len:
            raise TruncatedCapture(index, f"record data has {len(frame)} of {incl_len} bytes")
        if incl_len == 0:
            raise TruncatedCapture(index, "record carries no captured bytes")
        yield PacketRecord(ts_sec * USEC_PER_SEC + ts_usec, linktype, frame)
        index += 1


def iter_pcap(stream: BinaryIO) -> Tuple[int, Iterator[PacketRecord]]:
    """
    Open a classic pcap stream for lazy reading.

    Args:
        stream: Binary stream positioned at the global header

    Returns:
        (linktype, iterator over PacketRecords in on-disk order)
    """
    endian, linktype = _read_global_header(stream)
    return linktype, _iter_records(stream, endian, linktype)


def read_pcap(source: Union[bytes, BinaryIO]) -> Tuple[int, List[PacketRecord]]:
    """
    Read a classic (microsecond) pcap capture.

    Args:
        source: Raw capture bytes or a binary stream

    Returns:
        (linktype, records) where records preserve on-disk order
    """
    stream = io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else source
    linktype, records = iter_pcap(stream)
    return linktype, list(records)


def write_pcap(linktype: int, records: Iterable[PacketRecord]) -> bytes:
    """
    Serialize records as little-endian microsecond pcap.

    Args:
        linktype: Link type written into the global header
        records: Records sharing that link type

    Returns:
        The complete capture as bytes
    """
    records = list(records)
    out = io.BytesIO()
    snaplen = max([DEFAULT_SNAPLEN] + [len(r.frame) for r in records])
    out.write(struct.pack("<" + GLOBAL_HEADER_FMT, MAGIC_USEC, PCAP_VERSION[0], PCAP_VERSION[1],
                          0, 0, snaplen, linktype))
    for index, record in enumerate(records):
        if record.linktype != linktype:
            raise LinktypeMismatch(f"record {index} has linktype {record.linktype}, capture uses {linktype}")
        ts_sec, ts_usec = divmod(record.timestamp_us, USEC_PER_SEC)
        if ts_sec < 0 or ts_sec > MAX_TS_SEC:
            raise TimestampOverflow(f"record {index} timestamp {record.timestamp:.6f}s does not fit 32-bit seconds")
        out.write(struct.pack("<" + RECORD_HEADER_FMT, ts_sec, ts_usec, len(record.frame), len(record.frame)))
        out.write(record.frame)
    return out.getvalue()


def read_pcap_file(path: str) -> Tuple[int, List[PacketRecord]]:
    """Read a classic pcap file from disk."""
    with open(path, "rb") as f:
        return read_pcap(f)


def write_pcap_file(path: str, linktype: int, records: Iterable[PacketRecord]) -> None:
    """Write records to a classic pcap file on disk."""
    data = write_pcap(linktype, records)
    with open(path, "wb") as f:
        f.write(data)


def decode_ip(record: PacketRecord) -> Union[str, object]:
    """Decode a frame down to its IP layer with dpkt, or return a drop reason."""
    try:
        if record.linktype == LINKTYPE_ETHERNET:
            ip = dpkt.ethernet.Ethernet(record.frame).data
        elif record.linktype == LINKTYPE_LINUX_SLL:
            ip = dpkt.sll.SLL(record.frame).data
        elif record.linktype in (LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6):
            version = record.frame[0] >> 4
            ip = dpkt.ip6.IP6(record.frame) if version == 6 else dpkt.ip.IP(record.frame)
        else:
            return "unsupported_linktype"
    except (dpkt.Error, struct.error, ValueError):
        return "unparseable"
    if not isinstance(ip, (dpkt.ip.IP, dpkt.ip6.IP6)):
        return "non_ip"
    return ip


def split_flows(records: Iterable[PacketRecord]) -> FlowSplit:
    """
    Group packets into bidirectional TCP/UDP flows by canonical 5-tuple.

    Non-TCP/UDP and unparseable packets are dropped and counted by reason.

    Args:
        records: Captured packets in capture order

    Returns:
        FlowSplit with flows ordered by first appearance
    """
    grouped: Dict[FlowKey, List[Tuple[PacketRecord, Endpoint]]] = {}
    dropped: Counter = Counter()

    for record in records:
        ip = decode_ip(record)
        if isinstance(ip, str):
            dropped[ip] += 1
            continue
        transport = ip.data
        if isinstance(transport, dpkt.tcp.TCP):
            protocol = IP_PROTO_TCP
        elif isinstance(transport, dpkt.udp.UDP):
            protocol = IP_PROTO_UDP
        else:
            dropped["non_transport"] += 1
            continue
        src = (str(ipaddress.ip_address(ip.src)), transport.sport)
        dst = (str(ipaddress.ip_address(ip.dst)), transport.dport)
        low, high = sorted([src, dst])
        grouped.setdefault(FlowKey(low, high, protocol), []).append((record, src))

    flows: List[Flow] = []
    for key, members in grouped.items():
        members.sort(key=lambda item: item[0].timestamp_us)
        initiator = members[0][1]
        packets = [
            replace(record, direction=Direction.OUTGOING if src == initiator else Direction.INCOMING)
            for record, src in members
        ]
        flows.append(Flow(key, packets, initiator))

    if dropped:
        logger.debug("split_flows dropped %s", dict(dropped))
    return FlowSplit(flows, dict(dropped))


UNKNOWN_KEY = FlowKey(("", 0), ("", 0), 0)


def rebuild_flow(packets: List[PacketRecord]) -> Flow:
    """
    Wrap reconstructed packets in a Flow, recovering key and directions.

    Packets that split_flows groups into exactly one flow get that flow's key
    and direction labels; anything else keeps the packets as given under an
    unknown key.
    """
    split = split_flows(packets)
    if len(split.flows) == 1 and split.dropped_count == 0:
        return split.flows[0]
    return Flow(UNKNOWN_KEY, list(packets), ("", 0))


def write_drop_report(stream: TextIO, source: str, split: FlowSplit) -> None:
    """Append one JSON line describing what split_flows kept and dropped."""
    row = {
        "source": source,
        "flows": len(split.flows),
        "kept_packets": split.kept_count,
        "dropped_packets": split.dropped_count,
        "dropped": dict(sorted(split.dropped.items())),
    }
    stream.write(json.dumps(row, sort_keys=True) + "\n")


def _zero(buf: bytearray, start: int, end: int, what: str) -> None:
    if end > len(buf):
        raise FieldOutOfRange(f"{what} needs bytes {start}..{end}, frame has {len(buf)}")
    buf[start:end] = bytes(end - start)


def _anonymize_frame(frame: bytes, linktype: int, policy: FrozenSet[str]) -> bytes:
    buf = bytearray(frame)
    if "mac" in policy:
        for start, end in link_address_spans(frame, linktype):
            _zero(buf, start, end, "link address")

    if "ip" in policy or "ports" in policy:
        network = locate_network_layer(frame, linktype)
        if network is None or network.ethertype not in (ETHERTYPE_IPV4, ETHERTYPE_IPV6):
            raise FieldOutOfRange(f"frame of {len(frame)} bytes has no IP header to anonymize")
        off = network.offset
        if network.ethertype == ETHERTYPE_IPV4:
            if "ip" in policy:
                _zero(buf, off + 12, off + IPV4_MIN_HEADER_LEN, "IPv4 addresses")
            if len(frame) <= off:
                raise FieldOutOfRange("IPv4 header missing")
            transport = off + (frame[off] & 0x0F) * 4
        else:
            if "ip" in policy:
                _zero(buf, off + 8, off + IPV6_HEADER_LEN, "IPv6 addresses")
            transport = off + IPV6_HEADER_LEN
        if "ports" in policy:
            _zero(buf, transport, transport + 4, "transport ports")
    return bytes(buf)


def anonymize(flow: Flow, policy: Iterable[str]) -> Flow:
    """
    Zero MAC addresses, IP addresses and/or ports in every frame of a flow.

    Lengths and checksums are left untouched.

    Args:
        flow: Flow to anonymize
        policy: Any of "mac", "ip", "ports"

    Returns:
        A new Flow with rewritten frames and a matching key
    """
    policy = frozenset(policy)
    unknown = policy - ANONYMIZE_FIELDS
    if unknown:
        raise ConfigError(f"unknown anonymize fields {sorted(unknown)}", operation="pcap-io.anonymize")
    if not policy:
        return flow

    packets = [replace(p, frame=_anonymize_frame(p.frame, p.linktype, policy)) for p in flow.packets]

    def scrub(endpoint: Endpoint) -> Endpoint:
        address, port = endpoint
        if "ip" in policy:
            address = "::" if ":" in address else "0.0.0.0"
        if "ports" in policy:
            port = 0
        return address, port

    low, high = sorted([scrub(flow.key.endpoint_a), scrub(flow.key.endpoint_b)])
    return Flow(FlowKey(low, high, flow.key.protocol), packets, scrub(flow.initiator))
