"""
Byte-offset helpers for the link, network and transport headers of a
captured frame. Shared by anonymization and generated-packet validation,
both of which work on raw frame bytes rather than decoded objects, since
generated frames are often truncated or malformed. Header sizes and type
codes come from dpkt's own header definitions.
"""

import struct
from typing import List, NamedTuple, Optional, Tuple

import dpkt

# pcap link-type registry values
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229

ETHERTYPE_IPV4 = dpkt.ethernet.ETH_TYPE_IP
ETHERTYPE_IPV6 = dpkt.ethernet.ETH_TYPE_IP6
ETHERTYPE_VLAN = dpkt.ethernet.ETH_TYPE_8021Q

IP_PROTO_TCP = dpkt.ip.IP_PROTO_TCP
IP_PROTO_UDP = dpkt.ip.IP_PROTO_UDP

ETHERNET_HEADER_LEN = dpkt.ethernet.Ethernet.__hdr_len__
VLAN_TAG_LEN = dpkt.ethernet.VLANtag8021Q.__hdr_len__
SLL_HEADER_LEN = dpkt.sll.SLL.__hdr_len__
IPV4_MIN_HEADER_LEN = dpkt.ip.IP.__hdr_len__
IPV6_HEADER_LEN = dpkt.ip6.IP6.__hdr_len__
TCP_MIN_HEADER_LEN = dpkt.tcp.TCP.__hdr_len__
UDP_HEADER_LEN = dpkt.udp.UDP.__hdr_len__

# the link-layer type field closes both link headers
ETHERNET_TYPE_OFFSET = ETHERNET_HEADER_LEN - 2
SLL_TYPE_OFFSET = SLL_HEADER_LEN - 2
SLL_ADDRESS_OFFSET = 6
SLL_ADDRESS_MAX = 8

# Minimum frame length per link type; unknown link types need one octet.
MIN_FRAME_LENGTH = {
    LINKTYPE_ETHERNET: ETHERNET_HEADER_LEN,
    LINKTYPE_LINUX_SLL: SLL_HEADER_LEN,
    LINKTYPE_RAW: 1,
    LINKTYPE_IPV4: IPV4_MIN_HEADER_LEN,
    LINKTYPE_IPV6: IPV6_HEADER_LEN,
}


class NetworkLayer(NamedTuple):
    """Where the IP header starts and which IP version it announces."""
    offset: int
    ethertype: int
    version: Optional[int]


def min_frame_length(linktype: int) -> int:
    """Return the smallest legal frame length for a link type."""
    return MIN_FRAME_LENGTH.get(linktype, 1)


def locate_network_layer(frame: bytes, linktype: int) -> Optional[NetworkLayer]:
    """
    Find the network-layer header inside a frame.

    Args:
        frame: Captured frame bytes
        linktype: pcap link type of the frame

    Returns:
        NetworkLayer, or None when the link header is truncated or the link
        type is not one we can walk
    """
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < ETHERNET_HEADER_LEN:
            return None
        offset = ETHERNET_HEADER_LEN
        (ethertype,) = struct.unpack_from("!H", frame, ETHERNET_TYPE_OFFSET)
        if ethertype == ETHERTYPE_VLAN:
            if len(frame) < ETHERNET_HEADER_LEN + VLAN_TAG_LEN:
                return None
            (ethertype,) = struct.unpack_from("!H", frame, ETHERNET_HEADER_LEN + VLAN_TAG_LEN - 2)
            offset += VLAN_TAG_LEN
    elif linktype == LINKTYPE_LINUX_SLL:
        if len(frame) < SLL_HEADER_LEN:
            return None
        offset = SLL_HEADER_LEN
        (ethertype,) = struct.unpack_from("!H", frame, SLL_TYPE_OFFSET)
    elif linktype in (LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6):
        if not frame:
            return None
        version = frame[0] >> 4
        ethertype = ETHERTYPE_IPV6 if version == 6 else ETHERTYPE_IPV4
        return NetworkLayer(0, ethertype, version)
    else:
        return None

    version = frame[offset] >> 4 if len(frame) > offset else None
    return NetworkLayer(offset, ethertype, version)


def link_address_spans(frame: bytes, linktype: int) -> List[Tuple[int, int]]:
    """
    Return (start, end) byte spans of link-layer addresses.

    Ethernet carries destination and source MAC; Linux cooked carries one
    sender address of sll_hlen octets (at most 8).
    """
    if linktype == LINKTYPE_ETHERNET:
        return [(0, 6), (6, 12)]
    if linktype == LINKTYPE_LINUX_SLL:
        if len(frame) < SLL_ADDRESS_OFFSET:
            return [(SLL_ADDRESS_OFFSET, SLL_ADDRESS_OFFSET + SLL_ADDRESS_MAX)]
        (addr_len,) = struct.unpack_from("!H", frame, SLL_ADDRESS_OFFSET - 2)
        return [(SLL_ADDRESS_OFFSET, SLL_ADDRESS_OFFSET + min(addr_len, SLL_ADDRESS_MAX))]
    return []
