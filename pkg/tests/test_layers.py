"""
Tests for header offsets inside raw frames.
"""

import struct

import dpkt

from packet_fixtures import ethernet_frame, ipv4_packet, sll_frame, udp_segment
from trafficlm.layers import (
    ETHERTYPE_IPV4,
    ETHERTYPE_IPV6,
    ETHERTYPE_VLAN,
    IP_PROTO_UDP,
    LINKTYPE_ETHERNET,
    LINKTYPE_IPV6,
    LINKTYPE_LINUX_SLL,
    LINKTYPE_RAW,
    NetworkLayer,
    link_address_spans,
    locate_network_layer,
    min_frame_length,
)
from trafficlm.pcap_io import PacketRecord, decode_ip

IP = ipv4_packet("10.0.0.1", "10.0.0.2", 17, udp_segment(1, 2, b"x"))


def test_network_layer_offsets() -> None:
    assert locate_network_layer(ethernet_frame(IP), LINKTYPE_ETHERNET) == NetworkLayer(14, ETHERTYPE_IPV4, 4)
    assert locate_network_layer(sll_frame(IP), LINKTYPE_LINUX_SLL) == NetworkLayer(16, ETHERTYPE_IPV4, 4)
    assert locate_network_layer(IP, LINKTYPE_RAW) == NetworkLayer(0, ETHERTYPE_IPV4, 4)
    assert locate_network_layer(b"\x60" + bytes(39), LINKTYPE_IPV6) == NetworkLayer(0, ETHERTYPE_IPV6, 6)
    print("✓ test_network_layer_offsets passed")


def test_vlan_tag_is_skipped() -> None:
    tagged = ethernet_frame(struct.pack("!HH", 7, ETHERTYPE_IPV4) + IP, ethertype=0x8100)
    layer = locate_network_layer(tagged, LINKTYPE_ETHERNET)
    assert layer == NetworkLayer(18, ETHERTYPE_IPV4, 4), f"Got {layer}"
    print("✓ test_vlan_tag_is_skipped passed")


def test_truncated_and_unknown_frames() -> None:
    assert locate_network_layer(bytes(10), LINKTYPE_ETHERNET) is None
    assert locate_network_layer(b"", LINKTYPE_RAW) is None
    assert locate_network_layer(IP, 147) is None
    header_only = ethernet_frame(b"")
    assert locate_network_layer(header_only, LINKTYPE_ETHERNET).version is None
    assert min_frame_length(LINKTYPE_ETHERNET) == 14
    assert min_frame_length(147) == 1
    print("✓ test_truncated_and_unknown_frames passed")


def test_offsets_agree_with_dpkt_decoding() -> None:
    tagged = ethernet_frame(struct.pack("!HH", 7, ETHERTYPE_IPV4) + IP, ethertype=ETHERTYPE_VLAN)
    cases = [(ethernet_frame(IP), LINKTYPE_ETHERNET), (tagged, LINKTYPE_ETHERNET),
             (sll_frame(IP), LINKTYPE_LINUX_SLL), (IP, LINKTYPE_RAW)]
    for frame, linktype in cases:
        ip = decode_ip(PacketRecord(0, linktype, frame))
        assert isinstance(ip, dpkt.ip.IP), f"dpkt could not decode linktype {linktype}: {ip}"
        off = locate_network_layer(frame, linktype).offset
        assert frame[off + 12:off + 16] == ip.src and frame[off + 16:off + 20] == ip.dst
        assert frame[off + 9] == ip.p == IP_PROTO_UDP
    print("✓ test_offsets_agree_with_dpkt_decoding passed")


def test_link_address_spans() -> None:
    assert link_address_spans(ethernet_frame(IP), LINKTYPE_ETHERNET) == [(0, 6), (6, 12)]
    assert link_address_spans(sll_frame(IP), LINKTYPE_LINUX_SLL) == [(6, 12)]
    assert link_address_spans(IP, LINKTYPE_RAW) == []
    print("✓ test_link_address_spans passed")


def run_all_tests() -> None:
    """Run all tests."""
    print("=" * 50)
    print("Running layer tests")
    print("=" * 50)
    print()

    test_network_layer_offsets()
    test_vlan_tag_is_skipped()
    test_offsets_agree_with_dpkt_decoding()
    test_truncated_and_unknown_frames()
    test_link_address_spans()

    print()
    print("=" * 50)
    print("All tests passed!")
    print("=" * 50)


if __name__ == "__main__":
    run_all_tests()
