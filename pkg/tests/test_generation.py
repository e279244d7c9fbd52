"""
Tests for top-k sampling, packet validation and flow generation.

Most generation tests drive the loop with scripted stand-in models whose
argmax token is fixed, so every run is exact.
"""

import json
import os
import struct
import tempfile
from typing import List, Sequence
from unittest import mock

import numpy as np
import pytest
import torch

from packet_fixtures import CLIENT, SERVER, ethernet_frame, ipv4_packet, scripted_tokens, tcp_frame, udp_frame
from trained_fixtures import overfit_model
from trafficlm.codec import CLS, FLOW_END, PKT_START, VOCAB_SIZE, encode_interval, packet_count, validate_token_grammar
from trafficlm.errors import AbortedFlow, ConfigError, EmptyFlow, InvalidPrompt, NumericDomain, TimestampOverflow
from trafficlm.generation import (
    BAD_INTERVAL,
    ILLEGAL_TOKEN,
    LENGTH_EXCEEDED,
    LINKTYPE_CHANGED,
    TOO_SHORT,
    UNDEFINED_FIELD,
    GenerationConfig,
    emit_pcap,
    flow_rng,
    generate_batch,
    generate_flow,
    sample_top_k,
    validate_packet,
)
from trafficlm.layers import LINKTYPE_ETHERNET, LINKTYPE_LINUX_SLL
from trafficlm.model import ModelConfig, build_model
from trafficlm.pcap_io import MAX_TS_SEC, read_pcap_file

GREEDY = GenerationConfig(k=1)


def peaked_logits(length: int, token: int) -> torch.Tensor:
    logits = torch.zeros(length, VOCAB_SIZE, dtype=torch.float64)
    logits[-1, token] = 50.0
    return logits


class ScriptedModel:
    """Emits the next token of a script on every call, cycling when asked to."""

    def __init__(self, script: Sequence[int], max_len: int = 4096, cycle: bool = False) -> None:
        self.script = list(script)
        self.max_len = max_len
        self.cycle = cycle
        self.calls = 0
        self.context_lengths: List[int] = []

    def __call__(self, ids: torch.Tensor) -> torch.Tensor:
        index = self.calls % len(self.script) if self.cycle else self.calls
        self.calls += 1
        self.context_lengths.append(len(ids))
        return peaked_logits(len(ids), self.script[index])


class PositionalModel:
    """Predicts target[len(context)], so concurrent callers see the same flow."""

    def __init__(self, target: Sequence[int], max_len: int = 4096) -> None:
        self.target = list(target)
        self.max_len = max_len

    def __call__(self, ids: torch.Tensor) -> torch.Tensor:
        return peaked_logits(len(ids), self.target[len(ids)])


def body_of(frame: bytes) -> List[int]:
    """Tokens after PKT_START for one packet."""
    return [LINKTYPE_ETHERNET] + encode_interval(0.0) + list(frame)


def test_top_k_greedy_and_ties() -> None:
    rng = np.random.default_rng(0)
    assert sample_top_k(np.array([0.0, 3.0, 3.0, 1.0]), 1, 1.0, rng) == 1, "Ties must go to the lower id"
    assert sample_top_k(torch.tensor([0.0, 0.5, 2.0]), 1, 0.1, rng) == 2
    print("✓ test_top_k_greedy_and_ties passed")


def test_top_k_never_leaves_the_top() -> None:
    logits = np.zeros(VOCAB_SIZE)
    logits[5], logits[7], logits[9] = 4.0, 3.9, 3.8
    rng = np.random.default_rng(1)
    drawn = {sample_top_k(logits, 2, 1.0, rng) for _ in range(200)}
    assert drawn == {5, 7}, f"Drew {drawn}"
    print("✓ test_top_k_never_leaves_the_top passed")


def test_top_k_rejects_bad_inputs() -> None:
    rng = np.random.default_rng(0)
    with pytest.raises(NumericDomain):
        sample_top_k(np.array([0.0, float("nan")]), 1, 1.0, rng)
    with pytest.raises(ConfigError):
        sample_top_k(np.zeros(4), 0, 1.0, rng)
    with pytest.raises(ConfigError):
        GenerationConfig(temperature=0.0)
    print("✓ test_top_k_rejects_bad_inputs passed")


def with_ip_field(frame: bytes, offset: int, fmt: str, value: int) -> bytes:
    buf = bytearray(frame)
    struct.pack_into(fmt, buf, 14 + offset, value)
    return bytes(buf)


def test_validate_packet_examples() -> None:
    good_udp, good_tcp = udp_frame(), tcp_frame()
    assert validate_packet(good_udp, LINKTYPE_ETHERNET) == []
    assert validate_packet(good_tcp, LINKTYPE_ETHERNET) == []
    assert validate_packet(good_udp[:10], LINKTYPE_ETHERNET) == [TOO_SHORT]
    assert validate_packet(good_udp[:14], LINKTYPE_ETHERNET) == [TOO_SHORT]
    assert validate_packet(with_ip_field(good_udp, 2, "!H", 1000), LINKTYPE_ETHERNET) == [LENGTH_EXCEEDED]
    assert validate_packet(with_ip_field(good_udp, 0, "!B", 0x55), LINKTYPE_ETHERNET) == [UNDEFINED_FIELD]
    assert validate_packet(with_ip_field(good_udp, 20 + 4, "!H", 3), LINKTYPE_ETHERNET) == [UNDEFINED_FIELD]
    assert validate_packet(with_ip_field(good_tcp, 20 + 12, "!B", 0x20), LINKTYPE_ETHERNET) == [UNDEFINED_FIELD]
    print("✓ test_validate_packet_examples passed")


def test_strict_validation() -> None:
    icmp = ethernet_frame(ipv4_packet(CLIENT[0], SERVER[0], 1, b"\x08\x00\x00\x00ping"))
    arp = ethernet_frame(bytes(28), ethertype=0x0806)
    assert validate_packet(icmp, LINKTYPE_ETHERNET) == []
    assert validate_packet(icmp, LINKTYPE_ETHERNET, strict=True) == [UNDEFINED_FIELD]
    assert validate_packet(arp, LINKTYPE_ETHERNET) == []
    assert validate_packet(arp, LINKTYPE_ETHERNET, strict=True) == [UNDEFINED_FIELD]
    print("✓ test_strict_validation passed")


def test_scripted_flow_is_reproduced() -> None:
    frame = udp_frame()
    model = ScriptedModel(body_of(frame) + [FLOW_END])
    tokens, trace = generate_flow(model, [], GREEDY)
    assert tokens == scripted_tokens([frame])
    assert trace.termination == "flow_end" and trace.restarts == 0
    assert [v.ok for v in trace.verdicts] == [True]
    print("✓ test_scripted_flow_is_reproduced passed")


def test_failed_packet_restarts_from_its_start() -> None:
    frame = udp_frame()
    bad = body_of(frame[:5])
    model = ScriptedModel(bad + [PKT_START] + body_of(frame) + [FLOW_END])
    tokens, trace = generate_flow(model, [PKT_START], GREEDY)
    assert tokens == scripted_tokens([frame]), "Rejected bytes leaked into the flow"
    assert trace.restarts == 1
    assert [(v.ok, v.violations) for v in trace.verdicts] == [(False, [TOO_SHORT]), (True, [])]
    print("✓ test_failed_packet_restarts_from_its_start passed")


def test_illegal_and_interval_violations() -> None:
    frame = udp_frame()
    nan_body = [LINKTYPE_ETHERNET, 0x7F, 0xF8, 0, 0, 0, 0, 0, 0] + list(frame)
    script = [LINKTYPE_ETHERNET, CLS] + nan_body + [FLOW_END] + body_of(frame) + [FLOW_END]
    tokens, trace = generate_flow(ScriptedModel(script), [], GREEDY)
    assert tokens == scripted_tokens([frame])
    assert [v.violations for v in trace.verdicts] == [[ILLEGAL_TOKEN], [BAD_INTERVAL], []]
    print("✓ test_illegal_and_interval_violations passed")


def test_persistent_failure_aborts() -> None:
    model = ScriptedModel(body_of(b"\x00" * 5) + [FLOW_END], cycle=True)
    config = GenerationConfig(k=1, max_restarts_per_packet=2)
    with pytest.raises(AbortedFlow) as excinfo:
        generate_flow(model, [], config)
    trace = excinfo.value.trace
    assert trace.restarts == 2, f"Expected 2 restarts, got {trace.restarts}"
    assert trace.restarts <= config.max_restarts_per_packet * trace.packets_attempted
    assert trace.termination == "aborted"
    print("✓ test_persistent_failure_aborts passed")


def test_link_type_change_is_resampled() -> None:
    frame = udp_frame()
    foreign = [7] + encode_interval(0.0) + list(b"xyz")
    model = ScriptedModel(body_of(frame) + [PKT_START] + foreign + [FLOW_END] + body_of(frame) + [FLOW_END])
    tokens, trace = generate_flow(model, [], GREEDY)
    assert tokens == scripted_tokens([frame, frame])
    assert [v.violations for v in trace.verdicts] == [[], [LINKTYPE_CHANGED], []]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "flow.pcap")
        emit_pcap(tokens, 0.0, path)
        linktype, records = read_pcap_file(path)
    assert linktype == LINKTYPE_ETHERNET and len(records) == 2
    print("✓ test_link_type_change_is_resampled passed")


def test_strict_validation_needs_a_known_link_type() -> None:
    assert validate_packet(b"xyz", 7) == []
    assert validate_packet(b"xyz", 7, strict=True) == [UNDEFINED_FIELD]
    assert validate_packet(udp_frame(linktype=LINKTYPE_LINUX_SLL), LINKTYPE_LINUX_SLL, strict=True) == []
    print("✓ test_strict_validation_needs_a_known_link_type passed")


def test_timestamps_must_fit_a_pcap_record() -> None:
    frame = udp_frame()
    huge = [LINKTYPE_ETHERNET] + encode_interval(1e300) + list(frame)
    tokens, trace = generate_flow(ScriptedModel(huge + [FLOW_END] + body_of(frame) + [FLOW_END]), [], GREEDY)
    assert tokens == scripted_tokens([frame])
    assert [v.violations for v in trace.verdicts] == [[BAD_INTERVAL], []]

    late = MAX_TS_SEC - 0.5
    one_second = [LINKTYPE_ETHERNET] + encode_interval(1.0) + list(frame)
    model = ScriptedModel(one_second + [FLOW_END] + body_of(frame) + [FLOW_END])
    tokens, trace = generate_flow(model, [], GREEDY, base_time=late)
    assert [v.violations for v in trace.verdicts] == [[BAD_INTERVAL], []]
    with tempfile.TemporaryDirectory() as tmp:
        emit_pcap(tokens, late, os.path.join(tmp, "late.pcap"))

    with pytest.raises(InvalidPrompt):
        generate_flow(ScriptedModel([FLOW_END]), [PKT_START] + huge + [PKT_START], GREEDY)
    print("✓ test_timestamps_must_fit_a_pcap_record passed")


def test_batch_survives_unwritable_flows() -> None:
    frame = udp_frame()
    overflowing = PositionalModel([PKT_START, LINKTYPE_ETHERNET] + encode_interval(1e300) + list(frame) + [FLOW_END])
    with tempfile.TemporaryDirectory() as tmp:
        rows = generate_batch(overflowing, 2, GenerationConfig(k=1, max_restarts_per_packet=2), tmp)
        assert [row["termination"] for row in rows] == ["aborted", "aborted"]
        assert all(row["restarts"] == 2 for row in rows)
        assert os.path.exists(os.path.join(tmp, "manifest.jsonl"))

    model = PositionalModel(scripted_tokens([frame]))
    failure = TimestampOverflow("record 0 timestamp does not fit 32-bit seconds")
    with tempfile.TemporaryDirectory() as tmp:
        with mock.patch("trafficlm.generation.emit_pcap", side_effect=failure):
            rows = generate_batch(model, 2, GREEDY, tmp)
        assert [row["termination"] for row in rows] == ["write_failed", "write_failed"]
        assert all(row["file"] is None and "32-bit" in row["error"] for row in rows)
        with open(os.path.join(tmp, "manifest.jsonl")) as f:
            assert len(f.readlines()) == 2

        with pytest.raises(ConfigError):
            generate_batch(model, 1, GREEDY, tmp, base_time=-1.0)
    print("✓ test_batch_survives_unwritable_flows passed")


def test_packet_cap_ends_the_flow() -> None:
    frame = udp_frame()
    model = ScriptedModel(body_of(frame) + [PKT_START] + body_of(frame), cycle=True)
    tokens, trace = generate_flow(model, [], GenerationConfig(k=1, max_packets=1))
    assert tokens == scripted_tokens([frame])
    assert trace.termination == "cap_reached"
    print("✓ test_packet_cap_ends_the_flow passed")


def test_token_cap_drops_the_open_packet() -> None:
    frame = udp_frame()
    prompt = scripted_tokens([frame])[:-1] + [PKT_START]
    config = GenerationConfig(k=1, max_tokens_total=len(prompt) + 3)
    tokens, trace = generate_flow(ScriptedModel([1], cycle=True), prompt, config)
    assert tokens == scripted_tokens([frame])
    assert trace.termination == "cap_reached"

    with pytest.raises(AbortedFlow):
        generate_flow(ScriptedModel([1], cycle=True), [], GenerationConfig(k=1, max_tokens_total=20))
    print("✓ test_token_cap_drops_the_open_packet passed")


def test_context_is_bounded_by_max_len() -> None:
    frame = udp_frame()
    model = ScriptedModel(body_of(frame) + [FLOW_END], max_len=8)
    generate_flow(model, [], GREEDY)
    assert max(model.context_lengths) == 7, f"Longest context was {max(model.context_lengths)}"
    print("✓ test_context_is_bounded_by_max_len passed")


def test_invalid_prompts() -> None:
    model = ScriptedModel([FLOW_END])
    for prompt in ([1, 2, 3], [PKT_START, 1, PKT_START], [PKT_START, CLS]):
        with pytest.raises(InvalidPrompt):
            generate_flow(model, prompt, GREEDY)
    print("✓ test_invalid_prompts passed")


def test_emit_pcap_writes_the_flow() -> None:
    frames = [udp_frame(), udp_frame(SERVER, CLIENT, b"reply")]
    tokens = scripted_tokens(frames, intervals=[0.0, 0.5])
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "one.pcap")
        flow = emit_pcap(tokens, 100.0, path)
        linktype, records = read_pcap_file(path)
        assert linktype == LINKTYPE_ETHERNET
        assert [r.frame for r in records] == frames
        assert [r.timestamp_us for r in records] == [100_000_000, 100_500_000]
        assert len(flow) == 2
        with pytest.raises(EmptyFlow):
            emit_pcap([], 0.0, path)
    print("✓ test_emit_pcap_writes_the_flow passed")


def test_batch_is_independent_of_workers() -> None:
    frame = udp_frame()
    model = PositionalModel(scripted_tokens([frame]))
    with tempfile.TemporaryDirectory() as tmp:
        serial = generate_batch(model, 3, GREEDY, os.path.join(tmp, "a"))
        threaded = generate_batch(model, 3, GREEDY, os.path.join(tmp, "b"), workers=3)
        assert serial == threaded
        assert [row["file"] for row in serial] == ["flow-00000.pcap", "flow-00001.pcap", "flow-00002.pcap"]
        with open(os.path.join(tmp, "a", "manifest.jsonl")) as f:
            rows = [json.loads(line) for line in f]
        assert rows == serial and all(row["termination"] == "flow_end" for row in rows)
        _, records = read_pcap_file(os.path.join(tmp, "b", "flow-00002.pcap"))
        assert [r.frame for r in records] == [frame]
    print("✓ test_batch_is_independent_of_workers passed")


def test_flow_streams_are_seeded_per_index() -> None:
    assert flow_rng(7, 1).integers(1 << 30) == flow_rng(7, 1).integers(1 << 30)
    assert flow_rng(7, 1).integers(1 << 30, size=4).tolist() != flow_rng(7, 2).integers(1 << 30, size=4).tolist()
    print("✓ test_flow_streams_are_seeded_per_index passed")


def test_untrained_model_generation_is_reproducible() -> None:
    config = ModelConfig(model_dim=8, embed_dim=8, num_heads=2, head_dim=4, local_heads=1, local_window=4,
                         depth=1, ffn_dim=16, max_len=32)
    model = build_model(config, seed=0)
    settings = GenerationConfig(k=16, max_tokens_total=60, max_restarts_per_packet=3, seed=5)

    def outcome():
        try:
            tokens, trace = generate_flow(model, [], settings)
            return tokens, trace.restarts
        except AbortedFlow as e:
            return list(e.trace.tokens), e.trace.restarts

    assert outcome() == outcome(), "Same seed gave different generations"
    print("✓ test_untrained_model_generation_is_reproducible passed")


@pytest.mark.slow
def test_overfit_model_generates_parseable_flows() -> None:
    model, _, _ = overfit_model()
    config = GenerationConfig(k=2, max_packets=4, seed=3)
    restarts = 0
    with tempfile.TemporaryDirectory() as tmp:
        for index in range(100):
            tokens, trace = generate_flow(model, [], config, flow_rng(config.seed, index))
            restarts += trace.restarts
            assert validate_token_grammar(tokens) is None, f"flow {index} breaks the token grammar"
            path = os.path.join(tmp, f"flow-{index:05d}.pcap")
            flow = emit_pcap(tokens, 0.0, path)
            linktype, records = read_pcap_file(path)
            assert linktype == LINKTYPE_ETHERNET
            assert [r.frame for r in records] == [p.frame for p in flow.packets]
            assert len(records) == packet_count(tokens)
    print(f"✓ test_overfit_model_generates_parseable_flows passed ({restarts} restarts)")


def run_all_tests() -> None:
    """Run all tests."""
    print("=" * 50)
    print("Running generation tests")
    print("=" * 50)
    print()

    test_top_k_greedy_and_ties()
    test_top_k_never_leaves_the_top()
    test_top_k_rejects_bad_inputs()
    test_validate_packet_examples()
    test_strict_validation()
    test_scripted_flow_is_reproduced()
    test_failed_packet_restarts_from_its_start()
    test_illegal_and_interval_violations()
    test_persistent_failure_aborts()
    test_link_type_change_is_resampled()
    test_strict_validation_needs_a_known_link_type()
    test_timestamps_must_fit_a_pcap_record()
    test_batch_survives_unwritable_flows()
    test_packet_cap_ends_the_flow()
    test_token_cap_drops_the_open_packet()
    test_context_is_bounded_by_max_len()
    test_invalid_prompts()
    test_emit_pcap_writes_the_flow()
    test_batch_is_independent_of_workers()
    test_flow_streams_are_seeded_per_index()
    test_untrained_model_generation_is_reproducible()
    test_overfit_model_generates_parseable_flows()

    print()
    print("=" * 50)
    print("All tests passed!")
    print("=" * 50)


if __name__ == "__main__":
    run_all_tests()
