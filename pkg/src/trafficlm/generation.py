"""
Autoregressive flow generation with top-k sampling, per-packet validation
and restart from the failed packet's PKT_START.
"""

import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .codec import (
    BYTE_TOKENS,
    FLOW_END,
    INTERVAL_TOKENS,
    MIN_PACKET_BODY,
    PKT_START,
    VOCAB_SIZE,
    TokenSequence,
    decode_interval,
    detokenize_flow,
    packet_count,
    timestamp_us,
)
from .errors import AbortedFlow, ConfigError, DataError, EmptyFlow, InvalidPrompt, NumericDomain
from .layers import (
    ETHERTYPE_IPV4,
    ETHERTYPE_IPV6,
    IP_PROTO_TCP,
    IP_PROTO_UDP,
    IPV6_HEADER_LEN,
    LINKTYPE_ETHERNET,
    LINKTYPE_IPV4,
    LINKTYPE_IPV6,
    LINKTYPE_LINUX_SLL,
    LINKTYPE_RAW,
    TCP_MIN_HEADER_LEN,
    UDP_HEADER_LEN,
    locate_network_layer,
    min_frame_length,
)
from .pcap_io import MAX_TS_SEC, USEC_PER_SEC, Flow, write_pcap_file

logger = logging.getLogger(__name__)

TOO_SHORT = "frame too short"
UNDEFINED_FIELD = "undefined header field"
LENGTH_EXCEEDED = "length exceeds limit"
BAD_INTERVAL = "invalid interval"
ILLEGAL_TOKEN = "illegal token in body"
LINKTYPE_CHANGED = "link type differs from the flow"

WALKABLE_LINKTYPES = (LINKTYPE_ETHERNET, LINKTYPE_LINUX_SLL, LINKTYPE_RAW, LINKTYPE_IPV4, LINKTYPE_IPV6)

FLOW_END_REASON = "flow_end"
CAP_REASON = "cap_reached"
ABORT_REASON = "aborted"
WRITE_FAILED_REASON = "write_failed"

BATCH_MANIFEST_NAME = "manifest.jsonl"


@dataclass
class GenerationConfig:
    k: int = 16
    temperature: float = 1.0
    max_packets: int = 64
    max_tokens_total: int = 65536
    max_restarts_per_packet: int = 32
    seed: int = 0
    strict: bool = False

    def __post_init__(self) -> None:
        if not 1 <= self.k <= VOCAB_SIZE:
            raise ConfigError(f"k must be within [1, {VOCAB_SIZE}], got {self.k}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        for name in ("max_packets", "max_tokens_total", "max_restarts_per_packet"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class PacketVerdict:
    start: int
    ok: bool
    violations: List[str] = field(default_factory=list)


@dataclass
class GenerationTrace:
    tokens: TokenSequence = field(default_factory=list)
    verdicts: List[PacketVerdict] = field(default_factory=list)
    restarts: int = 0
    packets_attempted: int = 0
    termination: Optional[str] = None


def sample_top_k(logits: Union[np.ndarray, torch.Tensor], k: int, temperature: float,
                 rng: np.random.Generator) -> int:
    """
    Sample a token id from the k largest logits.

    Tokens outside the top k have probability exactly 0. Ties at the k-th
    logit go to the lower token id.
    """
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise NumericDomain("logits contain non-finite entries", operation="generator.sample_top_k")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}", operation="generator.sample_top_k")
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}", operation="generator.sample_top_k")

    ids = np.arange(len(logits))
    # primary key: descending logit; secondary: ascending id
    top = np.lexsort((ids, -logits))[:k]
    if len(top) == 1:
        return int(top[0])
    scaled = logits[top] / temperature
    weights = np.exp(scaled - scaled.max())
    return int(rng.choice(top, p=weights / weights.sum()))


def _validate_ipv4(frame: bytes, off: int, strict: bool) -> List[str]:
    violations = []
    first = frame[off]
    if first >> 4 != 4:
        violations.append(UNDEFINED_FIELD)
    ihl = first & 0x0F
    if not 5 <= ihl <= 15:
        violations.append(UNDEFINED_FIELD)
        return violations
    header_len = ihl * 4
    captured = len(frame) - off
    if captured < header_len:
        violations.append(LENGTH_EXCEEDED)
        return violations
    (total_length,) = struct.unpack_from("!H", frame, off + 2)
    if total_length > captured:
        violations.append(LENGTH_EXCEEDED)
    elif total_length < header_len:
        violations.append(UNDEFINED_FIELD)
    protocol = frame[off + 9]
    if strict and protocol not in (IP_PROTO_TCP, IP_PROTO_UDP):
        violations.append(UNDEFINED_FIELD)

    transport = off + header_len
    available = min(total_length, captured) - header_len
    if protocol == IP_PROTO_TCP:
        if available < TCP_MIN_HEADER_LEN:
            violations.append(LENGTH_EXCEEDED)
        elif not 5 <= frame[transport + 12] >> 4 <= 15:
            violations.append(UNDEFINED_FIELD)
    elif protocol == IP_PROTO_UDP:
        if available < UDP_HEADER_LEN:
            violations.append(LENGTH_EXCEEDED)
        else:
            (udp_length,) = struct.unpack_from("!H", frame, transport + 4)
            if udp_length < UDP_HEADER_LEN:
                violations.append(UNDEFINED_FIELD)
            elif udp_length > available:
                violations.append(LENGTH_EXCEEDED)
    return violations


def _validate_ipv6(frame: bytes, off: int) -> List[str]:
    if frame[off] >> 4 != 6:
        return [UNDEFINED_FIELD]
    if len(frame) - off < IPV6_HEADER_LEN:
        return [LENGTH_EXCEEDED]
    (payload_length,) = struct.unpack_from("!H", frame, off + 4)
    if IPV6_HEADER_LEN + payload_length > len(frame) - off:
        return [LENGTH_EXCEEDED]
    return []


def validate_packet(frame: bytes, linktype: int, strict: bool = False) -> List[str]:
    """
    Check a generated frame against protocol limits.

    Args:
        frame: Frame bytes
        linktype: pcap link type the frame claims
        strict: Also require a known link type, a known ethertype and TCP/UDP payload

    Returns:
        Violations in check order, without duplicates; empty when the frame is ok
    """
    if strict and linktype not in WALKABLE_LINKTYPES:
        return [UNDEFINED_FIELD]
    if len(frame) < min_frame_length(linktype):
        return [TOO_SHORT]
    network = locate_network_layer(frame, linktype)
    if network is None:
        return [TOO_SHORT] if linktype in (LINKTYPE_ETHERNET, LINKTYPE_LINUX_SLL) else []
    if network.offset >= len(frame):
        return [TOO_SHORT] if network.ethertype in (ETHERTYPE_IPV4, ETHERTYPE_IPV6) else []

    if network.ethertype == ETHERTYPE_IPV4:
        violations = _validate_ipv4(frame, network.offset, strict)
    elif network.ethertype == ETHERTYPE_IPV6:
        violations = _validate_ipv6(frame, network.offset)
    else:
        violations = [UNDEFINED_FIELD] if strict else []
    return list(dict.fromkeys(violations))


def _fits_pcap(elapsed: Fraction) -> bool:
    return 0 <= timestamp_us(elapsed) < (MAX_TS_SEC + 1) * USEC_PER_SEC


def _check_packet(body: Sequence[int], strict: bool, flow_linktype: Optional[int],
                  elapsed: Fraction) -> List[str]:
    # body: linktype, interval, frame (everything after PKT_START)
    if len(body) < MIN_PACKET_BODY:
        return [TOO_SHORT]
    if flow_linktype is not None and body[0] != flow_linktype:
        return [LINKTYPE_CHANGED]
    interval = decode_interval(body[1:1 + INTERVAL_TOKENS])
    if not math.isfinite(interval) or interval < 0 or not _fits_pcap(elapsed + Fraction(interval)):
        return [BAD_INTERVAL]
    return validate_packet(bytes(body[1 + INTERVAL_TOKENS:]), body[0], strict)


def _prompt_elapsed(prompt: Sequence[int], base_time: Fraction) -> Fraction:
    """Time of the last complete prompt packet, checked like a generated one."""
    elapsed = base_time
    starts = [i for i, t in enumerate(prompt) if t == PKT_START]
    for start, end in zip(starts, starts[1:]):
        body = prompt[start + 1:end]
        if body[0] != prompt[1]:
            raise InvalidPrompt(f"prompt packet at token {start} changes the link type")
        interval = decode_interval(body[1:1 + INTERVAL_TOKENS])
        if not math.isfinite(interval) or interval < 0 or not _fits_pcap(elapsed + Fraction(interval)):
            raise InvalidPrompt(f"prompt packet at token {start} has interval {interval!r}")
        elapsed += Fraction(interval)
    return elapsed


def _check_prompt(prompt: Sequence[int]) -> None:
    if not prompt:
        return
    if prompt[0] != PKT_START:
        raise InvalidPrompt(f"prompt must start with PKT_START, got token {prompt[0]}")
    start = 0
    for i, token in enumerate(prompt[1:], start=1):
        if token == PKT_START:
            if i - start - 1 < MIN_PACKET_BODY:
                raise InvalidPrompt(f"prompt packet at token {start} is truncated")
            start = i
        elif not 0 <= token < BYTE_TOKENS:
            raise InvalidPrompt(f"prompt token {i} ({token}) is not allowed inside a flow prefix")


def _next_logits(model: Any, context: Sequence[int]) -> np.ndarray:
    with torch.no_grad():
        logits = model(torch.tensor(list(context), dtype=torch.long))
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    return np.asarray(logits)[-1]


def generate_flow(model: Any, prompt: Sequence[int], config: GenerationConfig,
                  rng: Optional[np.random.Generator] = None, base_time: float = 0.0) -> Tuple[TokenSequence, GenerationTrace]:
    """
    Generate one flow token by token.

    The model sees at most its last max_len - 1 tokens. Each completed packet
    is validated; a failed packet is discarded back to its PKT_START and
    resampled. A packet is also rejected when it changes the flow's link
    type or when its timestamp, counted from base_time, would not fit a pcap
    record.

    Args:
        model: Callable mapping a 1-D id tensor to per-position logits, with a max_len attribute
        prompt: Empty, PKT_START, or a grammar-valid flow prefix
        config: Sampling settings and caps
        rng: Random stream; a fresh one from config.seed when None
        base_time: Absolute time of the first packet, in seconds

    Returns:
        (tokens ending in FLOW_END, trace)
    """
    _check_prompt(prompt)
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if hasattr(model, "eval"):
        model.eval()

    context_len = model.max_len - 1
    tokens: TokenSequence = list(prompt) or [PKT_START]
    packet_start = max(i for i, t in enumerate(tokens) if t == PKT_START)
    trace = GenerationTrace(tokens=tokens, packets_attempted=1)
    completed = packet_count(tokens) - 1
    packet_restarts = 0
    elapsed = _prompt_elapsed(tokens, Fraction(base_time))

    def finish(reason: str) -> Tuple[TokenSequence, GenerationTrace]:
        del tokens[packet_start:]
        if not tokens:
            trace.termination = ABORT_REASON
            raise AbortedFlow(f"{reason} before any packet completed", trace=trace)
        tokens.append(FLOW_END)
        trace.termination = reason
        return tokens, trace

    while True:
        if len(tokens) >= config.max_tokens_total:
            return finish(CAP_REASON)

        token = sample_top_k(_next_logits(model, tokens[-context_len:]), config.k, config.temperature, rng)
        if 0 <= token < BYTE_TOKENS:
            tokens.append(token)
            continue

        if token in (PKT_START, FLOW_END):
            flow_linktype = tokens[1] if packet_start > 0 else None
            violations = _check_packet(tokens[packet_start + 1:], config.strict, flow_linktype, elapsed)
        else:
            violations = [ILLEGAL_TOKEN]
        trace.verdicts.append(PacketVerdict(packet_start, not violations, violations))

        if violations:
            del tokens[packet_start + 1:]
            logger.debug("packet at token %d rejected: %s", packet_start, violations)
            if packet_restarts >= config.max_restarts_per_packet:
                trace.termination = ABORT_REASON
                raise AbortedFlow(f"packet at token {packet_start} failed validation "
                                  f"{packet_restarts + 1} times", trace=trace)
            trace.restarts += 1
            packet_restarts += 1
            continue

        completed += 1
        packet_restarts = 0
        elapsed += Fraction(decode_interval(tokens[packet_start + 2:packet_start + 2 + INTERVAL_TOKENS]))
        if token == FLOW_END:
            tokens.append(FLOW_END)
            trace.termination = FLOW_END_REASON
            return tokens, trace
        if completed >= config.max_packets:
            tokens.append(FLOW_END)
            trace.termination = CAP_REASON
            return tokens, trace
        tokens.append(PKT_START)
        packet_start = len(tokens) - 1
        trace.packets_attempted += 1


def emit_pcap(tokens: Sequence[int], base_time: float, path: str) -> Flow:
    """Detokenize a generated sequence and write it as a pcap file."""
    if not tokens:
        raise EmptyFlow("cannot write an empty token sequence", operation="generator.emit_pcap")
    flow = detokenize_flow(tokens, base_time)
    write_pcap_file(path, flow.linktype, flow.packets)
    return flow


def flow_rng(seed: int, index: int) -> np.random.Generator:
    """Independent random stream for flow `index` of a batch."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def generate_batch(model: Any, n: int, config: GenerationConfig, out_dir: str,
                   prompt: Sequence[int] = (), base_time: float = 0.0, workers: int = 1) -> List[Dict[str, Any]]:
    """
    Generate n flows into out_dir as pcap files plus a JSON-lines manifest.

    Flow i draws from flow_rng(config.seed, i), so results do not depend on
    the worker count. Aborted flows, and flows that cannot be written, get a
    manifest row but no file.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}", operation="generator.generate_batch")
    if not _fits_pcap(Fraction(base_time)):
        raise ConfigError(f"base_time {base_time} is outside the pcap timestamp range",
                          operation="generator.generate_batch")
    os.makedirs(out_dir, exist_ok=True)

    def one(index: int) -> Dict[str, Any]:
        name = f"flow-{index:05d}.pcap"
        try:
            tokens, trace = generate_flow(model, prompt, config, flow_rng(config.seed, index), base_time)
        except AbortedFlow as e:
            return {"index": index, "file": None, "tokens": len(e.trace.tokens), "packets": 0,
                    "restarts": e.trace.restarts, "termination": ABORT_REASON}
        try:
            emit_pcap(tokens, base_time, os.path.join(out_dir, name))
        except DataError as e:
            logger.warning("flow %d not written: %s", index, e.describe())
            return {"index": index, "file": None, "tokens": len(tokens), "packets": packet_count(tokens),
                    "restarts": trace.restarts, "termination": WRITE_FAILED_REASON, "error": str(e)}
        return {"index": index, "file": name, "tokens": len(tokens), "packets": packet_count(tokens),
                "restarts": trace.restarts, "termination": trace.termination}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(n)))
    else:
        rows = [one(i) for i in range(n)]

    with open(os.path.join(out_dir, BATCH_MANIFEST_NAME), "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    written = sum(1 for row in rows if row["file"])
    logger.info("generated %d flows into %s (%d not written)", written, out_dir, n - written)
    return rows
