"""
Reversible mapping between flows and token sequences.

Layout per packet: PKT_START, link type as a byte token, the inter-arrival
time as 8 big-endian binary64 byte tokens, then one token per frame octet.
A flow ends with FLOW_END. Also holds the on-disk shard and manifest formats.
"""

import json
import logging
import math
import os
import struct
from collections.abc import Sequence as SequenceABC
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from .errors import (
    ConfigError,
    CorruptShard,
    EmptyFlow,
    IllegalTokenInBody,
    InvalidInterval,
    LinktypeNotEncodable,
    TruncatedPacket,
    UnterminatedFlow,
)
from .pcap_io import USEC_PER_SEC, Flow, PacketRecord, rebuild_flow

logger = logging.getLogger(__name__)

# Vocabulary: ids 0-255 are byte values, then four specials.
BYTE_TOKENS = 256
PKT_START = 256
FLOW_END = 257
CLS = 258
PAD = 259
VOCAB_SIZE = 260

SPECIAL_NAMES = {PKT_START: "PKT_START", FLOW_END: "FLOW_END", CLS: "CLS", PAD: "PAD"}

INTERVAL_TOKENS = 8
# PKT_START + linktype + interval
PACKET_OVERHEAD = 2 + INTERVAL_TOKENS
MIN_PACKET_BODY = 1 + INTERVAL_TOKENS + 1

SHARD_MAGIC = b"TGTK"
SHARD_VERSION = 1
SHARD_HEADER = struct.Struct("<4sHHII")
SHARD_SUFFIX = ".tgtk"
MANIFEST_NAME = "manifest.json"

TokenSequence = List[int]
T = TypeVar("T")


def token_name(token: int) -> str:
    """Human-readable name of a vocabulary id."""
    if 0 <= token < BYTE_TOKENS:
        return f"BYTE({token:02X})"
    return SPECIAL_NAMES.get(token, f"UNKNOWN({token})")


@dataclass
class CodecConfig:
    flows_per_shard: int = 1000

    def __post_init__(self) -> None:
        if self.flows_per_shard < 1:
            raise ConfigError(f"flows_per_shard must be >= 1, got {self.flows_per_shard}")


def encode_interval(delta: float) -> TokenSequence:
    """
    Encode an inter-arrival time as 8 byte tokens.

    Args:
        delta: Seconds since the previous packet, finite and >= 0

    Returns:
        The big-endian octets of the binary64 value
    """
    if not math.isfinite(delta) or delta < 0:
        raise InvalidInterval(f"interval must be finite and >= 0, got {delta!r}")
    # collapse -0.0 so the sign bit never reaches the stream
    return list(struct.pack(">d", float(delta) + 0.0))


def decode_interval(tokens: Sequence[int]) -> float:
    """Inverse of encode_interval."""
    if len(tokens) != INTERVAL_TOKENS or any(not 0 <= t < BYTE_TOKENS for t in tokens):
        raise InvalidInterval(f"interval needs {INTERVAL_TOKENS} byte tokens, got {list(tokens)}",
                              operation="flow-codec.decode_interval")
    (value,) = struct.unpack(">d", bytes(tokens))
    return value


def tokenize_flow(flow: Flow) -> TokenSequence:
    """
    Tokenize a flow.

    Args:
        flow: Flow with non-decreasing timestamps and link types <= 255

    Returns:
        Token ids ending in FLOW_END
    """
    if not flow.packets:
        raise EmptyFlow("cannot tokenize a flow without packets")

    tokens: TokenSequence = []
    previous_us = flow.packets[0].timestamp_us
    for index, packet in enumerate(flow.packets):
        if not 0 <= packet.linktype < BYTE_TOKENS:
            raise LinktypeNotEncodable(f"packet {index} has linktype {packet.linktype}, only 0-255 fit a byte token")
        delta_us = packet.timestamp_us - previous_us
        if delta_us < 0:
            raise InvalidInterval(f"packet {index} is {-delta_us} us earlier than its predecessor",
                                  operation="flow-codec.tokenize_flow")
        tokens.append(PKT_START)
        tokens.append(packet.linktype)
        tokens.extend(encode_interval(delta_us / USEC_PER_SEC))
        tokens.extend(packet.frame)
        previous_us = packet.timestamp_us
    tokens.append(FLOW_END)
    return tokens


class GrammarViolation(NamedTuple):
    position: int
    rule: str


def validate_token_grammar(tokens: Sequence[int]) -> Optional[GrammarViolation]:
    """
    Check a sequence against the flow grammar.

    Returns:
        None when well-formed, else the first violation
    """
    n = len(tokens)
    if n == 0 or tokens[0] != PKT_START:
        if n > 0 and tokens[0] == FLOW_END:
            return GrammarViolation(0, "empty flow")
        return GrammarViolation(0, "expected PKT_START")

    i = 0
    while i < n:
        token = tokens[i]
        if token == FLOW_END:
            if i != n - 1:
                return GrammarViolation(i + 1, "trailing tokens after FLOW_END")
            return None
        if token != PKT_START:
            return GrammarViolation(i, "expected PKT_START")
        start = i
        i += 1
        while i < n and 0 <= tokens[i] < BYTE_TOKENS:
            i += 1
        if i < n and tokens[i] not in (PKT_START, FLOW_END):
            if tokens[i] in (CLS, PAD):
                return GrammarViolation(i, "illegal token in body")
            return GrammarViolation(i, "unknown token")
        if i - start - 1 < MIN_PACKET_BODY:
            return GrammarViolation(start, "truncated packet")
    return GrammarViolation(n, "missing FLOW_END")


def timestamp_us(seconds: Fraction) -> int:
    """Seconds to whole microseconds, rounding halves away from zero."""
    scaled = seconds * USEC_PER_SEC
    magnitude = math.floor(abs(scaled) + Fraction(1, 2))
    return magnitude if scaled >= 0 else -magnitude


def detokenize_flow(tokens: Sequence[int], base_time: Union[float, Fraction] = 0.0,
                    linktype_override: Optional[int] = None) -> Flow:
    """
    Rebuild a flow from a well-formed token sequence.

    Args:
        tokens: Sequence accepted by validate_token_grammar
        base_time: Absolute time of the first packet, in seconds
        linktype_override: Link type to stamp on every packet instead of the encoded one

    Returns:
        Flow whose packet timestamps are base_time plus the running interval sum,
        rounded to the nearest microsecond
    """
    violation = validate_token_grammar(tokens)
    if violation is not None:
        message = f"token {violation.position}: {violation.rule}"
        if violation.rule == "missing FLOW_END":
            raise UnterminatedFlow(message)
        if violation.rule == "truncated packet":
            raise TruncatedPacket(message)
        if violation.rule == "empty flow":
            raise EmptyFlow(message, operation="flow-codec.detokenize_flow")
        raise IllegalTokenInBody(message)

    elapsed = Fraction(base_time)
    packets: List[PacketRecord] = []
    starts = [i for i, t in enumerate(tokens) if t == PKT_START] + [len(tokens) - 1]
    for start, end in zip(starts, starts[1:]):
        linktype = tokens[start + 1] if linktype_override is None else linktype_override
        interval = decode_interval(tokens[start + 2:start + 2 + INTERVAL_TOKENS])
        if not math.isfinite(interval) or interval < 0:
            raise InvalidInterval(f"packet at token {start} decodes to interval {interval!r}",
                                  operation="flow-codec.detokenize_flow")
        elapsed += Fraction(interval)
        stamp = timestamp_us(elapsed)
        frame = bytes(tokens[start + PACKET_OVERHEAD:end])
        packets.append(PacketRecord(stamp, linktype, frame))
    return rebuild_flow(packets)


def packet_count(tokens: Sequence[int]) -> int:
    return sum(1 for t in tokens if t == PKT_START)


# Token shards


@dataclass
class ShardEntry:
    """One shard as recorded in the corpus manifest; sources and base times are per flow."""
    path: str
    flows: int
    tokens: int
    sources: List[str] = field(default_factory=list)
    base_times_us: List[int] = field(default_factory=list)


def write_shard(path: str, sequences: Iterable[Sequence[int]]) -> Tuple[int, int]:
    """
    Write token sequences to a shard file.

    Args:
        path: Destination file
        sequences: Flow token sequences, each ending in FLOW_END

    Returns:
        (flow count, token count)
    """
    flows = 0
    tokens = 0
    with open(path, "wb") as f:
        f.write(SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, VOCAB_SIZE, 0, 0))
        for sequence in sequences:
            ids = np.asarray(sequence, dtype="<u2")
            ids.tofile(f)
            flows += 1
            tokens += len(ids)
        f.seek(0)
        f.write(SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, VOCAB_SIZE, flows, 0))
    return flows, tokens


def read_shard(path: str) -> np.ndarray:
    """
    Memory-map the token ids of a shard.

    Returns:
        Read-only uint16 array of every token in the shard
    """
    with open(path, "rb") as f:
        header = f.read(SHARD_HEADER.size)
    if len(header) < SHARD_HEADER.size:
        raise CorruptShard(f"{path}: header is {len(header)} bytes")
    magic, version, vocab_size, _flows, _reserved = SHARD_HEADER.unpack(header)
    if magic != SHARD_MAGIC or version != SHARD_VERSION or vocab_size != VOCAB_SIZE:
        raise CorruptShard(f"{path}: not a version-{SHARD_VERSION} token shard (magic {magic!r}, vocab {vocab_size})")
    size = os.path.getsize(path) - SHARD_HEADER.size
    if size % 2:
        raise CorruptShard(f"{path}: odd payload length {size}")
    if size == 0:
        return np.zeros(0, dtype="<u2")
    return np.memmap(path, dtype="<u2", mode="r", offset=SHARD_HEADER.size)


def iter_shard_flows(path: str) -> Iterator[TokenSequence]:
    """Yield one flow's token list at a time from a shard."""
    ids = read_shard(path)
    start = 0
    for end in np.flatnonzero(ids == FLOW_END):
        yield ids[start:end + 1].tolist()
        start = end + 1
    if start < len(ids):
        raise CorruptShard(f"{path}: {len(ids) - start} tokens after the last FLOW_END")


def write_manifest(directory: str, entries: Sequence[ShardEntry]) -> str:
    """Write the corpus manifest next to its shards and return its path."""
    path = os.path.join(directory, MANIFEST_NAME)
    document = {
        "format": SHARD_MAGIC.decode(),
        "version": SHARD_VERSION,
        "vocab_size": VOCAB_SIZE,
        "shards": [asdict(entry) for entry in entries],
    }
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
    return path


def read_manifest(directory: str) -> List[ShardEntry]:
    """Load the shard list of a corpus directory."""
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path) as f:
            document = json.load(f)
    except (OSError, ValueError) as exc:
        raise CorruptShard(f"{path}: {exc}", operation="flow-codec.read_manifest")
    if document.get("vocab_size") != VOCAB_SIZE:
        raise CorruptShard(f"{path}: vocab_size {document.get('vocab_size')} != {VOCAB_SIZE}",
                           operation="flow-codec.read_manifest")
    return [ShardEntry(**entry) for entry in document.get("shards", [])]


def iter_corpus(directory: str) -> Iterator[TokenSequence]:
    """Stream every flow of a corpus directory in manifest order."""
    for entry in read_manifest(directory):
        yield from iter_shard_flows(os.path.join(directory, entry.path))


class ShardWriter:
    """
    Write a corpus directory incrementally, one shard per flows_per_shard flows.

    Only the flows of the shard being filled are held in memory; close()
    flushes the remainder and writes the manifest.
    """

    def __init__(self, directory: str, flows_per_shard: int) -> None:
        if flows_per_shard < 1:
            raise ConfigError(f"flows_per_shard must be >= 1, got {flows_per_shard}")
        os.makedirs(directory, exist_ok=True)
        self.directory = directory
        self.flows_per_shard = flows_per_shard
        self.entries: List[ShardEntry] = []
        self._pending: List[Tuple[Sequence[int], int, str]] = []

    def add(self, tokens: Sequence[int], base_time_us: int, source: str) -> None:
        self._pending.append((tokens, base_time_us, source))
        if len(self._pending) >= self.flows_per_shard:
            self.flush()

    def flush(self) -> None:
        if not self._pending:
            return
        name = f"shard-{len(self.entries):05d}{SHARD_SUFFIX}"
        flows, tokens = write_shard(os.path.join(self.directory, name), [row[0] for row in self._pending])
        self.entries.append(ShardEntry(name, flows, tokens, [row[2] for row in self._pending],
                                       [row[1] for row in self._pending]))
        logger.debug("wrote %s (%d flows, %d tokens)", name, flows, tokens)
        self._pending = []

    def close(self) -> str:
        self.flush()
        return write_manifest(self.directory, self.entries)

    @property
    def flows(self) -> int:
        return sum(e.flows for e in self.entries) + len(self._pending)

    @property
    def tokens(self) -> int:
        return sum(e.tokens for e in self.entries)


class Corpus(SequenceABC):
    """
    Memory-mapped flows of a corpus directory.

    Only flow boundaries are indexed up front; indexing returns a read-only
    uint16 view into the shard, so token data stays on disk until used.
    """

    def __init__(self, directory: str) -> None:
        self.directory = directory
        self.entries = read_manifest(directory)
        self._shards = [read_shard(os.path.join(directory, e.path)) for e in self.entries]
        starts: List[np.ndarray] = []
        ends: List[np.ndarray] = []
        shard_ids: List[np.ndarray] = []
        for index, ids in enumerate(self._shards):
            flow_ends = np.flatnonzero(ids == FLOW_END) + 1
            tail = flow_ends[-1] if len(flow_ends) else 0
            if tail < len(ids):
                raise CorruptShard(f"{self.entries[index].path}: {len(ids) - tail} tokens after the last FLOW_END")
            starts.append(np.concatenate([[0], flow_ends[:-1]]).astype(np.int64) if len(flow_ends) else flow_ends)
            ends.append(flow_ends)
            shard_ids.append(np.full(len(flow_ends), index, dtype=np.int64))
        self._starts = np.concatenate(starts) if starts else np.zeros(0, dtype=np.int64)
        self._ends = np.concatenate(ends) if ends else np.zeros(0, dtype=np.int64)
        self._shard_of = np.concatenate(shard_ids) if shard_ids else np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._starts)

    def __getitem__(self, index: int) -> np.ndarray:
        if not -len(self) <= index < len(self):
            raise IndexError(f"flow {index} out of range for {len(self)} flows")
        index %= len(self)
        return self._shards[self._shard_of[index]][self._starts[index]:self._ends[index]]

    @property
    def lengths(self) -> np.ndarray:
        return self._ends - self._starts


def split_corpus(items: Sequence[T], test_fraction: float = 0.01, seed: int = 0) -> Tuple[List[T], List[T]]:
    """
    Seeded train/test split (99%/1% by default).

    Returns:
        (train items, test items); a single item always goes to train
    """
    if not 0 <= test_fraction < 1:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(items))
    n_test = 0 if len(items) < 2 else max(1, int(round(len(items) * test_fraction)))
    if test_fraction == 0:
        n_test = 0
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return [items[i] for i in train], [items[i] for i in test]
