"""
Distribution metrics comparing generated traffic with real traffic:
Jensen-Shannon divergence over packet header fields and flow features,
and CDF exports.
"""

import csv
import ipaddress
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, Hashable, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import dpkt
import numpy as np
from scipy.stats import entropy

from .errors import ConfigError, EmptyFlow, EmptyInput, NotADistribution, ShapeError
from .pcap_io import Direction, Flow, decode_ip

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-9
HEADER_FIELDS = ("sport", "dport", "src", "dst", "length", "ttl")
FEATURE_NAMES = ("f1", "f2", "f3", "f4", "f5", "f6")
CONTINUOUS_FEATURES = ("f2", "f3", "f4")
DEFAULT_BINS = 50
CHUNK_SIZE = 20


@dataclass
class EvalConfig:
    bins: int = DEFAULT_BINS
    chunk_size: int = CHUNK_SIZE

    def __post_init__(self) -> None:
        if self.bins < 1:
            raise ConfigError(f"bins must be >= 1, got {self.bins}")
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")


def _canonical_order(values: Iterable[Hashable]) -> List[Hashable]:
    return sorted(values, key=lambda v: (type(v).__name__, v))


class CategoricalDistribution:
    """Probabilities over distinct categories, summing to 1 within 1e-9."""

    def __init__(self, support: Sequence[Hashable], probabilities: Sequence[float]) -> None:
        support = list(support)
        probabilities = np.asarray(probabilities, dtype=np.float64)
        if len(support) != len(probabilities):
            raise NotADistribution(f"{len(support)} categories for {len(probabilities)} probabilities")
        if not support:
            raise NotADistribution("distribution has no categories")
        if len(set(support)) != len(support):
            raise NotADistribution("distribution has duplicate categories")
        if not np.isfinite(probabilities).all() or (probabilities < 0).any():
            raise NotADistribution("probabilities must be finite and nonnegative")
        total = probabilities.sum()
        if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
            raise NotADistribution(f"probabilities sum to {total!r}, not 1")
        self.support = support
        self.probabilities = probabilities

    @classmethod
    def from_samples(cls, samples: Iterable[Hashable]) -> "CategoricalDistribution":
        counts = Counter(samples)
        if not counts:
            raise NotADistribution("cannot build a distribution from zero samples")
        support = _canonical_order(counts)
        total = sum(counts.values())
        return cls(support, [counts[v] / total for v in support])

    def as_dict(self) -> Dict[Hashable, float]:
        return dict(zip(self.support, self.probabilities.tolist()))

    def __repr__(self) -> str:
        return f"CategoricalDistribution({self.as_dict()!r})"


def jsd(p: CategoricalDistribution, q: CategoricalDistribution) -> float:
    """
    Jensen-Shannon divergence in bits, over the union of both supports.

    Returns:
        Value in [0, 1]; symmetric in p and q
    """
    support = _canonical_order(set(p.support) | set(q.support))
    p_map, q_map = p.as_dict(), q.as_dict()
    pv = np.array([p_map.get(v, 0.0) for v in support])
    qv = np.array([q_map.get(v, 0.0) for v in support])
    m = 0.5 * (pv + qv)
    value = 0.5 * (entropy(pv, m, base=2) + entropy(qv, m, base=2))
    return float(min(1.0, max(0.0, value)))


@dataclass
class HeaderDistributions:
    distributions: Dict[str, CategoricalDistribution]
    packets: int
    skipped: int


def packet_header_fields(flows: Iterable[Flow]) -> Tuple[Dict[str, List[Any]], int]:
    """Per-packet sport, dport, src, dst, captured length and TTL; non-TCP/UDP packets are skipped."""
    values: Dict[str, List[Any]] = {name: [] for name in HEADER_FIELDS}
    skipped = 0
    for flow in flows:
        for packet in flow.packets:
            ip = decode_ip(packet)
            if isinstance(ip, str) or not isinstance(ip.data, (dpkt.tcp.TCP, dpkt.udp.UDP)):
                skipped += 1
                continue
            transport = ip.data
            values["sport"].append(transport.sport)
            values["dport"].append(transport.dport)
            values["src"].append(str(ipaddress.ip_address(ip.src)))
            values["dst"].append(str(ipaddress.ip_address(ip.dst)))
            values["length"].append(len(packet.frame))
            values["ttl"].append(ip.ttl if isinstance(ip, dpkt.ip.IP) else ip.hlim)
    if skipped:
        logger.debug("skipped %d packets without an IP TCP/UDP header", skipped)
    return values, skipped


def packet_header_distributions(flows: Iterable[Flow]) -> HeaderDistributions:
    values, skipped = packet_header_fields(flows)
    distributions = {name: CategoricalDistribution.from_samples(values[name]) for name in HEADER_FIELDS}
    return HeaderDistributions(distributions, len(values["sport"]), skipped)


def header_jsd_report(real: Sequence[Flow], generated: Sequence[Flow]) -> Dict[str, float]:
    """Six header-field JSDs plus their average."""
    real_dists = packet_header_distributions(real).distributions
    generated_dists = packet_header_distributions(generated).distributions
    report = {name: jsd(real_dists[name], generated_dists[name]) for name in HEADER_FIELDS}
    report["average"] = float(np.mean([report[name] for name in HEADER_FIELDS]))
    return report


class FlowFeatureVector(NamedTuple):
    f1: int      # incoming packets
    f2: float    # outgoing fraction
    f3: float    # incoming fraction
    f4: float    # std of outgoing packet positions
    f5: int      # outgoing packets
    f6: int      # sum of the alternative concentration list


def concentration_list(outgoing: Sequence[bool], chunk_size: int = CHUNK_SIZE) -> List[int]:
    """Outgoing packets per consecutive chunk; the last chunk may be partial."""
    return [sum(outgoing[i:i + chunk_size]) for i in range(0, len(outgoing), chunk_size)]


def direction_features(directions: Sequence[Direction], chunk_size: int = CHUNK_SIZE) -> FlowFeatureVector:
    if not directions:
        raise EmptyFlow("flow has no packets", operation="eval-metrics.flow_feature_vector")
    outgoing = [d == Direction.OUTGOING for d in directions]
    total = len(outgoing)
    n_out = sum(outgoing)
    n_in = total - n_out
    positions = [i for i, is_out in enumerate(outgoing) if is_out]
    spread = float(np.std(positions)) if positions else 0.0
    concentration = concentration_list(outgoing, chunk_size)
    alternative = [sum(concentration[i:i + chunk_size]) for i in range(0, len(concentration), chunk_size)]
    return FlowFeatureVector(n_in, n_out / total, n_in / total, spread, n_out, int(sum(alternative)))


def flow_feature_vector(flow: Flow, chunk_size: int = CHUNK_SIZE) -> FlowFeatureVector:
    """Direction-based features of a flow whose packets carry directions."""
    directions = []
    for index, packet in enumerate(flow.packets):
        if packet.direction is None:
            raise ShapeError(f"packet {index} has no direction", operation="eval-metrics.flow_feature_vector")
        directions.append(packet.direction)
    return direction_features(directions, chunk_size)


@dataclass
class FeatureJSDReport:
    scores: Dict[str, float]
    distributions: Dict[str, Tuple[CategoricalDistribution, CategoricalDistribution]]

    @property
    def average(self) -> float:
        return float(np.mean([self.scores[name] for name in FEATURE_NAMES]))

    def to_dict(self) -> Dict[str, float]:
        row = dict(self.scores)
        row["average"] = self.average
        return row


def _binned(real: np.ndarray, generated: np.ndarray, bins: int
            ) -> Tuple[CategoricalDistribution, CategoricalDistribution]:
    lo = float(min(real.min(), generated.min()))
    hi = float(max(real.max(), generated.max()))
    if lo == hi:
        point = CategoricalDistribution([0], [1.0])
        return point, point
    pair = []
    for values in (real, generated):
        counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
        used = np.nonzero(counts)[0]
        pair.append(CategoricalDistribution(used.tolist(), counts[used] / counts.sum()))
    return pair[0], pair[1]


def flow_feature_distributions(real: Sequence[Flow], generated: Sequence[Flow],
                               config: Optional[EvalConfig] = None) -> FeatureJSDReport:
    """
    JSD per flow feature between two flow sets.

    f2, f3 and f4 are binned into equal-width bins over the combined range;
    f1, f5 and f6 are compared as exact integer categories.
    """
    config = config or EvalConfig()
    if not real or not generated:
        raise EmptyInput("both flow sets need at least one flow", operation="eval-metrics.flow_feature_distributions")
    real_vectors = [flow_feature_vector(f, config.chunk_size) for f in real]
    generated_vectors = [flow_feature_vector(f, config.chunk_size) for f in generated]

    scores, distributions = {}, {}
    for index, name in enumerate(FEATURE_NAMES):
        real_values = [v[index] for v in real_vectors]
        generated_values = [v[index] for v in generated_vectors]
        if name in CONTINUOUS_FEATURES:
            pair = _binned(np.asarray(real_values, dtype=np.float64),
                           np.asarray(generated_values, dtype=np.float64), config.bins)
        else:
            pair = (CategoricalDistribution.from_samples(real_values),
                    CategoricalDistribution.from_samples(generated_values))
        distributions[name] = pair
        scores[name] = jsd(*pair)
    return FeatureJSDReport(scores, distributions)


def cdf_points(samples: Sequence[float]) -> List[Tuple[float, float]]:
    """
    Empirical CDF at each distinct value: (value, fraction of samples <= value).

    Example: [1, 2, 2, 4] -> [(1, 0.25), (2, 0.75), (4, 1.0)]
    """
    if len(samples) == 0:
        raise EmptyInput("CDF needs at least one sample")
    values, counts = np.unique(np.asarray(samples), return_counts=True)
    fractions = np.cumsum(counts) / counts.sum()
    fractions[-1] = 1.0
    return [(v.item(), float(f)) for v, f in zip(values, fractions)]


def cdf_export(samples_by_source: Dict[str, Sequence[float]], field_name: str, path: str
               ) -> Dict[str, List[Tuple[float, float]]]:
    """Write one CSV of labeled CDF series (source, field, value, cumulative_fraction)."""
    series = {source: cdf_points(samples) for source, samples in samples_by_source.items()}
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source", "field", "value", "cumulative_fraction"])
        for source, points in series.items():
            for value, fraction in points:
                writer.writerow([source, field_name, value, repr(fraction)])
    return series
