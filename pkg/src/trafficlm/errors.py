"""
Exception hierarchy for trafficlm.

Every error names the module operation that raised it so the CLI can report
it verbatim. Three families map onto CLI exit codes: configuration (2),
data (3) and numeric (4).
"""

from typing import Any, Optional


class TrafficLMError(Exception):
    """Base class for all trafficlm errors."""

    operation: str = "trafficlm"
    exit_code: int = 1

    def __init__(self, message: str, operation: Optional[str] = None) -> None:
        super().__init__(message)
        if operation is not None:
            self.operation = operation

    def describe(self) -> str:
        """Return '<operation>: <message>' for user-facing reports."""
        return f"{self.operation}: {self}"


class ConfigError(TrafficLMError, ValueError):
    """Invalid configuration or command-line arguments."""

    operation = "cli.config"
    exit_code = 2


class DataError(TrafficLMError, ValueError):
    """Malformed or unusable input data."""

    exit_code = 3


class NumericError(TrafficLMError, ArithmeticError):
    """Numeric domain violations and divergence."""

    exit_code = 4


# pcap-io

class UnsupportedFormat(DataError):
    operation = "pcap-io.read_pcap"


class TruncatedCapture(DataError):
    operation = "pcap-io.read_pcap"

    def __init__(self, record_index: int, message: str) -> None:
        super().__init__(f"record {record_index}: {message}")
        self.record_index = record_index


class TimestampOverflow(DataError):
    operation = "pcap-io.write_pcap"


class LinktypeMismatch(DataError):
    operation = "pcap-io.write_pcap"


class FieldOutOfRange(DataError):
    operation = "pcap-io.anonymize"


# flow-codec

class InvalidInterval(DataError):
    operation = "flow-codec.encode_interval"


class LinktypeNotEncodable(DataError):
    operation = "flow-codec.tokenize_flow"


class EmptyFlow(DataError):
    operation = "flow-codec.tokenize_flow"


class UnterminatedFlow(DataError):
    operation = "flow-codec.detokenize_flow"


class TruncatedPacket(DataError):
    operation = "flow-codec.detokenize_flow"


class IllegalTokenInBody(DataError):
    operation = "flow-codec.detokenize_flow"


class CorruptShard(DataError):
    operation = "flow-codec.read_shard"


# attention-core / alt-mechanisms / lm

class NumericDomain(NumericError):
    operation = "attention-core"


class DegenerateNormalizer(NumericError):
    operation = "attention-core.kernel_attention_oracle"


class ShapeError(DataError):
    operation = "attention-core"


class InvalidDecay(ConfigError):
    operation = "alt-mechanisms.retnet_retention"


class WindowOverflow(DataError):
    operation = "lm.forward"


class EmptyBatch(DataError):
    operation = "lm.nll_loss"


class DivergenceDetected(NumericError):
    operation = "lm.train"

    def __init__(self, message: str, last_checkpoint: Optional[str] = None,
                 operation: Optional[str] = None) -> None:
        super().__init__(message, operation)
        self.last_checkpoint = last_checkpoint


# generator

class AbortedFlow(DataError):
    operation = "generator.generate_flow"

    def __init__(self, message: str, trace: Any = None) -> None:
        super().__init__(message)
        self.trace = trace


class InvalidPrompt(DataError):
    operation = "generator.generate_flow"


# classifier

class LabelOverflow(DataError):
    operation = "classifier.encode_label"


class WindowTooSmall(DataError):
    operation = "classifier.build_finetune_example"


class EmptyClass(DataError):
    operation = "classifier.discriminate"


# eval-metrics

class NotADistribution(DataError):
    operation = "eval-metrics.jsd"


class EmptyInput(DataError):
    operation = "eval-metrics.cdf_export"
