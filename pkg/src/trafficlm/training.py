"""
Next-token pre-training: windowing, masked loss, and the Adam loop.
"""

import copy
import csv
import logging
import os
from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .codec import PAD
from .errors import ConfigError, DivergenceDetected, EmptyBatch
from .model import CHECKPOINT_SUFFIX, TrafficLM, save_checkpoint

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOSS_CURVE_NAME = "loss.csv"

# (step, loss) pairs
LossCurve = List[Tuple[int, float]]


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    stride: Optional[int] = None
    pack_flows: bool = False
    checkpoint_interval: int = 0
    log_interval: int = 50

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.checkpoint_interval < 0:
            raise ConfigError(f"checkpoint_interval must be >= 0, got {self.checkpoint_interval}")


@dataclass
class TrainResult:
    model: TrafficLM
    loss_curve: LossCurve = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)


def _window_bounds(length: int, max_len: int, stride: int) -> Iterator[Tuple[int, int]]:
    if length <= max_len:
        yield 0, length
        return
    start = 0
    while True:
        yield start, start + max_len
        if start + max_len >= length:
            return
        start += stride


def _windows_of(seq: Sequence[int], max_len: int, stride: int) -> Iterator[List[int]]:
    for start, end in _window_bounds(len(seq), max_len, stride):
        yield list(seq[start:end])


def iter_windows(flows: Iterable[Sequence[int]], max_len: int, stride: Optional[int] = None,
                 pack_flows: bool = False) -> Iterator[List[int]]:
    """
    Cut token streams into training windows of at most max_len tokens.

    Every token lands in at least one window. Flows are windowed on their
    own unless pack_flows concatenates them into a single stream first.
    """
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    stride = stride or max_len
    if pack_flows:
        stream: List[int] = []
        for flow in flows:
            stream.extend(flow)
        if stream:
            yield from _windows_of(stream, max_len, stride)
        return
    for flow in flows:
        if len(flow):
            yield from _windows_of(flow, max_len, stride)


def make_windows(flows: Iterable[Sequence[int]], max_len: int, stride: Optional[int] = None,
                 pack_flows: bool = False) -> List[List[int]]:
    return list(iter_windows(flows, max_len, stride, pack_flows))


class PackedFlows:
    """Flows viewed as one concatenated stream; slicing copies only the slice."""

    def __init__(self, flows: Sequence[Sequence[int]]) -> None:
        self._flows = [f for f in flows if len(f)]
        self._offsets = np.cumsum([0] + [len(f) for f in self._flows])

    def __len__(self) -> int:
        return int(self._offsets[-1])

    def __getitem__(self, span: slice) -> List[int]:
        start, stop, _ = span.indices(len(self))
        pieces: List[int] = []
        first = int(np.searchsorted(self._offsets, start, side="right")) - 1
        for index in range(max(first, 0), len(self._flows)):
            lo = int(self._offsets[index])
            if lo >= stop:
                break
            flow = self._flows[index]
            pieces.extend(int(t) for t in flow[max(start - lo, 0):stop - lo])
        return pieces


class WindowIndex(SequenceABC):
    """
    Training windows located by offsets rather than stored.

    Holds (stream, start, end) per window over the given flows; indexing
    slices the window out of its flow, so memory-mapped corpora stay on
    disk. Yields the same windows in the same order as make_windows.
    """

    def __init__(self, flows: Sequence[Sequence[int]], max_len: int, stride: Optional[int] = None,
                 pack_flows: bool = False) -> None:
        if max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {max_len}")
        stride = stride or max_len
        if pack_flows:
            packed = PackedFlows(flows)
            self._streams: List[Sequence[int]] = [packed] if len(packed) else []
        else:
            self._streams = [f for f in flows if len(f)]
        bounds = [(s, start, end) for s, stream in enumerate(self._streams)
                  for start, end in _window_bounds(len(stream), max_len, stride)]
        self._bounds = np.asarray(bounds, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self._bounds)

    def __getitem__(self, index: int) -> Sequence[int]:
        stream, start, end = self._bounds[index]
        return self._streams[stream][int(start):int(end)]

    @property
    def lengths(self) -> np.ndarray:
        return self._bounds[:, 2] - self._bounds[:, 1]


def _usable(windows: Sequence[Sequence[int]]) -> List[int]:
    # indices of windows with at least one target token
    if isinstance(windows, WindowIndex):
        return np.flatnonzero(windows.lengths >= 2).tolist()
    return [i for i, w in enumerate(windows) if len(w) >= 2]


def collate(windows: Sequence[Sequence[int]], masks: Optional[Sequence[Sequence[bool]]] = None
            ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Pad windows with PAD and shift them into (inputs, targets, target_mask).

    Targets are inputs shifted left by one. Without masks every non-PAD
    target inside a window counts; with masks exactly the masked targets
    count, since label codes may use the PAD id.
    """
    width = max(len(w) for w in windows)
    ids = torch.full((len(windows), width), PAD, dtype=torch.long)
    keep = torch.zeros((len(windows), width), dtype=torch.bool)
    for row, window in enumerate(windows):
        ids[row, :len(window)] = torch.as_tensor(np.asarray(window, dtype=np.int64))
        if masks is None:
            keep[row, :len(window)] = True
        else:
            keep[row, :len(window)] = torch.as_tensor(list(masks[row]), dtype=torch.bool)
    targets = ids[:, 1:]
    keep = keep[:, 1:]
    if masks is None:
        keep = keep & (targets != PAD)
    return ids[:, :-1], targets, keep


def nll_loss(logits: torch.Tensor, targets: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Mean negative log-likelihood over unmasked positions.

    Args:
        logits: (..., T, V)
        targets: (..., T) token ids
        mask: Optional boolean (..., T) of positions to score; defaults to
            every non-PAD target

    Returns:
        Scalar loss tensor
    """
    keep = targets != PAD if mask is None else mask
    if not keep.any():
        raise EmptyBatch("every target position is masked")
    losses = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    return losses[keep.reshape(-1)].mean()


def evaluate_loss(model: TrafficLM, windows: Sequence[Sequence[int]], batch_size: int = 4) -> float:
    """Average loss per target token over all windows, in eval mode."""
    usable = _usable(windows)
    if not usable:
        raise EmptyBatch("no window has a target token")
    total, count = 0.0, 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(usable), batch_size):
            inputs, targets, keep = collate([windows[i] for i in usable[start:start + batch_size]])
            logits = model(inputs)
            n = int(keep.sum())
            total += nll_loss(logits, targets, keep).item() * n
            count += n
    model.train(was_training)
    return total / count


def next_token_accuracy(model: TrafficLM, windows: Sequence[Sequence[int]], batch_size: int = 4) -> float:
    """Fraction of non-PAD target positions where the argmax prediction is right."""
    usable = _usable(windows)
    if not usable:
        raise EmptyBatch("no window has a target token", operation="lm.next_token_accuracy")
    hits, count = 0, 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(usable), batch_size):
            inputs, targets, keep = collate([windows[i] for i in usable[start:start + batch_size]])
            predictions = model(inputs).argmax(dim=-1)
            hits += int(((predictions == targets) & keep).sum())
            count += int(keep.sum())
    model.train(was_training)
    return hits / count


def write_loss_curve(path: str, curve: LossCurve) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        for step, loss in curve:
            writer.writerow([step, repr(loss)])


def _batches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    # one shuffled pass per epoch, indefinitely
    while True:
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            yield order[start:start + batch_size]


def train(model: TrafficLM, windows: Sequence[Sequence[int]], config: TrainConfig,
          out_dir: Optional[str] = None, masks: Optional[Sequence[Sequence[bool]]] = None,
          extra: Optional[dict] = None) -> TrainResult:
    """
    Optimize model parameters in place with Adam at a constant learning rate.

    The same seed, data and config give a bit-identical loss curve on one
    thread. A non-finite loss stops training with DivergenceDetected; the
    last parameters that gave a finite loss are checkpointed when out_dir
    is set.

    Args:
        model: Model to train; its parameters are mutated
        windows: Token windows, each no longer than model.max_len
        config: Optimizer and schedule settings
        out_dir: Where checkpoints and the loss curve go, if anywhere
        masks: Optional per-window loss masks aligned with windows
        extra: Extra checkpoint header fields

    Returns:
        TrainResult with the loss before each update
    """
    indices = _usable(windows)
    if config.steps and not indices:
        raise EmptyBatch("training needs at least one window of two or more tokens", operation="lm.train")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    result = TrainResult(model=model)
    batches = _batches(len(indices), config.batch_size, rng)
    last_good = copy.deepcopy(model.state_dict()) if out_dir else None

    def checkpoint(name: str, step: int) -> str:
        path = os.path.join(out_dir, name)
        save_checkpoint(path, model, step, config.seed, extra)
        result.checkpoints.append(path)
        return path

    model.train()
    for step in range(1, config.steps + 1):
        chosen = [indices[i] for i in next(batches)]
        inputs, targets, keep = collate([windows[i] for i in chosen],
                                        None if masks is None else [masks[i] for i in chosen])
        if not keep.any():
            continue
        loss = nll_loss(model(inputs), targets, keep)
        if not torch.isfinite(loss):
            saved = None
            if out_dir:
                model.load_state_dict(last_good)
                saved = checkpoint(f"last-good-{step - 1:07d}{CHECKPOINT_SUFFIX}", step - 1)
            raise DivergenceDetected(f"non-finite loss at step {step}", last_checkpoint=saved)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        result.loss_curve.append((step, loss.item()))
        if out_dir:
            last_good = copy.deepcopy(model.state_dict())

        if config.log_interval and step % config.log_interval == 0:
            logger.info("step %d loss %.6f", step, loss.item())
        if out_dir and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            checkpoint(f"checkpoint-{step:07d}{CHECKPOINT_SUFFIX}", step)

    if out_dir:
        checkpoint(f"final{CHECKPOINT_SUFFIX}", config.steps)
        write_loss_curve(os.path.join(out_dir, LOSS_CURVE_NAME), result.loss_curve)
    return result
