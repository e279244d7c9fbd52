"""
Flow classification by fine-tuning the language model with a [CLS] prompt.

A flow becomes [CLS] + flow tokens + label code, where the label code is
the class index written as big-endian base-260 digits. Only the label
positions are scored. The same machinery runs the real-vs-generated
discrimination test.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.metrics import accuracy_score, precision_recall_fscore_support
from sklearn.model_selection import train_test_split

from .codec import CLS, VOCAB_SIZE, TokenSequence
from .errors import ConfigError, EmptyBatch, EmptyClass, EmptyFlow, LabelOverflow, ShapeError, WindowTooSmall
from .model import TrafficLM, clone_model
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEN = 256
SWEEP_LENGTHS = (32, 64, 128, 256)
REAL_CLASS = 0
GENERATED_CLASS = 1


@dataclass
class ClassifyConfig:
    max_len: int = DEFAULT_MAX_LEN
    label_width: int = 1
    test_fraction: float = 0.2
    discriminator_seeds: int = 10
    sweep_lengths: List[int] = field(default_factory=lambda: list(SWEEP_LENGTHS))

    def __post_init__(self) -> None:
        if self.label_width < 1:
            raise ConfigError(f"label_width must be >= 1, got {self.label_width}")
        if self.max_len < self.label_width + 2:
            raise ConfigError(f"max_len {self.max_len} cannot hold CLS, a flow token and "
                              f"{self.label_width} label tokens")
        if not 0 < self.test_fraction < 1:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.discriminator_seeds < 1:
            raise ConfigError(f"discriminator_seeds must be >= 1, got {self.discriminator_seeds}")


@dataclass
class LabeledFlow:
    tokens: TokenSequence
    class_index: int
    class_name: str = ""


@dataclass
class ClassScores:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class F1Report:
    macro_f1: float
    accuracy: float
    per_class: Dict[int, ClassScores]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "per_class": {str(c): vars(s) for c, s in sorted(self.per_class.items())},
        }


@dataclass
class DiscriminationResult:
    scores: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores))

    def formatted(self) -> str:
        return f"{self.mean:.4f}(±{self.std:.4f})"


def encode_label(class_index: int, width: int) -> List[int]:
    """
    Write a class index as `width` big-endian base-260 digits.

    Examples:
        encode_label(0, 1) -> [0]
        encode_label(260, 2) -> [1, 0]
    """
    if width < 1:
        raise ConfigError(f"label width must be >= 1, got {width}", operation="classifier.encode_label")
    if not 0 <= class_index < VOCAB_SIZE ** width:
        raise LabelOverflow(f"class {class_index} does not fit in {width} label token(s) "
                            f"(limit {VOCAB_SIZE ** width})")
    digits = []
    for _ in range(width):
        class_index, digit = divmod(class_index, VOCAB_SIZE)
        digits.append(digit)
    return digits[::-1]


def decode_label(ids: Sequence[int]) -> int:
    value = 0
    for digit in ids:
        if not 0 <= digit < VOCAB_SIZE:
            raise LabelOverflow(f"label digit {digit} is outside [0, {VOCAB_SIZE})",
                                operation="classifier.decode_label")
        value = value * VOCAB_SIZE + digit
    return value


def _flow_room(max_len: int, width: int) -> int:
    room = max_len - 1 - width
    if room < 1:
        raise WindowTooSmall(f"max_len {max_len} leaves no room for a flow token beside CLS and "
                             f"{width} label token(s)")
    return room


def build_finetune_example(flow_tokens: Sequence[int], label: Sequence[int], max_len: int
                           ) -> Tuple[List[int], List[bool]]:
    """
    Build one fine-tuning window.

    Returns:
        (ids, mask) where ids = [CLS] + truncated flow + label and mask
        marks only the label positions
    """
    room = _flow_room(max_len, len(label))
    if not flow_tokens:
        raise EmptyFlow("cannot classify a flow without tokens", operation="classifier.build_finetune_example")
    body = list(flow_tokens[:room])
    ids = [CLS] + body + list(label)
    mask = [False] * (1 + len(body)) + [True] * len(label)
    return ids, mask


def finetune(model: TrafficLM, flows: Sequence[LabeledFlow], config: TrainConfig, width: int = 1,
             max_len: int = DEFAULT_MAX_LEN, out_dir: Optional[str] = None) -> TrafficLM:
    """
    Fine-tune every parameter on labeled flows; loss covers label positions only.

    The model is updated in place and returned.
    """
    max_len = min(max_len, model.max_len)
    windows, masks = [], []
    for flow in flows:
        ids, mask = build_finetune_example(flow.tokens, encode_label(flow.class_index, width), max_len)
        windows.append(ids)
        masks.append(mask)
    num_classes = max((f.class_index for f in flows), default=-1) + 1
    train(model, windows, config, out_dir=out_dir, masks=masks,
          extra={"kind": "finetune", "label_width": width, "num_classes": num_classes, "max_len": max_len})
    return model


def _digit_limit(prefix: int, remaining: int, num_classes: int) -> int:
    # largest digit d such that some class starts with prefix digits then d
    return min(VOCAB_SIZE, math.ceil(num_classes / VOCAB_SIZE ** remaining) - prefix * VOCAB_SIZE) - 1


def predict(model: TrafficLM, flow_tokens: Sequence[int], width: int = 1, num_classes: Optional[int] = None,
            max_len: int = DEFAULT_MAX_LEN) -> int:
    """
    Greedy-decode a label after [CLS] + flow, restricted to valid class codes.

    Returns:
        Class index, always < num_classes
    """
    max_len = min(max_len, model.max_len)
    num_classes = VOCAB_SIZE ** width if num_classes is None else num_classes
    if not 1 <= num_classes <= VOCAB_SIZE ** width:
        raise LabelOverflow(f"{num_classes} classes do not fit in {width} label token(s)",
                            operation="classifier.predict")
    room = _flow_room(max_len, width)
    if not flow_tokens:
        raise EmptyFlow("cannot classify a flow without tokens", operation="classifier.predict")

    ids = [CLS] + list(flow_tokens[:room])
    prefix = 0
    model.eval()
    with torch.no_grad():
        for position in range(width):
            logits = model(torch.tensor(ids, dtype=torch.long))[-1]
            limit = _digit_limit(prefix, width - position - 1, num_classes)
            digit = int(torch.argmax(logits[:limit + 1]))
            ids.append(digit)
            prefix = prefix * VOCAB_SIZE + digit
    return prefix


def predict_many(model: TrafficLM, flows: Iterable[Sequence[int]], width: int = 1,
                 num_classes: Optional[int] = None, max_len: int = DEFAULT_MAX_LEN) -> List[int]:
    return [predict(model, tokens, width, num_classes, max_len) for tokens in flows]


def macro_f1(predictions: Sequence[int], labels: Sequence[int]) -> F1Report:
    """
    Unweighted mean of per-class F1 over classes seen in labels or predictions.

    Example: labels [0, 0, 1, 1], predictions [0, 1, 1, 1] give per-class
    F1 {0: 2/3, 1: 4/5} and macro F1 11/15.
    """
    if len(predictions) != len(labels):
        raise ShapeError(f"{len(predictions)} predictions for {len(labels)} labels", operation="classifier.macro_f1")
    if not labels:
        raise EmptyBatch("macro F1 needs at least one label", operation="classifier.macro_f1")
    classes = sorted(set(labels) | set(predictions))
    precision, recall, f1, support = precision_recall_fscore_support(
        labels, predictions, labels=classes, zero_division=0)
    per_class = {
        c: ClassScores(float(p), float(r), float(s), int(n))
        for c, p, r, s, n in zip(classes, precision, recall, f1, support)
    }
    return F1Report(float(np.mean(f1)), float(accuracy_score(labels, predictions)), per_class)


def stratified_split(labels: Sequence[int], test_fraction: float = 0.2, seed: int = 0
                     ) -> Tuple[List[int], List[int]]:
    """Split indices into (train, test) keeping class proportions."""
    indices = list(range(len(labels)))
    train_idx, test_idx = train_test_split(indices, test_size=test_fraction, random_state=seed,
                                           stratify=list(labels))
    return sorted(train_idx), sorted(test_idx)


def evaluate(model: TrafficLM, flows: Sequence[LabeledFlow], width: int = 1, num_classes: Optional[int] = None,
             max_len: int = DEFAULT_MAX_LEN) -> F1Report:
    predictions = predict_many(model, [f.tokens for f in flows], width, num_classes, max_len)
    return macro_f1(predictions, [f.class_index for f in flows])


def discriminate(model: TrafficLM, real: Sequence[TokenSequence], generated: Sequence[TokenSequence],
                 config: TrainConfig, seeds: int = 10, max_len: int = DEFAULT_MAX_LEN,
                 test_fraction: float = 0.2) -> DiscriminationResult:
    """
    Real-vs-generated binary test: per seed, balance the two sets, split
    80/20, fine-tune a fresh copy of the pre-trained model and score the
    held-out macro F1.
    """
    if not real:
        raise EmptyClass("no real flows to discriminate")
    if not generated:
        raise EmptyClass("no generated flows to discriminate")

    scores = []
    n = min(len(real), len(generated))
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        flows = ([LabeledFlow(list(real[i]), REAL_CLASS) for i in sorted(rng.choice(len(real), n, replace=False))]
                 + [LabeledFlow(list(generated[i]), GENERATED_CLASS)
                    for i in sorted(rng.choice(len(generated), n, replace=False))])
        train_idx, test_idx = stratified_split([f.class_index for f in flows], test_fraction, seed)
        candidate = clone_model(model)
        finetune(candidate, [flows[i] for i in train_idx], replace(config, seed=seed), 1, max_len)
        report = evaluate(candidate, [flows[i] for i in test_idx], 1, 2, max_len)
        logger.info("discriminator seed %d macro F1 %.4f", seed, report.macro_f1)
        scores.append(report.macro_f1)
    return DiscriminationResult(scores)


def sweep_max_len(model: TrafficLM, flows: Sequence[LabeledFlow], config: TrainConfig,
                  lengths: Sequence[int] = SWEEP_LENGTHS, width: int = 1, test_fraction: float = 0.2,
                  seed: int = 0) -> Dict[int, float]:
    """Held-out macro F1 for each classification window length."""
    train_idx, test_idx = stratified_split([f.class_index for f in flows], test_fraction, seed)
    num_classes = max(f.class_index for f in flows) + 1
    results = {}
    for length in lengths:
        candidate = clone_model(model)
        finetune(candidate, [flows[i] for i in train_idx], config, width, length)
        results[length] = evaluate(candidate, [flows[i] for i in test_idx], width, num_classes, length).macro_f1
        logger.info("max_len %d macro F1 %.4f", length, results[length])
    return results


def write_labeled_manifest(path: str, rows: Iterable[Tuple[str, int, str]]) -> None:
    """One JSON line per labeled shard: path, class index, class name."""
    with open(path, "w") as f:
        for shard, class_index, class_name in rows:
            f.write(json.dumps({"shard": shard, "class_index": class_index, "class_name": class_name},
                               sort_keys=True) + "\n")


def read_labeled_manifest(path: str) -> List[Tuple[str, int, str]]:
    rows = []
    with open(path) as f:
        for line in f:
            if line.strip():
                row = json.loads(line)
                rows.append((row["shard"], int(row["class_index"]), row.get("class_name", "")))
    return rows
