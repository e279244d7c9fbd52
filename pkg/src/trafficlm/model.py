"""
Causal language model over the 260-token flow vocabulary.

Each layer pairs an attention sublayer (local softmax heads plus heads of the
configured mechanism) with a GLU feed-forward sublayer, coupled as a
reversible block.
"""

import copy
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import (
    GLUFeedForward,
    ReversibleBlock,
    linear_attention,
    local_attention,
    reversible_sequence,
    token_shift,
    vaswani_attention,
)
from .codec import VOCAB_SIZE
from .errors import ConfigError, CorruptShard, ShapeError, WindowOverflow
from .mechanisms import default_retnet_gammas, default_retnet_theta, retnet_retention, retnet_scale, rwkv_attention

logger = logging.getLogger(__name__)

MECHANISMS = ("linear", "rwkv", "retnet", "vaswani-small")
DTYPE = torch.float64

CHECKPOINT_MAGIC = b"TGCK"
CHECKPOINT_LEN = struct.Struct("<I")
CHECKPOINT_SUFFIX = ".tgck"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; every width is an independent field."""
    vocab_size: int = VOCAB_SIZE
    model_dim: int = 64
    embed_dim: int = 64
    num_heads: int = 4
    head_dim: int = 16
    local_heads: int = 2
    local_window: int = 64
    depth: int = 2
    ffn_dim: int = 128
    dropout: float = 0.0
    max_len: int = 512
    mechanism: str = "linear"
    reversible: bool = True
    token_shift: bool = True
    position_embedding: bool = True
    as_printed: bool = False

    def __post_init__(self) -> None:
        if self.vocab_size != VOCAB_SIZE:
            raise ConfigError(f"vocab_size must be {VOCAB_SIZE}, got {self.vocab_size}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if not 0 <= self.local_heads <= self.num_heads:
            raise ConfigError(f"local_heads ({self.local_heads}) must be within [0, num_heads={self.num_heads}]")
        for name in ("model_dim", "embed_dim", "num_heads", "head_dim", "local_window", "depth", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be >= 2, got {self.max_len}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.token_shift and self.model_dim % 2:
            raise ConfigError(f"token shift needs an even model_dim, got {self.model_dim}")
        if self.mechanism == "retnet" and self.head_dim % 2:
            raise ConfigError(f"retnet heads need an even head_dim, got {self.head_dim}")


PRESETS: Dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    # 12 heads x 256 != 512 hidden, so the widths stay independent
    "large-3k": ModelConfig(model_dim=512, embed_dim=256, num_heads=12, head_dim=256, local_heads=8,
                            local_window=256, depth=24, ffn_dim=512, dropout=0.1, max_len=3072,
                            as_printed=True),
    "large-12k": ModelConfig(model_dim=512, embed_dim=256, num_heads=12, head_dim=256, local_heads=8,
                             local_window=256, depth=24, ffn_dim=512, dropout=0.1, max_len=12032,
                             as_printed=True),
}


def model_preset(name: str, **overrides: Any) -> ModelConfig:
    """Return a copy of a named preset with field overrides applied."""
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


class AttentionSublayer(nn.Module):
    """Pre-norm, token shift, mixed local/global heads, output projection."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        inner = config.num_heads * config.head_dim
        self.norm = nn.LayerNorm(config.model_dim)
        self.to_q = nn.Linear(config.model_dim, inner, bias=False)
        self.to_k = nn.Linear(config.model_dim, inner, bias=False)
        self.to_v = nn.Linear(config.model_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, config.model_dim)
        self.dropout = nn.Dropout(config.dropout)

        global_heads = config.num_heads - config.local_heads
        if config.mechanism == "rwkv" and global_heads:
            # decay rates are softplus(raw) >= 0
            self.decay_raw = nn.Parameter(torch.zeros(global_heads, config.head_dim))
        if config.mechanism == "retnet" and global_heads:
            self.register_buffer("gammas", default_retnet_gammas(global_heads))
            self.register_buffer("theta", default_retnet_theta(config.head_dim))

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.config.num_heads, self.config.head_dim).transpose(1, 2)

    def _global_heads(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        mechanism = self.config.mechanism
        if mechanism == "linear":
            return linear_attention(q, k, v, causal=True)
        if mechanism == "vaswani-small":
            return vaswani_attention(q, k, v, causal=True)
        if mechanism == "rwkv":
            return rwkv_attention(k, v, F.softplus(self.decay_raw), causal=True, mode="recurrent")
        return retnet_retention(q * retnet_scale(self.config.head_dim), k, v, self.gammas, self.theta,
                                mode="parallel")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm(x)
        if self.config.token_shift:
            h = token_shift(h)
        q, k, v = self._split_heads(self.to_q(h)), self._split_heads(self.to_k(h)), self._split_heads(self.to_v(h))
        local = self.config.local_heads
        heads = []
        if local:
            heads.append(local_attention(q[:, :local], k[:, :local], v[:, :local], self.config.local_window))
        if local < self.config.num_heads:
            heads.append(self._global_heads(q[:, local:], k[:, local:], v[:, local:]))
        out = torch.cat(heads, dim=1).transpose(1, 2).flatten(2)
        return self.dropout(self.to_out(out))


class FeedForwardSublayer(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(config.model_dim)
        self.ffn = GLUFeedForward(config.model_dim, config.ffn_dim, config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.ffn(self.norm(x))


class TrafficLM(nn.Module):
    """
    Causal LM: logits at position t depend only on ids[..., :t + 1].

    Runs in float64. With config.reversible the training path keeps only the
    last layer's activations and rebuilds the rest during backward.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.embed_dim)
        self.position_embedding = nn.Embedding(config.max_len, config.embed_dim) if config.position_embedding else None
        self.embed_proj = (nn.Linear(config.embed_dim, config.model_dim, bias=False)
                           if config.embed_dim != config.model_dim else nn.Identity())
        self.embed_dropout = nn.Dropout(config.dropout)
        self.blocks = nn.ModuleList([
            ReversibleBlock(AttentionSublayer(config), FeedForwardSublayer(config))
            for _ in range(config.depth)
        ])
        self.final_norm = nn.LayerNorm(config.model_dim)
        self.to_logits = nn.Linear(config.model_dim, config.vocab_size)
        self.reset_parameters()
        self.to(DTYPE)

    @property
    def max_len(self) -> int:
        return self.config.max_len

    def reset_parameters(self) -> None:
        """Scaled uniform init, +-1/sqrt(fan_in) for projections."""
        for module in self.modules():
            if isinstance(module, nn.Linear):
                bound = 1.0 / math.sqrt(module.in_features)
                nn.init.uniform_(module.weight, -bound, bound)
                if module.bias is not None:
                    nn.init.uniform_(module.bias, -bound, bound)
            elif isinstance(module, nn.Embedding):
                bound = 1.0 / math.sqrt(module.embedding_dim)
                nn.init.uniform_(module.weight, -bound, bound)
            elif isinstance(module, GLUFeedForward):
                module.reset_parameters()

    def forward(self, ids: torch.Tensor, reversible: Optional[bool] = None) -> torch.Tensor:
        """
        Compute next-token logits.

        Args:
            ids: (T,) or (B, T) token ids with T <= max_len
            reversible: Override config.reversible for this call

        Returns:
            (T, 260) or (B, T, 260) logits
        """
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids.unsqueeze(0)
        length = ids.shape[-1]
        if length > self.config.max_len:
            raise WindowOverflow(f"sequence of {length} tokens exceeds max_len {self.config.max_len}")
        if length and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ShapeError(f"token ids must lie in [0, {self.config.vocab_size})", operation="lm.forward")

        x = self.token_embedding(ids)
        if self.position_embedding is not None:
            x = x + self.position_embedding(torch.arange(length, device=ids.device))
        x = self.embed_dropout(self.embed_proj(x))

        use_reversible = self.config.reversible if reversible is None else reversible
        if use_reversible and torch.is_grad_enabled():
            x1, x2 = reversible_sequence(self.blocks, x, x)
        else:
            x1, x2 = x, x
            for block in self.blocks:
                x1, x2 = block(x1, x2)

        logits = self.to_logits(self.final_norm((x1 + x2) / 2))
        return logits.squeeze(0) if squeeze else logits


def build_model(config: ModelConfig, seed: int = 0) -> TrafficLM:
    """Construct a model with seed-deterministic initial weights."""
    torch.manual_seed(seed)
    return TrafficLM(config)


def clone_model(model: TrafficLM) -> TrafficLM:
    """Independent snapshot of a model, e.g. for evaluation or fine-tuning."""
    return copy.deepcopy(model)


def save_checkpoint(path: str, model: TrafficLM, step: int, seed: int,
                    extra: Optional[Dict[str, Any]] = None) -> str:
    """
    Write a self-describing checkpoint.

    Layout: magic, uint32 header length, JSON header (config, step, seed,
    tensor table, extra fields), then little-endian binary64 tensors.
    """
    table = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().to(torch.float64).contiguous().numpy().astype("<f8", copy=False)
        table.append({"name": name, "shape": list(array.shape), "offset": offset})
        blobs.append(array.tobytes())
        offset += array.nbytes
    header = {"config": asdict(model.config), "step": step, "seed": seed, "tensors": table}
    header.update(extra or {})
    encoded = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(CHECKPOINT_LEN.pack(len(encoded)))
        f.write(encoded)
        for blob in blobs:
            f.write(blob)
    logger.info("saved checkpoint %s (step %d)", path, step)
    return path


def load_checkpoint(path: str) -> Tuple[TrafficLM, Dict[str, Any]]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (model in eval mode, header dict)
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CorruptShard(f"{path}: not a checkpoint (magic {data[:4]!r})", operation="lm.load_checkpoint")
    (length,) = CHECKPOINT_LEN.unpack_from(data, 4)
    start = 4 + CHECKPOINT_LEN.size
    header = json.loads(data[start:start + length].decode())
    body = start + length

    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in header["config"].items() if k in known})
    model = TrafficLM(config)
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        array = np.frombuffer(data, dtype="<f8", count=count, offset=body + entry["offset"])
        state[entry["name"]] = torch.from_numpy(array.reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model, header
