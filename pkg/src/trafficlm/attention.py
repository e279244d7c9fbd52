"""
Attention mechanisms and building blocks of the flow language model.

All functions take tensors shaped (..., N, d) so that batch and head
dimensions pass straight through. Use float64 when exactness matters.
"""

import math
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DegenerateNormalizer, NumericDomain, ShapeError

DEFAULT_EPS = 1e-6
DEFAULT_CHUNK_SIZE = 64

FeatureMap = Callable[[torch.Tensor], torch.Tensor]
Sublayer = Callable[[torch.Tensor], torch.Tensor]


def elu_feature_map(x: torch.Tensor) -> torch.Tensor:
    """phi(x) = elu(x) + 1, strictly positive for finite x."""
    return F.elu(x) + 1


def _check_qkv(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, operation: str) -> None:
    if q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"Q/K/V lengths differ: {q.shape[-2]}, {k.shape[-2]}, {v.shape[-2]}",
                         operation=operation)
    if q.shape[-1] != k.shape[-1] or q.shape[-1] < 1:
        raise ShapeError(f"Q and K need the same head dimension >= 1, got {q.shape[-1]} and {k.shape[-1]}",
                         operation=operation)
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(t).all():
            raise NumericDomain(f"{name} contains non-finite entries", operation=operation)


def causal_mask(n: int, device: Optional[torch.device] = None) -> torch.Tensor:
    """Boolean (n, n) mask, True where key j lies after query i."""
    return torch.triu(torch.ones(n, n, dtype=torch.bool, device=device), diagonal=1)


def vaswani_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, causal: bool = False) -> torch.Tensor:
    """
    Softmax(QK^T / sqrt(d)) V, masked to j <= i when causal.

    Quadratic in N; used as the reference mechanism and for small models.
    """
    _check_qkv(q, k, v, "attention-core.vaswani_attention")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if causal:
        scores = scores.masked_fill(causal_mask(q.shape[-2], q.device), float("-inf"))
    return torch.softmax(scores, dim=-1) @ v


def kernel_attention_oracle(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, causal: bool = True,
                            feature_map: FeatureMap = elu_feature_map,
                            eps: float = DEFAULT_EPS) -> torch.Tensor:
    """
    Direct O(N^2) kernel attention:
    V'_i = sum_j phi(Q_i).phi(K_j) V_j / sum_j phi(Q_i).phi(K_j).

    Raises DegenerateNormalizer when any denominator falls below eps.
    """
    _check_qkv(q, k, v, "attention-core.kernel_attention_oracle")
    similarity = feature_map(q) @ feature_map(k).transpose(-2, -1)
    if causal:
        similarity = similarity.masked_fill(causal_mask(q.shape[-2], q.device), 0.0)
    denominator = similarity.sum(dim=-1, keepdim=True)
    if (denominator < eps).any():
        raise DegenerateNormalizer(f"kernel normalizer below {eps}")
    return (similarity @ v) / denominator


class LinearAttentionState:
    """Running sums S = sum phi(K_j) V_j^T and Z = sum phi(K_j)."""

    def __init__(self, s: torch.Tensor, z: torch.Tensor) -> None:
        self.s = s
        self.z = z

    @classmethod
    def zeros(cls, batch_shape: Tuple[int, ...], key_dim: int, value_dim: int,
              dtype: torch.dtype = torch.float64, device: Optional[torch.device] = None) -> "LinearAttentionState":
        return cls(torch.zeros(*batch_shape, key_dim, value_dim, dtype=dtype, device=device),
                   torch.zeros(*batch_shape, key_dim, dtype=dtype, device=device))

    def update(self, k_phi: torch.Tensor, v: torch.Tensor) -> None:
        """Fold one position (k_phi: (..., d), v: (..., dv)) into the sums."""
        self.s = self.s + k_phi.unsqueeze(-1) * v.unsqueeze(-2)
        self.z = self.z + k_phi

    def read(self, q_phi: torch.Tensor, eps: float = DEFAULT_EPS) -> torch.Tensor:
        numerator = (q_phi.unsqueeze(-2) @ self.s).squeeze(-2)
        denominator = (q_phi * self.z).sum(dim=-1, keepdim=True)
        return numerator / (denominator + eps)


def linear_attention_recurrent(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                               feature_map: FeatureMap = elu_feature_map,
                               eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Causal linear attention as an explicit left-to-right scan over positions."""
    _check_qkv(q, k, v, "attention-core.linear_attention")
    q_phi, k_phi = feature_map(q), feature_map(k)
    state = LinearAttentionState.zeros(tuple(q.shape[:-2]), q.shape[-1], v.shape[-1], q.dtype, q.device)
    rows: List[torch.Tensor] = []
    for i in range(q.shape[-2]):
        state.update(k_phi[..., i, :], v[..., i, :])
        rows.append(state.read(q_phi[..., i, :], eps))
    return torch.stack(rows, dim=-2)


def _exclusive_cumsum(x: torch.Tensor, dim: int) -> torch.Tensor:
    summed = torch.cumsum(x, dim=dim)
    zeros = torch.zeros_like(summed.narrow(dim, 0, 1))
    return torch.cat([zeros, summed.narrow(dim, 0, summed.shape[dim] - 1)], dim=dim)


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, causal: bool = True,
                     feature_map: FeatureMap = elu_feature_map, eps: float = DEFAULT_EPS,
                     chunk_size: int = DEFAULT_CHUNK_SIZE) -> torch.Tensor:
    """
    Linear attention phi(Q)(phi(K)^T V) with an eps-guarded normalizer.

    The causal form walks the sequence in chunks: running state for earlier
    chunks plus a masked product inside the chunk. Results match
    linear_attention_recurrent up to float rounding.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be > 0, got {eps}", operation="attention-core.linear_attention")
    _check_qkv(q, k, v, "attention-core.linear_attention")
    q_phi, k_phi = feature_map(q), feature_map(k)

    if not causal:
        s = k_phi.transpose(-2, -1) @ v
        z = k_phi.sum(dim=-2)
        denominator = (q_phi @ z.unsqueeze(-1))
        return (q_phi @ s) / (denominator + eps)

    n = q.shape[-2]
    pad = (-n) % chunk_size
    if pad:
        q_phi = F.pad(q_phi, (0, 0, 0, pad))
        k_phi = F.pad(k_phi, (0, 0, 0, pad))
        v = F.pad(v, (0, 0, 0, pad))
    chunks = (n + pad) // chunk_size
    q_c = q_phi.reshape(*q_phi.shape[:-2], chunks, chunk_size, q_phi.shape[-1])
    k_c = k_phi.reshape(*k_phi.shape[:-2], chunks, chunk_size, k_phi.shape[-1])
    v_c = v.reshape(*v.shape[:-2], chunks, chunk_size, v.shape[-1])

    s_prev = _exclusive_cumsum(k_c.transpose(-2, -1) @ v_c, dim=-3)
    z_prev = _exclusive_cumsum(k_c.sum(dim=-2), dim=-2)
    intra = (q_c @ k_c.transpose(-2, -1)).masked_fill(causal_mask(chunk_size, q.device), 0.0)

    numerator = q_c @ s_prev + intra @ v_c
    denominator = (q_c @ z_prev.unsqueeze(-1)) + intra.sum(dim=-1, keepdim=True)
    out = numerator / (denominator + eps)
    out = out.reshape(*out.shape[:-3], chunks * chunk_size, out.shape[-1])
    return out[..., :n, :]


def local_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, window: int) -> torch.Tensor:
    """
    Causal softmax attention over the trailing window of keys [i - W + 1, i].

    Each block of W queries sees its own block and the previous one, so cost
    is O(N * W).
    """
    if window < 1:
        raise ConfigError(f"local window must be >= 1, got {window}", operation="attention-core.local_attention")
    _check_qkv(q, k, v, "attention-core.local_attention")
    n, d = q.shape[-2], q.shape[-1]
    if window >= n:
        return vaswani_attention(q, k, v, causal=True)

    pad = (-n) % window
    if pad:
        q, k, v = (F.pad(t, (0, 0, 0, pad)) for t in (q, k, v))
    blocks = (n + pad) // window

    def blocked(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(*t.shape[:-2], blocks, window, t.shape[-1])

    q_b, k_b, v_b = blocked(q), blocked(k), blocked(v)

    def with_previous(t: torch.Tensor) -> torch.Tensor:
        previous = torch.cat([torch.zeros_like(t[..., :1, :, :]), t[..., :-1, :, :]], dim=-3)
        return torch.cat([previous, t], dim=-2)

    keys, values = with_previous(k_b), with_previous(v_b)
    scores = q_b @ keys.transpose(-2, -1) / math.sqrt(d)

    i = torch.arange(window, device=q.device).unsqueeze(-1)
    j = torch.arange(2 * window, device=q.device).unsqueeze(0)
    allowed = (j >= i + 1) & (j <= i + window)
    allowed = allowed.unsqueeze(0).repeat(blocks, 1, 1)
    # the first block has no predecessor
    allowed[0, :, :window] = False
    scores = scores.masked_fill(~allowed, float("-inf"))

    out = torch.softmax(scores, dim=-1) @ values
    out = out.reshape(*out.shape[:-3], blocks * window, out.shape[-1])
    return out[..., :n, :]


def token_shift(x: torch.Tensor) -> torch.Tensor:
    """
    Keep the first half of the channels, take the second half from t - 1.

    Row 0 gets zeros in its shifted half.
    """
    channels = x.shape[-1]
    if channels % 2:
        raise ShapeError(f"token_shift needs an even channel count, got {channels}",
                         operation="attention-core.token_shift")
    half = channels // 2
    kept, shifted = x[..., :half], x[..., half:]
    shifted = F.pad(shifted, (0, 0, 1, 0))[..., :-1, :]
    return torch.cat([kept, shifted], dim=-1)


def glu_ffn(x: torch.Tensor, w_gate: torch.Tensor, w_value: torch.Tensor, w_out: torch.Tensor) -> torch.Tensor:
    """
    (swish(X W_g) * (X W_v)) W_o, row-wise.

    Args:
        x: (..., D) inputs
        w_gate: (D, F) gate weights
        w_value: (D, F) value weights
        w_out: (F, D_out) output weights
    """
    if w_gate.shape != w_value.shape or x.shape[-1] != w_gate.shape[0] or w_out.shape[0] != w_gate.shape[1]:
        raise ShapeError(
            f"GLU shapes do not chain: x {tuple(x.shape)}, W_g {tuple(w_gate.shape)}, "
            f"W_v {tuple(w_value.shape)}, W_o {tuple(w_out.shape)}",
            operation="attention-core.glu_ffn")
    return (F.silu(x @ w_gate) * (x @ w_value)) @ w_out


class GLUFeedForward(nn.Module):
    """Bias-free GLU feed-forward with weights stored input-major."""

    def __init__(self, dim: int, hidden_dim: int, dropout: float = 0.0) -> None:
        super().__init__()
        self.w_gate = nn.Parameter(torch.empty(dim, hidden_dim))
        self.w_value = nn.Parameter(torch.empty(dim, hidden_dim))
        self.w_out = nn.Parameter(torch.empty(hidden_dim, dim))
        self.dropout = nn.Dropout(dropout)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for weight in (self.w_gate, self.w_value, self.w_out):
            bound = 1.0 / math.sqrt(weight.shape[0])
            nn.init.uniform_(weight, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(glu_ffn(x, self.w_gate, self.w_value, self.w_out))


def reversible_block_forward(x1: torch.Tensor, x2: torch.Tensor, f: Sublayer, g: Sublayer
                             ) -> Tuple[torch.Tensor, torch.Tensor]:
    """y1 = x1 + F(x2), y2 = x2 + G(y1)."""
    y1 = x1 + f(x2)
    y2 = x2 + g(y1)
    return y1, y2


def reversible_block_inverse(y1: torch.Tensor, y2: torch.Tensor, f: Sublayer, g: Sublayer
                             ) -> Tuple[torch.Tensor, torch.Tensor]:
    """x2 = y2 - G(y1), x1 = y1 - F(x2)."""
    x2 = y2 - g(y1)
    x1 = y1 - f(x2)
    return x1, x2


class Deterministic(nn.Module):
    """
    Wrap a sublayer so a second call can replay the RNG state of the first.

    Needed for dropout inside reversible blocks, where activations are
    recomputed during backward.
    """

    def __init__(self, net: nn.Module) -> None:
        super().__init__()
        self.net = net
        self.cpu_state: Optional[torch.Tensor] = None

    def forward(self, x: torch.Tensor, record_rng: bool = False, set_rng: bool = False) -> torch.Tensor:
        if record_rng:
            self.cpu_state = torch.get_rng_state()
        if not set_rng:
            return self.net(x)
        with torch.random.fork_rng(devices=[]):
            torch.set_rng_state(self.cpu_state)
            return self.net(x)


class ReversibleBlock(nn.Module):
    """Residual coupling whose inputs are recomputed from outputs in backward."""

    def __init__(self, f: nn.Module, g: nn.Module) -> None:
        super().__init__()
        self.f = Deterministic(f)
        self.g = Deterministic(g)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor, record_rng: bool = False
                ) -> Tuple[torch.Tensor, torch.Tensor]:
        y1 = x1 + self.f(x2, record_rng=record_rng)
        y2 = x2 + self.g(y1, record_rng=record_rng)
        return y1, y2

    def backward_pass(self, y1: torch.Tensor, y2: torch.Tensor, dy1: torch.Tensor, dy2: torch.Tensor
                      ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """
        Reconstruct (x1, x2) from (y1, y2) and propagate gradients.

        Parameter gradients accumulate into .grad as a side effect.
        """
        with torch.enable_grad():
            y1 = y1.detach().requires_grad_(True)
            g_y1 = self.g(y1, set_rng=True)
            torch.autograd.backward(g_y1, dy2)

        with torch.no_grad():
            x2 = y2 - g_y1
            dx1 = dy1 + y1.grad
            y1.grad = None

        with torch.enable_grad():
            x2 = x2.detach().requires_grad_(True)
            f_x2 = self.f(x2, set_rng=True)
            torch.autograd.backward(f_x2, dx1)

        with torch.no_grad():
            x1 = y1 - f_x2
            dx2 = dy2 + x2.grad
            x2.grad = None

        return x1.detach(), x2.detach(), dx1, dx2


class _ReversibleFunction(torch.autograd.Function):
    """Runs a stack of ReversibleBlocks keeping only the final outputs."""

    @staticmethod
    def forward(ctx, x1: torch.Tensor, x2: torch.Tensor, blocks: nn.ModuleList, *params: torch.Tensor):
        with torch.no_grad():
            for block in blocks:
                x1, x2 = block(x1, x2, record_rng=True)
        ctx.blocks = blocks
        ctx.save_for_backward(x1, x2)
        return x1, x2

    @staticmethod
    def backward(ctx, dy1: torch.Tensor, dy2: torch.Tensor):
        y1, y2 = ctx.saved_tensors
        for block in reversed(ctx.blocks):
            y1, y2, dy1, dy2 = block.backward_pass(y1, y2, dy1, dy2)
        return (dy1, dy2, None) + (None,) * len(ctx.needs_input_grad[3:])


def reversible_sequence(blocks: nn.ModuleList, x1: torch.Tensor, x2: torch.Tensor
                        ) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Apply reversible blocks without storing per-layer activations.

    Parameters are passed through so autograd knows the output depends on
    them; their gradients are accumulated by ReversibleBlock.backward_pass.
    """
    params = [p for p in blocks.parameters() if p.requires_grad]
    return _ReversibleFunction.apply(x1, x2, blocks, *params)
