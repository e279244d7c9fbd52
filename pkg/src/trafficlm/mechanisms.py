"""
RWKV-style and RetNet-style sequence mixers, each in two equivalent forms.

Used as drop-in replacements for linear attention when comparing mechanisms.
"""

import math
from typing import Optional, Union

import torch

from .errors import ConfigError, InvalidDecay, NumericDomain, ShapeError

RWKV_MODES = ("recurrent", "direct")
RETNET_MODES = ("parallel", "recurrent")
RETNET_THETA_BASE = 10000.0


def _check_finite(operation: str, **tensors: torch.Tensor) -> None:
    for name, t in tensors.items():
        if not torch.isfinite(t).all():
            raise NumericDomain(f"{name} contains non-finite entries", operation=operation)


def _check_decay_rates(w: torch.Tensor) -> None:
    if (w < 0).any():
        raise ConfigError("RWKV decay rates must be >= 0", operation="alt-mechanisms.rwkv_attention")


def rwkv_weights(k: torch.Tensor, w: torch.Tensor, causal: bool = True) -> torch.Tensor:
    """
    Per-channel mixing weights exp(-(i-j) w + K_j), normalized over j.

    Returns:
        (..., N, N, d) tensor; entry [i, j, c] weighs V_j[c] in output row i
    """
    n = k.shape[-2]
    i = torch.arange(n, device=k.device).unsqueeze(-1)
    j = torch.arange(n, device=k.device).unsqueeze(0)
    distance = (i - j).abs() if not causal else (i - j).clamp(min=0)
    exponent = -distance.to(k.dtype).unsqueeze(-1) * w[..., None, None, :] + k.unsqueeze(-3)
    if causal:
        exponent = exponent.masked_fill((j > i).unsqueeze(-1), float("-inf"))
    return torch.softmax(exponent, dim=-2)


def rwkv_attention_direct(k: torch.Tensor, v: torch.Tensor, w: torch.Tensor, causal: bool = True) -> torch.Tensor:
    """Direct O(N^2 d) summation of the RWKV weighted average."""
    return (rwkv_weights(k, w, causal) * v.unsqueeze(-3)).sum(dim=-2)


def rwkv_attention_recurrent(k: torch.Tensor, v: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """
    Causal RWKV mixing as a recurrence with a running max-shift.

    State (a, b, p): numerator and denominator scaled by exp(-p), with p the
    largest exponent folded in so far.
    """
    n = k.shape[-2]
    a = v[..., 0, :]
    b = torch.ones_like(a)
    p = k[..., 0, :]
    rows = [a / b]
    for t in range(1, n):
        decayed = p - w
        kt = k[..., t, :]
        p_new = torch.maximum(decayed, kt)
        scale_old = torch.exp(decayed - p_new)
        scale_new = torch.exp(kt - p_new)
        a = scale_old * a + scale_new * v[..., t, :]
        b = scale_old * b + scale_new
        p = p_new
        rows.append(a / b)
    return torch.stack(rows, dim=-2)


def rwkv_attention(k: torch.Tensor, v: torch.Tensor, w: torch.Tensor, causal: bool = True,
                   mode: str = "recurrent") -> torch.Tensor:
    """
    RWKV-style attention: V'_i = sum_j e^{-(i-j)w + K_j} V_j / sum_j e^{-(i-j)w + K_j}.

    Args:
        k: (..., N, d) keys
        v: (..., N, d) values
        w: (d,) or (H, d) non-negative decay rates
        causal: Restrict to j <= i
        mode: "recurrent" (stabilized scan, causal only) or "direct"

    Returns:
        (..., N, d) outputs
    """
    operation = "alt-mechanisms.rwkv_attention"
    if k.shape != v.shape:
        raise ShapeError(f"RWKV needs K and V of equal shape, got {tuple(k.shape)} and {tuple(v.shape)}",
                         operation=operation)
    if w.shape[-1] != k.shape[-1]:
        raise ShapeError(f"decay rates have {w.shape[-1]} channels, keys have {k.shape[-1]}", operation=operation)
    if mode not in RWKV_MODES:
        raise ConfigError(f"mode must be one of {RWKV_MODES}, got {mode!r}", operation=operation)
    _check_finite(operation, K=k, V=v, w=w)
    _check_decay_rates(w)
    if mode == "direct" or not causal:
        return rwkv_attention_direct(k, v, w, causal)
    return rwkv_attention_recurrent(k, v, w)


def default_retnet_gammas(heads: int) -> torch.Tensor:
    """Per-head decays 1 - 2^(-5 - h)."""
    return 1 - torch.pow(2.0, -5.0 - torch.arange(heads, dtype=torch.float64))


def default_retnet_theta(dim: int) -> torch.Tensor:
    """Rotation angles, one per channel pair."""
    if dim % 2:
        raise ShapeError(f"retention needs an even head dimension, got {dim}",
                         operation="alt-mechanisms.retnet_retention")
    return 1.0 / torch.pow(RETNET_THETA_BASE, torch.linspace(0, 1, dim // 2, dtype=torch.float64))


def rotate(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """Rotate channel pairs (2m, 2m+1) of position n by angle n * theta[m]."""
    n = x.shape[-2]
    angles = torch.arange(n, dtype=x.dtype, device=x.device).unsqueeze(-1) * theta.to(x.dtype)
    cos, sin = torch.cos(angles), torch.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
    return rotated.flatten(-2)


def _gamma_tensor(gamma: Union[float, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    gamma = torch.as_tensor(gamma, dtype=like.dtype, device=like.device)
    if ((gamma <= 0) | (gamma >= 1)).any():
        raise InvalidDecay(f"retention decay must lie in (0, 1), got {gamma.tolist()}")
    # per-head gammas broadcast over (..., H, N, N)
    return gamma.reshape(gamma.shape + (1, 1)) if gamma.dim() else gamma


def decay_mask(n: int, gamma: Union[float, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    """D[i, j] = gamma^(i-j) for i >= j, else 0."""
    g = _gamma_tensor(gamma, like)
    i = torch.arange(n, device=like.device).unsqueeze(-1)
    j = torch.arange(n, device=like.device).unsqueeze(0)
    distance = (i - j).clamp(min=0).to(like.dtype)
    return torch.where(i >= j, torch.pow(g, distance), torch.zeros((), dtype=like.dtype))


def retention_with_mask(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Parallel retention (Q K^T * D) V for an explicit mask D."""
    return ((q @ k.transpose(-2, -1)) * mask) @ v


def retnet_retention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, gamma: Union[float, torch.Tensor],
                     theta: Optional[torch.Tensor] = None, mode: str = "parallel") -> torch.Tensor:
    """
    RetNet-style retention.

    Args:
        q, k: (..., N, d) queries and keys, rotated by theta before mixing
        v: (..., N, dv) values
        gamma: Decay in (0, 1), scalar or one per head (dim -3)
        theta: (d/2,) rotation angles; default_retnet_theta(d) when None
        mode: "parallel" or "recurrent"

    Returns:
        (..., N, dv) outputs
    """
    operation = "alt-mechanisms.retnet_retention"
    if mode not in RETNET_MODES:
        raise ConfigError(f"mode must be one of {RETNET_MODES}, got {mode!r}", operation=operation)
    if q.shape != k.shape or q.shape[-2] != v.shape[-2]:
        raise ShapeError(f"retention shapes disagree: Q {tuple(q.shape)}, K {tuple(k.shape)}, V {tuple(v.shape)}",
                         operation=operation)
    _check_finite(operation, Q=q, K=k, V=v)
    if theta is None:
        theta = default_retnet_theta(q.shape[-1])
    q_r, k_r = rotate(q, theta), rotate(k, theta)

    if mode == "parallel":
        return retention_with_mask(q_r, k_r, v, decay_mask(q.shape[-2], gamma, q))

    g = _gamma_tensor(gamma, q)
    state = torch.zeros(*q.shape[:-2], q.shape[-1], v.shape[-1], dtype=q.dtype, device=q.device)
    rows = []
    for t in range(q.shape[-2]):
        state = g * state + k_r[..., t, :].unsqueeze(-1) * v[..., t, :].unsqueeze(-2)
        rows.append((q_r[..., t, :].unsqueeze(-2) @ state).squeeze(-2))
    return torch.stack(rows, dim=-2)


def retnet_scale(head_dim: int) -> float:
    return 1.0 / math.sqrt(head_dim)
