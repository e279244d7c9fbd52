"""
Tests for the attention core: linear attention against its direct form,
local windows, token shift, GLU feed-forward and reversible blocks.
"""

import copy
from typing import Tuple

import numpy as np
import pytest
import torch
import torch.nn as nn

from trafficlm.attention import (
    Deterministic,
    GLUFeedForward,
    ReversibleBlock,
    causal_mask,
    glu_ffn,
    kernel_attention_oracle,
    linear_attention,
    linear_attention_recurrent,
    local_attention,
    reversible_block_forward,
    reversible_block_inverse,
    reversible_sequence,
    token_shift,
    vaswani_attention,
)
from trafficlm.errors import ConfigError, DegenerateNormalizer, NumericDomain, ShapeError

TOLERANCE = 1e-9
SWEEP_SEEDS = range(100)


def random_qkv(n: int = 10, d: int = 4, batch=(2, 3), seed: int = 0):
    generator = torch.Generator().manual_seed(seed)
    return tuple(torch.randn(*batch, n, d, generator=generator, dtype=torch.float64) for _ in range(3))


def test_causal_linear_attention_matches_direct_sum() -> None:
    """Chunked scan, explicit recurrence and the O(N^2) sum agree."""
    q, k, v = random_qkv()
    oracle = kernel_attention_oracle(q, k, v, causal=True)
    for chunk_size in (1, 3, 4, 10, 64):
        fast = linear_attention(q, k, v, causal=True, eps=1e-15, chunk_size=chunk_size)
        assert torch.allclose(fast, oracle, atol=TOLERANCE), f"chunk_size={chunk_size} diverges from the direct sum"
    recurrent = linear_attention_recurrent(q, k, v, eps=1e-15)
    assert torch.allclose(recurrent, oracle, atol=TOLERANCE)
    print("✓ test_causal_linear_attention_matches_direct_sum passed")


def test_non_causal_linear_attention_matches_direct_sum() -> None:
    q, k, v = random_qkv(n=7)
    oracle = kernel_attention_oracle(q, k, v, causal=False)
    fast = linear_attention(q, k, v, causal=False, eps=1e-15)
    assert torch.allclose(fast, oracle, atol=TOLERANCE)
    print("✓ test_non_causal_linear_attention_matches_direct_sum passed")


def sweep_shape(seed: int) -> Tuple[int, int, int]:
    """(N, d, d_v) with N <= 64 and widths <= 32, drawn from the seed."""
    rng = np.random.default_rng(seed)
    return int(rng.integers(1, 65)), int(rng.integers(1, 33)), int(rng.integers(1, 33))


@pytest.mark.parametrize("seed", SWEEP_SEEDS)
def test_linear_attention_matches_direct_sum_on_random_shapes(seed: int) -> None:
    n, d, dv = sweep_shape(seed)
    generator = torch.Generator().manual_seed(seed)
    q = torch.randn(2, n, d, generator=generator, dtype=torch.float64)
    k = torch.randn(2, n, d, generator=generator, dtype=torch.float64)
    v = torch.randn(2, n, dv, generator=generator, dtype=torch.float64)
    chunk_size = (1, 5, 16, 64)[seed % 4]
    for causal in (True, False):
        oracle = kernel_attention_oracle(q, k, v, causal=causal)
        fast = linear_attention(q, k, v, causal=causal, eps=1e-15, chunk_size=chunk_size)
        assert torch.allclose(fast, oracle, atol=TOLERANCE), f"seed={seed} N={n} d={d} causal={causal}"
    recurrent = linear_attention_recurrent(q, k, v, eps=1e-15)
    assert torch.allclose(recurrent, kernel_attention_oracle(q, k, v), atol=TOLERANCE), f"seed={seed}"


def test_causal_outputs_ignore_the_future() -> None:
    q, k, v = random_qkv(n=12)
    base = linear_attention(q, k, v, chunk_size=4)
    q2, k2, v2 = (t.clone() for t in (q, k, v))
    for t in (q2, k2, v2):
        t[..., 7:, :] += 5.0
    changed = linear_attention(q2, k2, v2, chunk_size=4)
    assert torch.allclose(base[..., :7, :], changed[..., :7, :], atol=TOLERANCE), "Rows before 7 saw later positions"
    assert not torch.allclose(base[..., 7:, :], changed[..., 7:, :])

    local_base = local_attention(q, k, v, window=3)
    local_changed = local_attention(q2, k2, v2, window=3)
    assert torch.allclose(local_base[..., :7, :], local_changed[..., :7, :], atol=TOLERANCE)
    print("✓ test_causal_outputs_ignore_the_future passed")


def banded_reference(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, window: int) -> torch.Tensor:
    n = q.shape[-2]
    i = torch.arange(n).unsqueeze(-1)
    j = torch.arange(n).unsqueeze(0)
    blocked = (j > i) | (j <= i - window)
    scores = q @ k.transpose(-2, -1) / q.shape[-1] ** 0.5
    return torch.softmax(scores.masked_fill(blocked, float("-inf")), dim=-1) @ v


def test_local_attention_matches_banded_softmax() -> None:
    q, k, v = random_qkv(n=11)
    for window in (1, 3, 4, 11, 20):
        out = local_attention(q, k, v, window)
        expected = banded_reference(q, k, v, window)
        assert torch.allclose(out, expected, atol=TOLERANCE), f"window={window} disagrees with banded softmax"
    with pytest.raises(ConfigError):
        local_attention(q, k, v, 0)
    print("✓ test_local_attention_matches_banded_softmax passed")


def test_vaswani_attention_first_row_copies_value() -> None:
    q, k, v = random_qkv(n=5)
    out = vaswani_attention(q, k, v, causal=True)
    assert torch.allclose(out[..., 0, :], v[..., 0, :])
    assert causal_mask(3).tolist() == [[False, True, True], [False, False, True], [False, False, False]]
    print("✓ test_vaswani_attention_first_row_copies_value passed")


def test_attention_input_errors() -> None:
    q, k, v = random_qkv(n=4)
    with pytest.raises(ShapeError):
        linear_attention(q, k[..., :3, :], v)
    bad = q.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericDomain):
        linear_attention(bad, k, v)
    with pytest.raises(ConfigError):
        linear_attention(q, k, v, eps=0.0)
    with pytest.raises(DegenerateNormalizer):
        kernel_attention_oracle(q, k, v, feature_map=torch.zeros_like)
    print("✓ test_attention_input_errors passed")


def test_token_shift_example() -> None:
    x = torch.arange(1.0, 9.0).reshape(2, 4)
    shifted = token_shift(x)
    assert shifted.tolist() == [[1.0, 2.0, 0.0, 0.0], [5.0, 6.0, 3.0, 4.0]], f"Got {shifted.tolist()}"
    with pytest.raises(ShapeError):
        token_shift(torch.zeros(3, 5))
    print("✓ test_token_shift_example passed")


def test_glu_ffn() -> None:
    generator = torch.Generator().manual_seed(1)
    x = torch.randn(5, 4, generator=generator, dtype=torch.float64)
    w_gate, w_value = (torch.randn(4, 6, generator=generator, dtype=torch.float64) for _ in range(2))
    w_out = torch.randn(6, 4, generator=generator, dtype=torch.float64)
    expected = (torch.sigmoid(x @ w_gate) * (x @ w_gate) * (x @ w_value)) @ w_out
    assert torch.allclose(glu_ffn(x, w_gate, w_value, w_out), expected, atol=TOLERANCE)
    with pytest.raises(ShapeError):
        glu_ffn(x, w_gate, w_value[:, :5], w_out)

    layer = GLUFeedForward(4, 6).double()
    assert layer(x).shape == (5, 4)
    print("✓ test_glu_ffn passed")


def small_sublayers(dim: int = 4, seed: int = 0):
    torch.manual_seed(seed)
    f = nn.Sequential(nn.Linear(dim, dim), nn.Tanh()).double()
    g = nn.Sequential(nn.Linear(dim, dim), nn.Tanh()).double()
    return f, g


def test_reversible_block_inverse_recovers_inputs() -> None:
    f, g = small_sublayers()
    x1, x2, _ = random_qkv(n=6, batch=(2,))
    with torch.no_grad():
        y1, y2 = reversible_block_forward(x1, x2, f, g)
        r1, r2 = reversible_block_inverse(y1, y2, f, g)
    assert torch.allclose(r1, x1, atol=1e-12) and torch.allclose(r2, x2, atol=1e-12)
    print("✓ test_reversible_block_inverse_recovers_inputs passed")


def test_reversible_gradients_match_stored_activations() -> None:
    """Recomputing activations in backward gives the same gradients as storing them."""
    blocks = nn.ModuleList([ReversibleBlock(*small_sublayers(seed=s)) for s in range(3)])
    plain = copy.deepcopy(blocks)
    x1, x2, _ = random_qkv(n=6, batch=(2,), seed=4)

    a1, a2 = x1.clone().requires_grad_(True), x2.clone().requires_grad_(True)
    y1, y2 = reversible_sequence(blocks, a1, a2)
    (y1.pow(2).sum() + y2.sin().sum()).backward()

    b1, b2 = x1.clone().requires_grad_(True), x2.clone().requires_grad_(True)
    z1, z2 = b1, b2
    for block in plain:
        z1, z2 = block(z1, z2)
    (z1.pow(2).sum() + z2.sin().sum()).backward()

    assert torch.allclose(y1, z1, atol=TOLERANCE) and torch.allclose(y2, z2, atol=TOLERANCE)
    assert torch.allclose(a1.grad, b1.grad, atol=1e-8) and torch.allclose(a2.grad, b2.grad, atol=1e-8)
    for (name, p), q in zip(blocks.named_parameters(), plain.parameters()):
        assert torch.allclose(p.grad, q.grad, atol=1e-8), f"Gradient of {name} differs"
    print("✓ test_reversible_gradients_match_stored_activations passed")


def test_deterministic_replays_dropout() -> None:
    layer = Deterministic(nn.Dropout(0.5))
    x = torch.ones(50, dtype=torch.float64)
    first = layer(x, record_rng=True)
    torch.rand(10)
    replay = layer(x, set_rng=True)
    assert torch.equal(first, replay), "Replayed dropout mask differs"
    print("✓ test_deterministic_replays_dropout passed")


def test_gradcheck_attention() -> None:
    q, k, v = (t.requires_grad_(True) for t in random_qkv(n=5, d=3, batch=(1,)))
    assert torch.autograd.gradcheck(lambda a, b, c: linear_attention(a, b, c, chunk_size=2), (q, k, v))
    assert torch.autograd.gradcheck(lambda a, b, c: local_attention(a, b, c, window=2), (q, k, v))
    print("✓ test_gradcheck_attention passed")


def run_all_tests() -> None:
    """Run all tests."""
    print("=" * 50)
    print("Running attention tests")
    print("=" * 50)
    print()

    test_causal_linear_attention_matches_direct_sum()
    test_non_causal_linear_attention_matches_direct_sum()
    for seed in SWEEP_SEEDS:
        test_linear_attention_matches_direct_sum_on_random_shapes(seed)
    print("✓ test_linear_attention_matches_direct_sum_on_random_shapes passed")
    test_causal_outputs_ignore_the_future()
    test_local_attention_matches_banded_softmax()
    test_vaswani_attention_first_row_copies_value()
    test_attention_input_errors()
    test_token_shift_example()
    test_glu_ffn()
    test_reversible_block_inverse_recovers_inputs()
    test_reversible_gradients_match_stored_activations()
    test_deterministic_replays_dropout()
    test_gradcheck_attention()

    print()
    print("=" * 50)
    print("All tests passed!")
    print("=" * 50)


if __name__ == "__main__":
    run_all_tests()
