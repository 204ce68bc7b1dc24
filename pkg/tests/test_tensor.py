import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colorctrl.errors import ShapeError
from colorctrl.tensor import Rng, gelu, layer_norm, matmul, rms_norm, seeded_normal, silu, softmax_rows

from oracles import naive_matmul, scalar_softmax

_MASK = (1 << 64) - 1


def splitmix64_reference(seed, n):
    """Textbook SplitMix64 in Python integers."""
    state, out = seed & _MASK, []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & _MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        out.append(z ^ (z >> 31))
    return out


@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_matmul_matches_naive_loop_bitwise(m, k, n, seed):
    r = np.random.default_rng(seed)
    a = r.standard_normal((m, k)).astype(np.float32)
    b = r.standard_normal((k, n)).astype(np.float32)
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_large_shapes_match_naive_loop(rng):
    a = rng.standard_normal((13, 37)).astype(np.float32)
    b = rng.standard_normal((37, 11)).astype(np.float32)
    assert np.array_equal(matmul(a, b), naive_matmul(a, b))


def test_matmul_row_subset_is_bitwise_stable(rng):
    a = rng.standard_normal((23, 16)).astype(np.float32)
    b = rng.standard_normal((16, 30)).astype(np.float32)
    assert np.array_equal(matmul(a, b)[5:], matmul(a[5:], b))


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        matmul(np.ones(3), np.ones((3, 1)))


@given(st.integers(1, 8), st.integers(1, 12), st.floats(0.05, 4.0), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_softmax_matches_scalar_reference(m, n, scale, seed):
    s = (np.random.default_rng(seed).standard_normal((m, n)) * 5).astype(np.float32)
    assert np.array_equal(softmax_rows(s, scale), scalar_softmax(s, scale))


def test_softmax_rows_sum_to_one_and_handle_pad_bias(rng):
    s = rng.standard_normal((6, 10)).astype(np.float32)
    s[:, :3] += np.float32(-1e9)
    p = softmax_rows(s, 0.25)
    assert np.all(p[:, :3] == 0.0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        softmax_rows(np.zeros((2, 2)), 0.0)


def test_layer_norm_against_float64(rng):
    x = rng.standard_normal((5, 24)).astype(np.float32) * 3 + 1
    ref = (x - x.mean(1, keepdims=True)) / np.sqrt(x.astype(np.float64).var(1, keepdims=True) + 1e-6)
    assert np.allclose(layer_norm(x), ref, atol=1e-5)


def test_rms_norm_scales_rows_to_gain(rng):
    x = rng.standard_normal((7, 16)).astype(np.float32)
    y = rms_norm(x, 2.0)
    assert np.allclose(np.sqrt((y.astype(np.float64) ** 2).mean(1)), 2.0, atol=1e-5)


def test_activations_against_closed_forms():
    x = np.linspace(-4, 4, 17).astype(np.float32)
    ref_gelu = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert np.allclose(gelu(x), ref_gelu, atol=1e-6)
    assert np.allclose(silu(x), x / (1 + np.exp(-x.astype(np.float64))), atol=1e-6)


def test_rng_matches_splitmix64_reference():
    assert [int(v) for v in Rng(0).next_u64(4)] == splitmix64_reference(0, 4)
    assert [int(v) for v in Rng(42).next_u64(3)] == splitmix64_reference(42, 3)
    # published first output of SplitMix64 seeded with 0
    assert int(Rng(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF


def test_rng_stream_is_split_invariant():
    a = Rng(7)
    joined = np.concatenate([a.next_u64(3), a.next_u64(5)])
    assert np.array_equal(joined, Rng(7).next_u64(8))
    assert a.counter == 8


def test_uniform_is_open_interval_and_matches_bits():
    r = Rng(3)
    u = r.uniform(1000)
    assert np.all((u > 0) & (u < 1))
    bits = np.array(splitmix64_reference(3, 1000), dtype=np.uint64) >> np.uint64(11)
    assert np.array_equal(u, (bits.astype(np.float64) + 0.5) * 2.0**-53)


def test_seeded_normal_moments_and_determinism():
    z = seeded_normal(Rng(11), 200_001)
    assert z.dtype == np.float32 and z.shape == (200_001,)
    assert abs(float(z.mean())) < 0.01
    assert abs(float(z.std()) - 1.0) < 0.01
    assert np.array_equal(z, seeded_normal(Rng(11), 200_001))
    assert np.all(seeded_normal(Rng(1), 5, 2.5, 0.0) == np.float32(2.5))
    with pytest.raises(ValueError):
        seeded_normal(Rng(1), 3, 0.0, -1.0)
