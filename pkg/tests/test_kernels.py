import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvcarry.kernels import (
    KernelError,
    Precision,
    matmul,
    rms_norm,
    rope_apply,
    round_emulated_bf16,
    silu,
    softmax_rows,
)

finite_floats = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, width=32)


def naive_matmul(a, b):
    """Independent triple-loop oracle."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((3, 3))
        np.testing.assert_array_equal(matmul(np.eye(3), m), m)

    def test_hand_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[1.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b), [[3.0], [7.0]])

    def test_against_naive_oracle(self, rng):
        a = rng.standard_normal((8, 8))
        b = rng.standard_normal((8, 8))
        got = matmul(a, b, Precision.F64)
        want = naive_matmul(a, b)
        assert np.abs(got - want).max() / np.abs(want).max() <= 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(KernelError):
            matmul(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))

    def test_deterministic(self, rng):
        a = rng.standard_normal((33, 17))
        b = rng.standard_normal((17, 29))
        first = matmul(a, b)
        for _ in range(5):
            assert np.array_equal(matmul(a, b), first)


class TestSoftmaxRows:
    def test_equal_logits_uniform(self):
        x = np.zeros((1, 5))
        mask = np.array([[True, True, True, False, False]])
        out = softmax_rows(x, mask)
        np.testing.assert_allclose(out[0, :3], 1 / 3)
        assert out[0, 3] == 0.0 and out[0, 4] == 0.0

    def test_single_survivor(self):
        out = softmax_rows(np.array([[0.0, 5.0]]), np.array([[True, False]]))
        np.testing.assert_array_equal(out, [[1.0, 0.0]])

    def test_against_direct_formula(self, rng):
        x = rng.standard_normal((4, 16))
        got = softmax_rows(x, precision=Precision.F64)
        want = np.exp(x) / np.exp(x).sum(axis=-1, keepdims=True)
        assert np.abs(got - want).max() <= 1e-12

    def test_rows_sum_to_one(self, rng):
        x = rng.standard_normal((10, 10)) * 30
        mask = rng.random((10, 10)) < 0.5
        mask[:, 0] = True
        out = softmax_rows(x, mask, Precision.F64)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert (out[~mask] == 0.0).all()

    def test_fully_masked_row_errors(self):
        with pytest.raises(KernelError):
            softmax_rows(np.zeros((1, 3)), np.zeros((1, 3), dtype=bool))


class TestRmsNorm:
    def test_all_ones(self):
        x = np.ones(8)
        out = rms_norm(x, np.ones(8), eps=1e-30)
        np.testing.assert_allclose(out, 1.0, atol=1e-12)

    def test_zero_vector(self):
        out = rms_norm(np.zeros(8), np.ones(8), eps=1e-5)
        np.testing.assert_array_equal(out, np.zeros(8))

    def test_against_direct_formula(self, rng):
        x = rng.standard_normal(16)
        g = rng.standard_normal(16)
        eps = 1e-5
        want = x / np.sqrt(np.mean(x**2) + eps) * g
        got = rms_norm(x, g, eps, Precision.F64)
        assert np.abs(got - want).max() <= 1e-12

    def test_bad_eps(self):
        with pytest.raises(KernelError):
            rms_norm(np.ones(4), np.ones(4), eps=0.0)


class TestRope:
    def test_position_zero_identity(self, rng):
        x = rng.standard_normal((3, 2, 8))
        out = rope_apply(x, np.zeros(3, dtype=np.int64), theta=10000.0)
        np.testing.assert_allclose(out, x, atol=1e-15)

    def test_pair_norm_isometry(self, rng):
        x = rng.standard_normal((5, 3, 16))
        out = rope_apply(x, np.arange(5) * 37, theta=10000.0)
        before = np.hypot(x[..., 0::2], x[..., 1::2])
        after = np.hypot(out[..., 0::2], out[..., 1::2])
        np.testing.assert_allclose(after, before, rtol=1e-6)

    def test_closed_form_d4(self):
        # d_head=4, position=1, theta=10000: pair 0 rotates by 1 rad,
        # pair 1 by 10000**(-2/4) = 0.01 rad
        x = np.array([[[1.0, 0.0, 0.0, 1.0]]])
        out = rope_apply(x, np.array([1]), theta=10000.0)
        want = np.array(
            [[[np.cos(1.0), np.sin(1.0), -np.sin(0.01), np.cos(0.01)]]]
        )
        np.testing.assert_allclose(out, want, atol=1e-12)

    def test_odd_d_head_errors(self, rng):
        with pytest.raises(KernelError):
            rope_apply(rng.standard_normal((1, 1, 3)), np.array([0]), 10000.0)


def bf16_grid_oracle(x: float) -> float:
    """Round-to-nearest-even onto the 7-bit-mantissa grid, by enumerating
    the two bracketing representable values at the bit level."""
    import struct

    def bits_of(v: float) -> int:
        return struct.unpack("<I", struct.pack("<f", v))[0]

    def value_of(bits: int) -> float:
        return struct.unpack("<f", struct.pack("<I", bits & 0xFFFFFFFF))[0]

    x = float(np.float32(x))
    if x == 0.0:
        return 0.0
    toward_zero = value_of(bits_of(x) & 0xFFFF0000)  # drop low mantissa bits
    if toward_zero == x:
        return toward_zero
    away = value_of((bits_of(toward_zero) & 0xFFFF0000) + 0x00010000)
    lo, hi = sorted((toward_zero, away))
    if x - lo < hi - x:
        return lo
    if x - lo > hi - x:
        return hi
    # exact tie: pick the candidate whose last kept mantissa bit is even
    return lo if (bits_of(lo) >> 16) & 1 == 0 else hi


class TestBf16Rounding:
    def test_exact_value_unchanged(self):
        assert round_emulated_bf16(np.array([1.0], np.float32))[0] == 1.0

    def test_tie_rounds_to_even(self):
        # 1 + 2**-8 is exactly halfway between 1.0 and 1.0078125
        out = round_emulated_bf16(np.array([1.00390625], np.float32))[0]
        assert out == 1.0  # 1.0 has the even trailing mantissa bit

    @given(hnp.arrays(np.float32, 16, elements=finite_floats))
    def test_idempotent(self, x):
        once = round_emulated_bf16(x)
        np.testing.assert_array_equal(round_emulated_bf16(once), once)

    @given(st.floats(-1e4, 1e4, allow_nan=False, width=32))
    @settings(max_examples=200)
    def test_matches_grid_oracle(self, x):
        got = float(round_emulated_bf16(np.array([x], np.float32))[0])
        assert got == bf16_grid_oracle(x)


class TestSilu:
    def test_matches_direct_formula(self, rng):
        x = rng.standard_normal(64) * 5
        want = x / (1 + np.exp(-x))
        got = silu(x, Precision.F64)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_extreme_inputs_finite(self):
        out = silu(np.array([-1e4, 1e4]), Precision.F64)
        np.testing.assert_allclose(out, [0.0, 1e4], atol=1e-12)
