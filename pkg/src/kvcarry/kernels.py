"""Dense numeric kernels with selectable scalar precision.

All kernels are pure functions over numpy arrays. Each kernel validates its
output for NaN/Inf (a kernel producing a non-finite value is a bug, not a
recoverable condition). The emulated-bf16 mode rounds every kernel *output*
to the bf16 representable grid; intermediates stay in f32.
"""

from __future__ import annotations

import enum

import numpy as np


class KernelError(ValueError):
    """Shape mismatch, fully-masked softmax row, or non-finite kernel output."""


class Precision(enum.Enum):
    """Scalar precision of a run.

    F32/F64 are native. BF16 runs arithmetic in f32 but rounds every kernel
    output to the nearest bf16-representable value (8-bit exponent, 7-bit
    mantissa, round-to-nearest-even).
    """

    F32 = "f32"
    F64 = "f64"
    BF16 = "bf16"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float64 if self is Precision.F64 else np.float32)

    @property
    def nll_tol(self) -> float:
        return 1e-12 if self is Precision.F64 else 1e-6

    def finalize(self, x: np.ndarray) -> np.ndarray:
        """Apply output rounding (bf16 mode) and check finiteness."""
        if self is Precision.BF16:
            x = round_emulated_bf16(x)
        if not np.all(np.isfinite(x)):
            raise KernelError("kernel produced non-finite values")
        return x


def round_emulated_bf16(x: np.ndarray) -> np.ndarray:
    """Round each f32 scalar to the nearest bf16-representable value.

    Round-to-nearest-even on the high 16 bits of the IEEE-754 binary32
    encoding. Idempotent: values already on the bf16 grid are unchanged.
    """
    x32 = np.ascontiguousarray(x, dtype=np.float32)
    bits = x32.view(np.uint32)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) & np.uint32(0xFFFF0000)
    return rounded.view(np.float32).reshape(x32.shape)


def matmul(a: np.ndarray, b: np.ndarray, precision: Precision = Precision.F64) -> np.ndarray:
    """Matrix product. Deterministic per call: identical inputs give
    bit-identical outputs within a run (fixed BLAS blocking)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise KernelError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dt = precision.dtype
    out = np.matmul(a.astype(dt, copy=False), b.astype(dt, copy=False))
    return precision.finalize(out)


def softmax_rows(
    x: np.ndarray,
    mask: np.ndarray | None = None,
    precision: Precision = Precision.F64,
) -> np.ndarray:
    """Row-wise softmax over the last axis with hard masking.

    `mask` is boolean, True = entry participates. Masked entries are excluded
    from the support entirely, so their output probability is exactly 0.0
    (not exp(-1e9)); eviction membership checks rely on this.
    """
    dt = precision.dtype
    x = x.astype(dt, copy=False)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    if mask.shape != x.shape:
        raise KernelError(f"mask shape {mask.shape} != input shape {x.shape}")
    if not mask.any(axis=-1).all():
        raise KernelError("softmax row with no unmasked entries")
    neg_inf = np.array(-np.inf, dtype=dt)
    shifted = np.where(mask, x, neg_inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted, where=mask, out=np.zeros_like(shifted)), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)
    return precision.finalize(out)


def rms_norm(
    x: np.ndarray,
    gain: np.ndarray,
    eps: float,
    precision: Precision = Precision.F64,
) -> np.ndarray:
    """x / sqrt(mean(x^2) + eps) * gain, row-wise over the last axis."""
    if x.shape[-1] != gain.shape[-1]:
        raise KernelError(f"rms_norm length mismatch: {x.shape[-1]} vs {gain.shape[-1]}")
    if eps <= 0:
        raise KernelError("rms_norm eps must be > 0")
    dt = precision.dtype
    x = x.astype(dt, copy=False)
    ms = np.mean(np.square(x), axis=-1, keepdims=True)
    out = x / np.sqrt(ms + dt.type(eps)) * gain.astype(dt, copy=False)
    return precision.finalize(out)


def rope_apply(
    x: np.ndarray,
    positions: np.ndarray,
    theta: float,
    precision: Precision = Precision.F64,
) -> np.ndarray:
    """Rotary position embedding over a [tokens, heads, d_head] tensor.

    Channel pair (2i, 2i+1) of the token at absolute position p is rotated
    by angle p * theta**(-2i/d_head). Norm-preserving per pair.
    """
    if x.ndim != 3:
        raise KernelError(f"rope_apply expects 3D input, got shape {x.shape}")
    tokens, _, d_head = x.shape
    if d_head % 2 != 0:
        raise KernelError(f"rope_apply requires even d_head, got {d_head}")
    positions = np.asarray(positions)
    if positions.shape != (tokens,):
        raise KernelError("positions length must equal token count")
    dt = precision.dtype
    x = x.astype(dt, copy=False)
    inv_freq = dt.type(theta) ** (-np.arange(0, d_head, 2, dtype=dt) / dt.type(d_head))
    angles = positions.astype(dt)[:, None] * inv_freq[None, :]  # [tokens, d_head/2]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return precision.finalize(out)


def silu(x: np.ndarray, precision: Precision = Precision.F64) -> np.ndarray:
    """x * sigmoid(x), computed stably for large |x|."""
    dt = precision.dtype
    x = x.astype(dt, copy=False)
    out = x * (0.5 * (1.0 + np.tanh(0.5 * x)))
    return precision.finalize(out)
