"""KV-cache container and post-append cache policies.

After every chunk forward the new per-layer K/V rows are appended and the
cache's policy is applied exactly once. Policies:

* FoldAccumulate  - identity; the cache is a pure fold accumulator and grows.
* SinkWindow      - keep the n_sinks earliest positions plus the `window`
                    most recent ones, evict the middle (position-preserving,
                    no re-rotation of the surviving keys).
* QuantRoundTrip  - rows appended in the current step are replaced by
                    dequantize(quantize(row)); each row is round-tripped
                    exactly once over its lifetime.
* UniformDecay    - every value row is scaled by gamma after each step
                    (keys untouched).
* AttentionPrune  - keep the `keep` rows with the highest accumulated
                    attention mass, plus always the current step's rows;
                    ties break toward more recent positions.

`expected_positions` is the pure bookkeeping simulation of the resulting
position set: no tensors, just arithmetic over positions. The engine cache
must agree with it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .kernels import Precision
from .model import LayerKV, ModelConfig, ModelError, empty_prefix


class CacheError(ValueError):
    """Position regression/collision or malformed policy input."""


@dataclass(frozen=True)
class FoldAccumulate:
    name = "fold"


@dataclass(frozen=True)
class SinkWindow:
    n_sinks: int
    window: int
    name = "sink-window"

    def __post_init__(self):
        if self.n_sinks < 0 or self.window < 0 or self.n_sinks + self.window < 1:
            raise CacheError("SinkWindow capacity n_sinks + window must be >= 1")

    @property
    def capacity(self) -> int:
        return self.n_sinks + self.window


@dataclass(frozen=True)
class QuantRoundTrip:
    bits: int
    name = "quant"

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise CacheError("QuantRoundTrip supports bits in {4, 8}")


@dataclass(frozen=True)
class UniformDecay:
    gamma: float
    name = "decay"

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise CacheError("UniformDecay gamma must be in (0, 1]")


@dataclass(frozen=True)
class AttentionPrune:
    keep: int
    name = "prune"

    def __post_init__(self):
        if self.keep < 1:
            raise CacheError("AttentionPrune keep must be >= 1")


CachePolicy = FoldAccumulate | SinkWindow | QuantRoundTrip | UniformDecay | AttentionPrune


def quantize_roundtrip(x: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric absmax int-N round trip per (kv_head, channel) group.

    scale = max|x| / (2^(bits-1) - 1) over the group's rows; output is
    round(x/scale)*scale. An all-zero group maps to all zeros. The per-element
    reconstruction error is bounded by scale/2.
    """
    if bits not in (4, 8):
        raise CacheError("bits must be 4 or 8")
    if x.ndim != 3:
        raise CacheError("expected [rows, kv_heads, d_head] input")
    qmax = 2 ** (bits - 1) - 1
    scale = np.abs(x).max(axis=0, keepdims=True) / qmax  # [1, kv_heads, d_head]
    safe = np.where(scale > 0, scale, 1.0)
    codes = np.clip(np.round(x / safe), -qmax - 1, qmax)
    out = (codes * safe).astype(x.dtype)
    return np.where(scale > 0, out, 0.0).astype(x.dtype)


@dataclass
class KvCache:
    """Per-layer accumulated KV rows plus policy bookkeeping.

    All layers always hold the same positions. `stats` accumulates the
    attention probability mass each cached position has received (used only
    by AttentionPrune); it stays aligned with the position rows.
    """

    layers: list[LayerKV]
    policy: CachePolicy = field(default_factory=FoldAccumulate)
    stats: np.ndarray | None = None  # [seq], float64
    _pending: int = 0  # rows appended since the last apply_policy

    @staticmethod
    def empty(config: ModelConfig, policy: CachePolicy, precision: Precision) -> "KvCache":
        return KvCache(layers=empty_prefix(config, precision), policy=policy)

    @property
    def positions(self) -> np.ndarray:
        return self.layers[0].positions

    def __len__(self) -> int:
        return len(self.layers[0])

    def append(self, new_kv: list[LayerKV]) -> None:
        if len(new_kv) != len(self.layers):
            raise CacheError("layer count mismatch on append")
        if len(self) and len(new_kv[0]) and new_kv[0].positions[0] <= self.positions[-1]:
            raise CacheError("appended positions must exceed existing max position")
        self.layers = [
            LayerKV(
                keys=np.concatenate([old.keys, new.keys], axis=0),
                values=np.concatenate([old.values, new.values], axis=0),
                positions=np.concatenate([old.positions, new.positions]),
            )
            for old, new in zip(self.layers, new_kv)
        ]
        added = len(new_kv[0])
        if self.stats is not None:
            self.stats = np.concatenate([self.stats, np.zeros(added)])
        self._pending += added

    def record_attention_mass(self, sums: np.ndarray) -> None:
        """Accumulate per-position attention mass from the last forward."""
        sums = np.asarray(sums, dtype=np.float64)
        if sums.shape != (len(self),):
            raise CacheError(f"attention sums length {sums.shape} != cache length {len(self)}")
        if np.any(sums < 0):
            raise CacheError("attention sums must be nonnegative")
        if self.stats is None:
            self.stats = np.zeros(len(self))
        self.stats = self.stats + sums

    def apply_policy(self) -> None:
        """Apply the post-append cache transformation once per step."""
        policy = self.policy
        if isinstance(policy, FoldAccumulate):
            pass
        elif isinstance(policy, SinkWindow):
            self._retain(_sink_window_keep(self.positions, policy))
        elif isinstance(policy, QuantRoundTrip):
            if self._pending:
                for kv in self.layers:
                    fresh = kv.keys[-self._pending:]
                    kv.keys[-self._pending:] = quantize_roundtrip(fresh, policy.bits)
                    kv.values[-self._pending:] = quantize_roundtrip(
                        kv.values[-self._pending:], policy.bits
                    )
        elif isinstance(policy, UniformDecay):
            if policy.gamma != 1.0:
                for kv in self.layers:
                    kv.values *= kv.values.dtype.type(policy.gamma)
        elif isinstance(policy, AttentionPrune):
            self._retain(self._prune_keep(policy))
        else:
            raise CacheError(f"unknown policy {policy!r}")
        self._pending = 0

    def _prune_keep(self, policy: AttentionPrune) -> np.ndarray:
        n = len(self)
        if n <= policy.keep:
            return np.arange(n)
        stats = self.stats if self.stats is not None else np.zeros(n)
        current = np.arange(n - self._pending, n)  # this step's rows always survive
        older = np.arange(n - self._pending)
        budget = max(policy.keep - len(current), 0)
        if budget >= len(older):
            chosen = older
        elif budget == 0:
            chosen = older[:0]
        else:
            # stable sort on (-mass, -position): highest mass first, recency
            # breaking ties
            order = np.lexsort((-older, -stats[older]))
            chosen = older[order[:budget]]
        return np.sort(np.concatenate([chosen, current]))

    def _retain(self, idx: np.ndarray) -> None:
        self.layers = [
            LayerKV(keys=kv.keys[idx], values=kv.values[idx], positions=kv.positions[idx])
            for kv in self.layers
        ]
        if self.stats is not None:
            self.stats = self.stats[idx]


def _sink_window_keep(positions: np.ndarray, policy: SinkWindow) -> np.ndarray:
    n = len(positions)
    if n <= policy.capacity:
        return np.arange(n)
    keep = np.zeros(n, dtype=bool)
    keep[: policy.n_sinks] = True  # positions are sorted, sinks are earliest
    if policy.window:
        keep[n - policy.window:] = True
    return np.flatnonzero(keep)


def expected_positions(policy: CachePolicy, chunk_lengths: list[int]) -> list[int]:
    """Pure bookkeeping simulation of the cached position set.

    Appends chunks of the given lengths at consecutive positions starting at
    0, applying the policy's membership rule after each append. Policies that
    never evict (fold, quant, decay) keep everything. AttentionPrune is
    tensor-dependent and not covered here.
    """
    if isinstance(policy, AttentionPrune):
        raise CacheError("AttentionPrune membership depends on attention mass")
    held: list[int] = []
    next_pos = 0
    for length in chunk_lengths:
        held.extend(range(next_pos, next_pos + length))
        next_pos += length
        if isinstance(policy, SinkWindow) and len(held) > policy.capacity:
            held = held[: policy.n_sinks] + held[len(held) - policy.window:]
    return held
