"""Drift/advantage curves, plateau statistics, and analytical memory
accounting for the cache and attention-score buffers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import KvCache
from .fold import EvalRecord
from .model import ModelConfig

GB = 1e9  # decimal gigabyte; matches the cache-size arithmetic this checks


class MetricsError(ValueError):
    """Missing condition at a depth, or an empty plateau region."""


@dataclass
class DepthCurve:
    depths: list[int]
    drift: list[float]  # mean over windows of nll(kv-fold) - nll(full)
    advantage: list[float]  # mean over windows of nll(isolated) - nll(kv-fold)
    n_windows: int

    def to_dict(self) -> dict:
        return {
            "depths": self.depths,
            "drift": self.drift,
            "advantage": self.advantage,
            "n_windows": self.n_windows,
        }


def drift_advantage(records: list[EvalRecord]) -> DepthCurve:
    """Per-depth means over windows of drift and recurrence advantage."""
    by_key: dict[tuple[int, str, str], float] = {}
    for r in records:
        by_key[(r.depth, r.window_id, r.condition)] = r.nll
    depths = sorted({r.depth for r in records})
    windows = sorted({r.window_id for r in records})
    drift, advantage = [], []
    for d in depths:
        d_vals, a_vals = [], []
        for w in windows:
            try:
                full = by_key[(d, w, "full")]
                iso = by_key[(d, w, "isolated")]
                kvf = by_key[(d, w, "kv-fold")]
            except KeyError as e:
                raise MetricsError(f"missing condition at depth {d}, window {w}") from e
            d_vals.append(kvf - full)
            a_vals.append(iso - kvf)
        drift.append(float(np.mean(d_vals)))
        advantage.append(float(np.mean(a_vals)))
    return DepthCurve(depths=depths, drift=drift, advantage=advantage, n_windows=len(windows))


def plateau_stats(curve: DepthCurve, d_min: int = 7) -> dict:
    """Mean and max-min spread of drift over depths >= d_min."""
    vals = [dr for d, dr in zip(curve.depths, curve.drift) if d >= d_min]
    if not vals:
        raise MetricsError(f"no depths >= {d_min} in curve")
    return {"plateau_mean": float(np.mean(vals)), "plateau_span": float(max(vals) - min(vals))}


def kv_bytes_per_token(config: ModelConfig, bytes_per_element: int) -> int:
    """Cache bytes contributed by one token: K and V across all layers."""
    return config.n_layers * config.n_kv_heads * config.d_head * 2 * bytes_per_element


def attention_scores_bytes(heads: int, rows: int, cols: int, bytes_per_element: int) -> int:
    """Size of one layer's attention-score buffer of shape [heads, rows, cols]."""
    return heads * rows * cols * bytes_per_element


def measured_cache_bytes(cache: KvCache, bytes_per_element: int | None = None) -> int:
    """Actual cache footprint; equals kv_bytes_per_token * tokens for a
    non-evicting policy."""
    total = 0
    for kv in cache.layers:
        rows, n_kv_heads, d_head = kv.keys.shape
        itemsize = bytes_per_element if bytes_per_element is not None else kv.keys.dtype.itemsize
        total += rows * n_kv_heads * d_head * 2 * itemsize
    return total
