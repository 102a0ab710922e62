"""Decoder-only transformer forward pass over one chunk.

A chunk forward attends over an optional per-layer KV prefix (the carried
cache) plus itself causally, applies RoPE with absolute positions, and
returns next-token logits together with the chunk's newly produced per-layer
keys/values. Keys are stored post-RoPE so a carried cache never needs
re-rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import Precision, matmul, rms_norm, rope_apply, silu, softmax_rows


class ModelError(ValueError):
    """Configuration, shape, or position-bookkeeping error."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    max_position: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ModelError("d_model must equal n_heads * d_head")
        if self.n_heads % self.n_kv_heads != 0:
            raise ModelError("n_heads must be divisible by n_kv_heads")
        if self.vocab_size < 2:
            raise ModelError("vocab_size must be >= 2")
        if self.max_position < 1:
            raise ModelError("max_position must be >= 1")
        if min(self.n_layers, self.d_ff, self.d_head) < 1:
            raise ModelError("n_layers, d_ff, d_head must be >= 1")


@dataclass
class LayerWeights:
    attn_norm_gain: np.ndarray  # [d_model]
    wq: np.ndarray  # [d_model, n_heads*d_head]
    wk: np.ndarray  # [d_model, n_kv_heads*d_head]
    wv: np.ndarray  # [d_model, n_kv_heads*d_head]
    wo: np.ndarray  # [n_heads*d_head, d_model]
    mlp_norm_gain: np.ndarray  # [d_model]
    w_gate: np.ndarray  # [d_model, d_ff]
    w_up: np.ndarray  # [d_model, d_ff]
    w_down: np.ndarray  # [d_ff, d_model]


@dataclass
class Weights:
    token_embedding: np.ndarray  # [vocab, d_model]
    layers: list[LayerWeights]
    final_norm_gain: np.ndarray  # [d_model]
    lm_head: np.ndarray  # [d_model, vocab]

    def validate(self, config: ModelConfig) -> None:
        c = config
        expect = {
            "token_embedding": (c.vocab_size, c.d_model),
            "final_norm_gain": (c.d_model,),
            "lm_head": (c.d_model, c.vocab_size),
        }
        for name, shape in expect.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ModelError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name}: non-finite entries")
        if len(self.layers) != c.n_layers:
            raise ModelError(f"expected {c.n_layers} layers, got {len(self.layers)}")
        per_layer = {
            "attn_norm_gain": (c.d_model,),
            "wq": (c.d_model, c.n_heads * c.d_head),
            "wk": (c.d_model, c.n_kv_heads * c.d_head),
            "wv": (c.d_model, c.n_kv_heads * c.d_head),
            "wo": (c.n_heads * c.d_head, c.d_model),
            "mlp_norm_gain": (c.d_model,),
            "w_gate": (c.d_model, c.d_ff),
            "w_up": (c.d_model, c.d_ff),
            "w_down": (c.d_ff, c.d_model),
        }
        for i, lw in enumerate(self.layers):
            for name, shape in per_layer.items():
                arr = getattr(lw, name)
                if arr.shape != shape:
                    raise ModelError(f"layer.{i}.{name}: expected {shape}, got {arr.shape}")
                if not np.all(np.isfinite(arr)):
                    raise ModelError(f"layer.{i}.{name}: non-finite entries")


def random_weights(config: ModelConfig, seed: int, precision: Precision = Precision.F64) -> Weights:
    """Seeded Gaussian init, each matrix scaled by 1/sqrt(fan_in).

    Always drawn in f64 from the same stream and then cast, so the same seed
    describes the same model across precisions.
    """
    rng = np.random.default_rng(seed)
    c = config
    dt = precision.dtype

    def mat(fan_in: int, fan_out: int) -> np.ndarray:
        return (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dt)

    layers = []
    for _ in range(c.n_layers):
        layers.append(
            LayerWeights(
                attn_norm_gain=np.ones(c.d_model, dtype=dt),
                wq=mat(c.d_model, c.n_heads * c.d_head),
                wk=mat(c.d_model, c.n_kv_heads * c.d_head),
                wv=mat(c.d_model, c.n_kv_heads * c.d_head),
                wo=mat(c.n_heads * c.d_head, c.d_model),
                mlp_norm_gain=np.ones(c.d_model, dtype=dt),
                w_gate=mat(c.d_model, c.d_ff),
                w_up=mat(c.d_model, c.d_ff),
                w_down=mat(c.d_ff, c.d_model),
            )
        )
    return Weights(
        token_embedding=mat(c.d_model, c.vocab_size).T.copy(),
        layers=layers,
        final_norm_gain=np.ones(c.d_model, dtype=dt),
        lm_head=mat(c.d_model, c.vocab_size),
    )


@dataclass
class LayerKV:
    """One layer's cached keys/values with their absolute token positions."""

    keys: np.ndarray  # [seq, n_kv_heads, d_head], post-RoPE
    values: np.ndarray  # [seq, n_kv_heads, d_head]
    positions: np.ndarray  # [seq], int64, strictly increasing

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        n = len(self.positions)
        if self.keys.shape[0] != n or self.values.shape[0] != n:
            raise ModelError("keys/values/positions lengths differ")
        if self.keys.shape != self.values.shape:
            raise ModelError("keys and values shapes differ")
        if n > 1 and not np.all(np.diff(self.positions) > 0):
            raise ModelError("positions must be strictly increasing")

    def __len__(self) -> int:
        return len(self.positions)

    @staticmethod
    def empty(config: ModelConfig, precision: Precision) -> "LayerKV":
        dt = precision.dtype
        shape = (0, config.n_kv_heads, config.d_head)
        return LayerKV(np.zeros(shape, dt), np.zeros(shape, dt), np.zeros(0, np.int64))


def empty_prefix(config: ModelConfig, precision: Precision) -> list[LayerKV]:
    return [LayerKV.empty(config, precision) for _ in range(config.n_layers)]


@dataclass
class ForwardResult:
    logits: np.ndarray  # [chunk_len, vocab]
    new_kv: list[LayerKV]
    attention_mass: np.ndarray | None = None  # [prefix_len + chunk_len]


def _batched_matmul(a: np.ndarray, b: np.ndarray, precision: Precision) -> np.ndarray:
    return precision.finalize(np.matmul(a, b))


def forward_chunk(
    config: ModelConfig,
    weights: Weights,
    tokens,
    prefix: list[LayerKV] | None = None,
    start_position: int = 0,
    precision: Precision = Precision.F64,
    collect_attention: bool = False,
) -> ForwardResult:
    """Forward one chunk with full visibility of the prefix cache.

    Query row i (absolute position start_position+i) attends over every
    prefix row plus the chunk's own rows at absolute positions <= its own.
    Returns logits and the chunk's per-layer post-RoPE keys and raw values.
    """
    c = config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ModelError("tokens must be a nonempty 1D sequence")
    if tokens.min() < 0 or tokens.max() >= c.vocab_size:
        raise ModelError("token id out of vocab range")
    n = len(tokens)
    if start_position + n > c.max_position:
        raise ModelError(
            f"position overflow: {start_position}+{n} > max_position {c.max_position}"
        )
    if prefix is None:
        prefix = empty_prefix(c, precision)
    if len(prefix) != c.n_layers:
        raise ModelError(f"prefix has {len(prefix)} layers, config has {c.n_layers}")
    for kv in prefix:
        if len(kv) and kv.positions[-1] >= start_position:
            raise ModelError("prefix positions must all be < start_position")

    dt = precision.dtype
    positions = start_position + np.arange(n, dtype=np.int64)
    group = c.n_heads // c.n_kv_heads
    scale = dt.type(1.0 / np.sqrt(c.d_head))

    x = precision.finalize(weights.token_embedding.astype(dt, copy=False)[tokens])
    new_kv: list[LayerKV] = []
    mass = None

    for layer_idx in range(c.n_layers):
        lw = weights.layers[layer_idx]
        pre = prefix[layer_idx]

        h = rms_norm(x, lw.attn_norm_gain, c.norm_eps, precision)
        q = matmul(h, lw.wq, precision).reshape(n, c.n_heads, c.d_head)
        k = matmul(h, lw.wk, precision).reshape(n, c.n_kv_heads, c.d_head)
        v = matmul(h, lw.wv, precision).reshape(n, c.n_kv_heads, c.d_head)
        q = rope_apply(q, positions, c.rope_theta, precision)
        k = rope_apply(k, positions, c.rope_theta, precision)

        keys = np.concatenate([pre.keys.astype(dt, copy=False), k], axis=0)
        vals = np.concatenate([pre.values.astype(dt, copy=False), v], axis=0)
        key_pos = np.concatenate([pre.positions, positions])

        # [n_heads, n, d_head] queries against [n_heads, S, d_head] keys;
        # each group of `group` query heads shares one kv head.
        qh = q.transpose(1, 0, 2)
        kh = np.repeat(keys.transpose(1, 0, 2), group, axis=0)
        vh = np.repeat(vals.transpose(1, 0, 2), group, axis=0)
        scores = _batched_matmul(qh * scale, kh.transpose(0, 2, 1), precision)

        allowed = key_pos[None, :] <= positions[:, None]  # [n, S]
        probs = softmax_rows(scores, np.broadcast_to(allowed, scores.shape), precision)
        if collect_attention:
            contrib = probs.sum(axis=(0, 1))  # over heads and query rows
            mass = contrib if mass is None else mass + contrib

        attn = _batched_matmul(probs, vh, precision)  # [n_heads, n, d_head]
        attn2d = attn.transpose(1, 0, 2).reshape(n, c.n_heads * c.d_head)
        x = precision.finalize(x + matmul(attn2d, lw.wo, precision))

        h2 = rms_norm(x, lw.mlp_norm_gain, c.norm_eps, precision)
        gate = silu(matmul(h2, lw.w_gate, precision), precision)
        up = matmul(h2, lw.w_up, precision)
        mlp = matmul(precision.finalize(gate * up), lw.w_down, precision)
        x = precision.finalize(x + mlp)

        new_kv.append(LayerKV(keys=k, values=v, positions=positions.copy()))

    h = rms_norm(x, weights.final_norm_gain, c.norm_eps, precision)
    logits = matmul(h, weights.lm_head, precision)
    return ForwardResult(logits=logits, new_kv=new_kv, attention_mass=mass)


def greedy_decode(
    config: ModelConfig,
    weights: Weights,
    cache,
    last_logits: np.ndarray,
    next_position: int,
    max_new: int,
    stop: int | None = None,
    precision: Precision = Precision.F64,
) -> list[int]:
    """Greedy decoding with chunk-length-1 forwards through the cache.

    `cache` is a KvCache (or anything with .layers/.append/.apply_policy);
    each decoded token is appended to it under the cache's policy.
    `last_logits` is the logits row of the final prompt token, which selects
    the first decoded token. Ties break toward the lowest token id (argmax).
    """
    if len(cache.layers[0]) == 0:
        raise ModelError("greedy_decode requires a nonempty cache")
    out: list[int] = []
    logits_row = last_logits
    pos = next_position
    for _ in range(max_new):
        token = int(np.argmax(logits_row))
        out.append(token)
        if stop is not None and token == stop:
            break
        result = forward_chunk(
            config, weights, [token], cache.layers, start_position=pos, precision=precision
        )
        cache.append(result.new_kv)
        cache.apply_policy()
        logits_row = result.logits[0]
        pos += 1
    return out
