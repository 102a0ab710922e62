"""Chunking and the left fold over chunks.

A sequence is split into consecutive length-C chunks. The fold threads a
FoldState (cache + next absolute position + chain depth) through one
forward-append-policy step per chunk; the same one-step update is applied at
every step. `eval_three_conditions` measures per-chunk NLL under the three
reference conditions: one unchunked full-attention forward, isolated chunks
with no prefix, and the carried-cache fold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import CachePolicy, FoldAccumulate, KvCache, SinkWindow
from .kernels import Precision
from .model import LayerKV, ModelConfig, ModelError, Weights, forward_chunk
from .weights_io import load_state_tensors, save_state_tensors


@dataclass(frozen=True)
class Chunk:
    tokens: np.ndarray  # int64, nonempty
    start_position: int

    def __len__(self) -> int:
        return len(self.tokens)


def chunk_sequence(tokens, chunk_len: int) -> list[Chunk]:
    """Consecutive non-overlapping chunks; a ragged tail is kept short."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if chunk_len < 1:
        raise ValueError("chunk length must be >= 1")
    if len(tokens) == 0:
        raise ValueError("cannot chunk an empty token list")
    return [
        Chunk(tokens=tokens[start : start + chunk_len], start_position=start)
        for start in range(0, len(tokens), chunk_len)
    ]


@dataclass
class FoldState:
    """Fold accumulator: the cache plus position/depth bookkeeping.

    depth is the chain depth of the latest consumed chunk, i.e. chunks
    consumed minus one; None before the first chunk.
    """

    cache: KvCache
    next_position: int = 0
    depth: int | None = None

    @staticmethod
    def initial(config: ModelConfig, policy: CachePolicy, precision: Precision) -> "FoldState":
        return FoldState(cache=KvCache.empty(config, policy, precision))


def fold_step(
    config: ModelConfig,
    weights: Weights,
    state: FoldState,
    chunk: Chunk,
    precision: Precision,
    collect_attention: bool = False,
) -> np.ndarray:
    """One fold update: forward with the cache as prefix, append, apply
    policy. Mutates `state` and returns the chunk's logits."""
    if chunk.start_position != state.next_position:
        raise ModelError(
            f"chunk start {chunk.start_position} != fold position {state.next_position}"
        )
    from .cache import AttentionPrune

    collect = collect_attention or isinstance(state.cache.policy, AttentionPrune)
    result = forward_chunk(
        config,
        weights,
        chunk.tokens,
        prefix=state.cache.layers,
        start_position=chunk.start_position,
        precision=precision,
        collect_attention=collect,
    )
    state.cache.append(result.new_kv)
    if result.attention_mass is not None:
        state.cache.record_attention_mass(result.attention_mass)
    state.cache.apply_policy()
    state.next_position += len(chunk)
    state.depth = 0 if state.depth is None else state.depth + 1
    return result.logits


def fold_run(
    config: ModelConfig,
    weights: Weights,
    chunks: list[Chunk],
    policy: CachePolicy | None = None,
    precision: Precision = Precision.F64,
    state: FoldState | None = None,
) -> tuple[FoldState, list[np.ndarray]]:
    """Left fold over the chunk list; returns the final state and the
    per-chunk logits stream. Pass a saved `state` to resume mid-sequence."""
    if state is None:
        state = FoldState.initial(config, policy or FoldAccumulate(), precision)
    logits_stream = [fold_step(config, weights, state, ch, precision) for ch in chunks]
    return state, logits_stream


def nll_rows(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-target negative log-likelihood in nats from pre-softmax logits."""
    logits = logits.astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    return logz - shifted[np.arange(len(targets)), targets]


@dataclass(frozen=True)
class EvalRecord:
    window_id: str
    chunk_index: int  # 1-based
    depth: int  # chunk_index - 1
    condition: str  # full | isolated | kv-fold
    nll: float  # mean nats per scored token
    tokens_scored: int

    def to_dict(self) -> dict:
        return {
            "window_id": self.window_id,
            "chunk_index": self.chunk_index,
            "depth": self.depth,
            "condition": self.condition,
            "nll": self.nll,
            "tokens_scored": self.tokens_scored,
        }


def _chunk_nll_with_context(logits: np.ndarray, tokens: np.ndarray, span: tuple[int, int]) -> tuple[float, int]:
    """Mean NLL of tokens[a:b] where row i of `logits` predicts token i+1.

    Token a is predicted by logits row a-1 (from the previous chunk's
    context); token 0 has no predictor and is skipped.
    """
    a, b = span
    lo = max(a, 1)
    rows = logits[lo - 1 : b - 1]
    targets = tokens[lo:b]
    if len(targets) == 0:
        return 0.0, 0
    return float(nll_rows(rows, targets).mean()), len(targets)


def eval_three_conditions(
    config: ModelConfig,
    weights: Weights,
    tokens,
    chunk_len: int,
    precision: Precision = Precision.F64,
    window_id: str = "w0",
    isolated_local_positions: bool = True,
) -> list[EvalRecord]:
    """Per-chunk NLL under full, isolated, and carried-cache conditions.

    Full and kv-fold score every chunk token that has a predecessor in the
    sequence; isolated chunks additionally skip each chunk's first token
    (no visible predecessor). `isolated_local_positions` restarts position
    ids at 0 for each isolated chunk (default); set False to keep absolute
    positions.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    chunks = chunk_sequence(tokens, chunk_len)
    records: list[EvalRecord] = []

    full = forward_chunk(config, weights, tokens, start_position=0, precision=precision)
    _, fold_logits = fold_run(config, weights, chunks, FoldAccumulate(), precision)

    for idx, chunk in enumerate(chunks):
        a = chunk.start_position
        b = a + len(chunk)
        nll_full, scored = _chunk_nll_with_context(full.logits, tokens, (a, b))
        records.append(EvalRecord(window_id, idx + 1, idx, "full", nll_full, scored))

        iso_start = 0 if isolated_local_positions else a
        iso = forward_chunk(
            config, weights, chunk.tokens, start_position=iso_start, precision=precision
        )
        if len(chunk) > 1:
            iso_nll = float(nll_rows(iso.logits[:-1], chunk.tokens[1:]).mean())
            iso_scored = len(chunk) - 1
        else:
            iso_nll, iso_scored = 0.0, 0
        records.append(EvalRecord(window_id, idx + 1, idx, "isolated", iso_nll, iso_scored))

        # kv-fold: token a is predicted by the previous chunk's last row
        if idx == 0:
            rows = fold_logits[0][:-1]
            targets = chunk.tokens[1:]
        else:
            prev_last = fold_logits[idx - 1][-1:]
            rows = np.concatenate([prev_last, fold_logits[idx][:-1]], axis=0)
            targets = chunk.tokens
        if len(targets):
            kvf_nll = float(nll_rows(rows, targets).mean())
        else:
            kvf_nll = 0.0
        records.append(EvalRecord(window_id, idx + 1, idx, "kv-fold", kvf_nll, len(targets)))
    return records


def byte_tokenize(data: bytes) -> np.ndarray:
    """Byte-level tokenization: token id = byte value."""
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def byte_detokenize(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) and (ids.min() < 0 or ids.max() > 255):
        raise ValueError("token id out of byte range for byte detokenization")
    return ids.astype(np.uint8).tobytes()


def synthetic_corpus(
    n_tokens: int,
    vocab_size: int,
    seed: int,
    copy_block: int = 32,
    copy_prob: float = 0.25,
) -> np.ndarray:
    """Seeded token stream with planted long-range repetition.

    Emits i.i.d. tokens, but with probability `copy_prob` per block emits a
    verbatim copy of an earlier block instead, so models with any copying
    ability gain from long-range context.
    """
    rng = np.random.default_rng(seed)
    out = np.empty(n_tokens, dtype=np.int64)
    filled = 0
    while filled < n_tokens:
        take = min(copy_block, n_tokens - filled)
        if filled >= copy_block and rng.random() < copy_prob:
            src = int(rng.integers(0, filled - copy_block + 1))
            out[filled : filled + take] = out[src : src + take]
        else:
            out[filled : filled + take] = rng.integers(0, vocab_size, take)
        filled += take
    return out


def save_fold_state(path, state: FoldState) -> None:
    """Serialize a FoldState with the engine's binary tensor conventions."""
    cache = state.cache
    policy = cache.policy
    meta = {
        "next_position": state.next_position,
        "depth": state.depth,
        "n_layers": len(cache.layers),
        "policy": {"name": policy.name, **{k: v for k, v in vars(policy).items()}},
        "has_stats": cache.stats is not None,
    }
    tensors: dict[str, np.ndarray] = {}
    for i, kv in enumerate(cache.layers):
        tensors[f"layer.{i}.keys"] = kv.keys
        tensors[f"layer.{i}.values"] = kv.values
        tensors[f"layer.{i}.positions"] = kv.positions
    if cache.stats is not None:
        tensors["stats"] = cache.stats
    save_state_tensors(path, meta, tensors)


def load_fold_state(path) -> FoldState:
    from . import cache as cache_mod

    meta, tensors = load_state_tensors(path)
    policy_meta = dict(meta["policy"])
    name = policy_meta.pop("name")
    policy_cls = {
        "fold": cache_mod.FoldAccumulate,
        "sink-window": cache_mod.SinkWindow,
        "quant": cache_mod.QuantRoundTrip,
        "decay": cache_mod.UniformDecay,
        "prune": cache_mod.AttentionPrune,
    }[name]
    layers = [
        LayerKV(
            keys=tensors[f"layer.{i}.keys"].copy(),
            values=tensors[f"layer.{i}.values"].copy(),
            positions=tensors[f"layer.{i}.positions"].copy(),
        )
        for i in range(meta["n_layers"])
    ]
    stats = tensors["stats"].copy() if meta["has_stats"] else None
    cache = KvCache(layers=layers, policy=policy_cls(**policy_meta), stats=stats)
    return FoldState(cache=cache, next_position=meta["next_position"], depth=meta["depth"])
