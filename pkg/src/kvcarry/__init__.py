"""Chunked decoder-only transformer inference with pluggable KV-cache
policies: carry the accumulated cache across chunk forward passes, or run
streaming eviction, quantization round-trips, decay, and attention-based
pruning against it."""

__version__ = "0.1.0"

from .cache import (
    AttentionPrune,
    CacheError,
    FoldAccumulate,
    KvCache,
    QuantRoundTrip,
    SinkWindow,
    UniformDecay,
    expected_positions,
    quantize_roundtrip,
)
from .fold import (
    Chunk,
    EvalRecord,
    FoldState,
    byte_detokenize,
    byte_tokenize,
    chunk_sequence,
    eval_three_conditions,
    fold_run,
    load_fold_state,
    save_fold_state,
    synthetic_corpus,
)
from .kernels import (
    KernelError,
    Precision,
    matmul,
    rms_norm,
    rope_apply,
    round_emulated_bf16,
    softmax_rows,
)
from .metrics import (
    DepthCurve,
    attention_scores_bytes,
    drift_advantage,
    kv_bytes_per_token,
    measured_cache_bytes,
    plateau_stats,
)
from .model import (
    LayerKV,
    ModelConfig,
    ModelError,
    Weights,
    forward_chunk,
    greedy_decode,
    random_weights,
)
from .needle import NeedleSpec, NeedleTrial, build_trial, retrievability_proxy, run_trial, score_decode
from .weights_io import FormatError, load_weights, save_weights, validate_weights_file
