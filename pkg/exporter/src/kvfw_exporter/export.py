"""Convert a Llama/Qwen-family checkpoint into a KVFW weight file.

The engine stores projection matrices input-major (activations multiply on
the left, ``x @ W``), so every source ``*.weight`` matrix is transposed.
The engine also rotates adjacent channel pairs (2i, 2i+1) in its rotary
embedding, while the source layout pairs channel i with channel i + d/2;
q/k projection output channels are permuted per head to compensate, which
makes the two attention computations identical rather than merely similar.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .format import ExportError, Header, expected_names, write_kvfw

_SUPPORTED_MODEL_TYPES = {"llama", "mistral", "qwen2"}


@dataclass
class ExportManifest:
    source: str
    header: dict
    name_map: dict[str, str]
    dtype_conversions: dict[str, str]
    checksums: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(vars(self), indent=2, sort_keys=True)


def _interleave_rope_rows(w: np.ndarray, n_heads: int, d_head: int) -> np.ndarray:
    """Reorder rotary channels from half-split to adjacent-pair layout.

    Row (h, i) of the source projection pairs with row (h, i + d/2); the
    engine pairs rows (h, 2i) and (h, 2i+1).
    """
    order = np.arange(d_head).reshape(2, d_head // 2).T.reshape(-1)
    return w.reshape(n_heads, d_head, -1)[:, order, :].reshape(n_heads * d_head, -1)


def _header_from_config(cfg: dict) -> Header:
    n_heads = cfg["num_attention_heads"]
    d_model = cfg["hidden_size"]
    return Header(
        n_layers=cfg["num_hidden_layers"],
        n_heads=n_heads,
        n_kv_heads=cfg.get("num_key_value_heads", n_heads),
        d_model=d_model,
        d_head=cfg.get("head_dim") or d_model // n_heads,
        d_ff=cfg["intermediate_size"],
        vocab_size=cfg["vocab_size"],
        max_position=cfg["max_position_embeddings"],
        rope_theta=float(cfg.get("rope_theta", 10000.0)),
        norm_eps=float(cfg.get("rms_norm_eps", 1e-6)),
    )


def _check_architecture(cfg: dict, state: dict[str, np.ndarray]) -> None:
    model_type = cfg.get("model_type", "?")
    if model_type not in _SUPPORTED_MODEL_TYPES:
        raise ExportError(f"unsupported architecture: model_type={model_type!r}")
    if cfg.get("rope_scaling"):
        raise ExportError("rope scaling is not supported")
    biased = sorted(k for k in state if k.endswith(".bias"))
    if biased:
        raise ExportError(f"projection biases are not supported: {biased[:3]}...")


def convert_state_dict(
    cfg: dict, state: dict[str, np.ndarray]
) -> tuple[Header, dict[str, np.ndarray], dict[str, str]]:
    """Map source tensors to canonical KVFW tensors.

    Returns (header, tensors, name_map). Tied embeddings are duplicated
    into a distinct lm_head tensor.
    """
    _check_architecture(cfg, state)
    header = _header_from_config(cfg)

    def take(key: str) -> np.ndarray:
        if key not in state:
            raise ExportError(f"missing source tensor {key}")
        return np.asarray(state[key], dtype=np.float32)

    name_map: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}

    def put(name: str, source_key: str, arr: np.ndarray) -> None:
        tensors[name] = arr
        name_map[name] = source_key

    put("token_embedding", "model.embed_tokens.weight", take("model.embed_tokens.weight"))
    put("final_norm", "model.norm.weight", take("model.norm.weight"))
    if "lm_head.weight" in state:
        put("lm_head", "lm_head.weight", take("lm_head.weight").T)
    else:
        put("lm_head", "model.embed_tokens.weight (tied)", tensors["token_embedding"].T.copy())

    for i in range(header.n_layers):
        src = f"model.layers.{i}"
        dst = f"layer.{i}"
        put(f"{dst}.attn.norm", f"{src}.input_layernorm.weight",
            take(f"{src}.input_layernorm.weight"))
        wq = _interleave_rope_rows(
            take(f"{src}.self_attn.q_proj.weight"), header.n_heads, header.d_head
        )
        wk = _interleave_rope_rows(
            take(f"{src}.self_attn.k_proj.weight"), header.n_kv_heads, header.d_head
        )
        put(f"{dst}.attn.wq", f"{src}.self_attn.q_proj.weight", wq.T)
        put(f"{dst}.attn.wk", f"{src}.self_attn.k_proj.weight", wk.T)
        put(f"{dst}.attn.wv", f"{src}.self_attn.v_proj.weight",
            take(f"{src}.self_attn.v_proj.weight").T)
        put(f"{dst}.attn.wo", f"{src}.self_attn.o_proj.weight",
            take(f"{src}.self_attn.o_proj.weight").T)
        put(f"{dst}.mlp.norm", f"{src}.post_attention_layernorm.weight",
            take(f"{src}.post_attention_layernorm.weight"))
        put(f"{dst}.mlp.w_gate", f"{src}.mlp.gate_proj.weight",
            take(f"{src}.mlp.gate_proj.weight").T)
        put(f"{dst}.mlp.w_up", f"{src}.mlp.up_proj.weight",
            take(f"{src}.mlp.up_proj.weight").T)
        put(f"{dst}.mlp.w_down", f"{src}.mlp.down_proj.weight",
            take(f"{src}.mlp.down_proj.weight").T)

    return header, tensors, name_map


def _load_source(source: str | Path) -> tuple[dict, dict[str, np.ndarray], dict[str, str]]:
    """Load config + state dict from a local checkpoint directory."""
    import torch  # deferred: only needed when reading source checkpoints
    from transformers import AutoConfig, AutoModelForCausalLM

    cfg = AutoConfig.from_pretrained(source).to_dict()
    model = AutoModelForCausalLM.from_pretrained(source, torch_dtype=torch.float32)
    state: dict[str, np.ndarray] = {}
    dtype_conversions: dict[str, str] = {}
    for key, tensor in model.state_dict().items():
        if key.endswith("rotary_emb.inv_freq"):
            continue  # derived, not a weight
        dtype_conversions[key] = f"{tensor.dtype} -> float32"
        state[key] = tensor.detach().to(torch.float32).numpy()
    return cfg, state, dtype_conversions


def export(source: str | Path, output_path: str | Path) -> ExportManifest:
    """Export a checkpoint directory to a KVFW file plus a JSON manifest."""
    cfg, state, dtype_conversions = _load_source(source)
    header, tensors, name_map = convert_state_dict(cfg, state)
    write_kvfw(output_path, header, tensors)
    checksums = {
        name: hashlib.sha256(
            np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
        ).hexdigest()
        for name in expected_names(header.n_layers)
    }
    manifest = ExportManifest(
        source=str(source),
        header=header.to_dict(),
        name_map=name_map,
        dtype_conversions=dtype_conversions,
        checksums=checksums,
    )
    manifest_path = Path(output_path).with_suffix(".manifest.json")
    manifest_path.write_text(manifest.to_json() + "\n")
    return manifest
