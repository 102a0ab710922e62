"""Standalone KVFW writer.

This mirrors the engine-side format byte for byte (the shared contract is
the file layout, not shared code):

    magic  b"KVFW"
    u32    version = 1
    u32 x8 n_layers, n_heads, n_kv_heads, d_model, d_head, d_ff,
           vocab_size, max_position
    f32    rope_theta
    f32    norm_eps
    u32    n_tensors
    entry* { u32 name_len, name (UTF-8), u8 dtype (0=f32), u8 rank,
             u32 dims[rank], u64 offset (absolute, payload start) }
    raw row-major f32 payloads, little-endian
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"KVFW"
VERSION = 1


class ExportError(ValueError):
    """Unsupported source checkpoint or inconsistent tensors."""


@dataclass(frozen=True)
class Header:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_model: int
    d_head: int
    d_ff: int
    vocab_size: int
    max_position: int
    rope_theta: float
    norm_eps: float

    def to_dict(self) -> dict:
        return dict(vars(self))


def expected_names(n_layers: int) -> list[str]:
    """Canonical tensor names the engine requires, in file order."""
    names = ["token_embedding"]
    for i in range(n_layers):
        names += [
            f"layer.{i}.attn.norm",
            f"layer.{i}.attn.wq",
            f"layer.{i}.attn.wk",
            f"layer.{i}.attn.wv",
            f"layer.{i}.attn.wo",
            f"layer.{i}.mlp.norm",
            f"layer.{i}.mlp.w_gate",
            f"layer.{i}.mlp.w_up",
            f"layer.{i}.mlp.w_down",
        ]
    names += ["final_norm", "lm_head"]
    return names


def expected_shapes(h: Header) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "token_embedding": (h.vocab_size, h.d_model),
        "final_norm": (h.d_model,),
        "lm_head": (h.d_model, h.vocab_size),
    }
    for i in range(h.n_layers):
        shapes[f"layer.{i}.attn.norm"] = (h.d_model,)
        shapes[f"layer.{i}.attn.wq"] = (h.d_model, h.n_heads * h.d_head)
        shapes[f"layer.{i}.attn.wk"] = (h.d_model, h.n_kv_heads * h.d_head)
        shapes[f"layer.{i}.attn.wv"] = (h.d_model, h.n_kv_heads * h.d_head)
        shapes[f"layer.{i}.attn.wo"] = (h.n_heads * h.d_head, h.d_model)
        shapes[f"layer.{i}.mlp.norm"] = (h.d_model,)
        shapes[f"layer.{i}.mlp.w_gate"] = (h.d_model, h.d_ff)
        shapes[f"layer.{i}.mlp.w_up"] = (h.d_model, h.d_ff)
        shapes[f"layer.{i}.mlp.w_down"] = (h.d_ff, h.d_model)
    return shapes


def write_kvfw(path, header: Header, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors (f32, row-major) under the given header.

    Validates completeness and shape arithmetic before touching the disk.
    """
    want = expected_shapes(header)
    missing = set(want) - set(tensors)
    extra = set(tensors) - set(want)
    if missing:
        raise ExportError(f"missing tensors: {sorted(missing)}")
    if extra:
        raise ExportError(f"unexpected tensors: {sorted(extra)}")
    payloads = {}
    for name in expected_names(header.n_layers):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if arr.shape != want[name]:
            raise ExportError(
                f"tensor {name}: shape {arr.shape}, expected {want[name]}"
            )
        if not np.isfinite(arr).all():
            raise ExportError(f"tensor {name}: non-finite values")
        payloads[name] = arr

    head = MAGIC + struct.pack(
        "<IIIIIIIIIff",
        VERSION,
        header.n_layers,
        header.n_heads,
        header.n_kv_heads,
        header.d_model,
        header.d_head,
        header.d_ff,
        header.vocab_size,
        header.max_position,
        header.rope_theta,
        header.norm_eps,
    ) + struct.pack("<I", len(payloads))

    dir_size = sum(
        4 + len(n.encode()) + 1 + 1 + 4 * payloads[n].ndim + 8 for n in payloads
    )
    offset = len(head) + dir_size
    directory = bytearray()
    body = bytearray()
    for name, arr in payloads.items():
        nb = name.encode()
        directory += struct.pack("<I", len(nb)) + nb
        directory += struct.pack("<BB", 0, arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<Q", offset)
        raw = arr.tobytes()
        body += raw
        offset += len(raw)

    with open(path, "wb") as f:
        f.write(head)
        f.write(bytes(directory))
        f.write(bytes(body))
