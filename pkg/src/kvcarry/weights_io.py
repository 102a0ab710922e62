"""Binary tensor serialization: the "KVFW" weight file and the "KVFS"
fold-state checkpoint.

KVFW layout (all integers little-endian):

    magic  b"KVFW"
    u32    version = 1
    u32 x8 n_layers, n_heads, n_kv_heads, d_model, d_head, d_ff,
           vocab_size, max_position
    f32    rope_theta
    f32    norm_eps
    u32    n_tensors
    entry* { u32 name_len, name (UTF-8), u8 dtype (0=f32, 1=f64, 2=i64),
             u8 rank, u32 dims[rank], u64 offset (absolute, payload start) }
    raw row-major payloads

Canonical tensor names: token_embedding, final_norm, lm_head, and per layer i
layer.{i}.attn.norm, layer.{i}.attn.{wq,wk,wv,wo}, layer.{i}.mlp.norm,
layer.{i}.mlp.{w_gate,w_up,w_down}.

KVFS reuses the same directory encoding with magic b"KVFS" and a
length-prefixed JSON metadata blob in place of the model header.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import LayerWeights, ModelConfig, Weights

WEIGHTS_MAGIC = b"KVFW"
STATE_MAGIC = b"KVFS"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class FormatError(ValueError):
    """Malformed, truncated, or inconsistent tensor file."""


def _pack_directory(tensors: dict[str, np.ndarray], base_offset: int) -> tuple[bytes, bytes]:
    """Returns (directory bytes, concatenated payload bytes)."""
    entries = []
    payload = bytearray()
    # first pass to size the directory so offsets can be absolute
    dir_size = 0
    for name, arr in tensors.items():
        dir_size += 4 + len(name.encode()) + 1 + 1 + 4 * arr.ndim + 8
    offset = base_offset + dir_size
    for name, arr in tensors.items():
        nb = name.encode()
        code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<"))
        if code is None:
            code = _DTYPE_CODES.get(np.dtype(arr.dtype.type))
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for tensor {name}")
        entries.append(struct.pack("<I", len(nb)) + nb + struct.pack("<BB", code, arr.ndim))
        entries.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        entries.append(struct.pack("<Q", offset))
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        payload.extend(raw)
        offset += len(raw)
    return b"".join(entries), bytes(payload)


def _read_directory(buf: bytes, pos: int, n_tensors: int) -> dict[str, tuple]:
    """Returns {name: (dtype, shape, offset)} and validates bounds."""
    out: dict[str, tuple] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + name_len].decode()
        pos += name_len
        code, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        if code not in _DTYPES:
            raise FormatError(f"tensor {name}: unknown dtype code {code}")
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        (offset,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        nbytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize
        if offset + nbytes > len(buf):
            raise FormatError(f"tensor {name}: payload out of bounds")
        if name in out:
            raise FormatError(f"duplicate tensor name {name}")
        out[name] = (_DTYPES[code], shape, offset)
    return out


def _extract(buf: bytes, entry: tuple) -> np.ndarray:
    dtype, shape, offset = entry
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    return np.frombuffer(buf[offset : offset + nbytes], dtype=dtype).reshape(shape)


def weight_tensor_names(n_layers: int) -> list[str]:
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


def weights_to_tensors(weights: Weights) -> dict[str, np.ndarray]:
    tensors = {"token_embedding": weights.token_embedding}
    for i, lw in enumerate(weights.layers):
        tensors[f"layer.{i}.attn.norm"] = lw.attn_norm_gain
        tensors[f"layer.{i}.attn.wq"] = lw.wq
        tensors[f"layer.{i}.attn.wk"] = lw.wk
        tensors[f"layer.{i}.attn.wv"] = lw.wv
        tensors[f"layer.{i}.attn.wo"] = lw.wo
        tensors[f"layer.{i}.mlp.norm"] = lw.mlp_norm_gain
        tensors[f"layer.{i}.mlp.w_gate"] = lw.w_gate
        tensors[f"layer.{i}.mlp.w_up"] = lw.w_up
        tensors[f"layer.{i}.mlp.w_down"] = lw.w_down
    tensors["final_norm"] = weights.final_norm_gain
    tensors["lm_head"] = weights.lm_head
    return tensors


def save_weights(path, config: ModelConfig, weights: Weights) -> None:
    """Write a KVFW file. All payloads are stored as f32."""
    weights.validate(config)
    tensors = {
        name: np.ascontiguousarray(arr, dtype=np.float32)
        for name, arr in weights_to_tensors(weights).items()
    }
    header = WEIGHTS_MAGIC + struct.pack(
        "<IIIIIIIIIff",
        FORMAT_VERSION,
        config.n_layers,
        config.n_heads,
        config.n_kv_heads,
        config.d_model,
        config.d_head,
        config.d_ff,
        config.vocab_size,
        config.max_position,
        config.rope_theta,
        config.norm_eps,
    ) + struct.pack("<I", len(tensors))
    directory, payload = _pack_directory(tensors, len(header))
    with open(path, "wb") as f:
        f.write(header)
        f.write(directory)
        f.write(payload)


def _parse_weights_header(buf: bytes) -> tuple[ModelConfig, int, int]:
    if len(buf) < 4 + 4 + 8 * 4 + 8 + 4:
        raise FormatError("file too short for KVFW header")
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    fields = struct.unpack_from("<IIIIIIIIIff", buf, 4)
    version = fields[0]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    config = ModelConfig(
        n_layers=fields[1],
        n_heads=fields[2],
        n_kv_heads=fields[3],
        d_model=fields[4],
        d_head=fields[5],
        d_ff=fields[6],
        vocab_size=fields[7],
        max_position=fields[8],
        rope_theta=fields[9],
        norm_eps=fields[10],
    )
    pos = 4 + struct.calcsize("<IIIIIIIIIff")
    (n_tensors,) = struct.unpack_from("<I", buf, pos)
    return config, n_tensors, pos + 4


def load_weights(path, dtype=np.float32) -> tuple[ModelConfig, Weights]:
    """Read a KVFW file and materialize Weights in the requested dtype."""
    with open(path, "rb") as f:
        buf = f.read()
    config, n_tensors, pos = _parse_weights_header(buf)
    directory = _read_directory(buf, pos, n_tensors)

    def get(name: str) -> np.ndarray:
        if name not in directory:
            raise FormatError(f"missing tensor {name}")
        return _extract(buf, directory[name]).astype(dtype)

    layers = [
        LayerWeights(
            attn_norm_gain=get(f"layer.{i}.attn.norm"),
            wq=get(f"layer.{i}.attn.wq"),
            wk=get(f"layer.{i}.attn.wk"),
            wv=get(f"layer.{i}.attn.wv"),
            wo=get(f"layer.{i}.attn.wo"),
            mlp_norm_gain=get(f"layer.{i}.mlp.norm"),
            w_gate=get(f"layer.{i}.mlp.w_gate"),
            w_up=get(f"layer.{i}.mlp.w_up"),
            w_down=get(f"layer.{i}.mlp.w_down"),
        )
        for i in range(config.n_layers)
    ]
    weights = Weights(
        token_embedding=get("token_embedding"),
        layers=layers,
        final_norm_gain=get("final_norm"),
        lm_head=get("lm_head"),
    )
    weights.validate(config)
    return config, weights


def validate_weights_file(path) -> ModelConfig:
    """Full structural validation; acceptance here is exactly loadability."""
    config, _ = load_weights(path)
    return config


def save_state_tensors(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a KVFS checkpoint: JSON metadata plus a tensor directory."""
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    header = STATE_MAGIC + struct.pack("<II", FORMAT_VERSION, len(meta_blob))
    header += meta_blob + struct.pack("<I", len(tensors))
    directory, payload = _pack_directory(tensors, len(header))
    with open(path, "wb") as f:
        f.write(header)
        f.write(directory)
        f.write(payload)


def load_state_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != STATE_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {STATE_MAGIC!r}")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    pos = 12
    meta = json.loads(buf[pos : pos + meta_len].decode())
    pos += meta_len
    (n_tensors,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    directory = _read_directory(buf, pos, n_tensors)
    return meta, {name: _extract(buf, entry) for name, entry in directory.items()}
