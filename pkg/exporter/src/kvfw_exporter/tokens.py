"""Encode text with the source checkpoint's tokenizer into a token file.

The engine ingests token files as plain ``.npy`` arrays of int64 ids; the
engine itself never implements subword tokenization.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def encode_to_file(source: str | Path, text: str, output_path: str | Path) -> int:
    """Tokenize text with the checkpoint's tokenizer; returns token count."""
    from transformers import AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(source)
    ids = np.asarray(tokenizer.encode(text), dtype=np.int64)
    np.save(output_path, ids)
    return len(ids)
