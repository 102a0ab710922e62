"""Needle-in-a-haystack retrieval trials.

A trial plants "The magic number for [key] is [value]." sentences at
controlled chunk positions inside a filler token stream, folds the data
chunks under a cache policy, appends a question chunk, and scores greedy
decoding by exact match of the 5-digit value. For runs with non-pretrained
weights the mechanistic retrievability proxy (are the needle's KV rows still
resident and reachable at question time?) is the meaningful signal.

Distance convention: the question is appended as one extra chunk after the
N data chunks, and distance d = number of chunk transitions from the needle
chunk to the question chunk. d=1 places the needle in the chunk immediately
before the question; d=N places it in the first chunk.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field

import numpy as np

from .cache import CachePolicy, FoldAccumulate, KvCache
from .fold import Chunk, FoldState, byte_detokenize, byte_tokenize, chunk_sequence, fold_run
from .kernels import Precision
from .model import ModelConfig, Weights, forward_chunk, greedy_decode

# Fixed uncommon-word key list; recorded verbatim in trial output.
KEY_WORDS = [
    "amaranth", "obsidian", "halcyon", "zephyr", "quixotic", "serendipity",
    "ephemeral", "labyrinth", "vermilion", "sibilant", "petrichor", "lacuna",
    "chiaroscuro", "palimpsest", "susurrus", "aubade", "cynosure", "eldritch",
    "fulgent", "gossamer", "hinterland", "ineffable", "juniper", "kestrel",
    "limerence", "moraine", "nacreous", "opaline", "pellucid", "quillon",
    "rhizome", "selcouth",
]

NEEDLE_TEMPLATE = "The magic number for {key} is {value}."
QUESTION_TEMPLATE = (
    "Earlier in the document, what was the magic number associated with {key}? "
    "Reply with only the number."
)

_FIVE_DIGITS = re.compile(r"(?<!\d)\d{5}(?!\d)")


class NeedleError(ValueError):
    """Invalid placement: distance out of range, needle too long, clashes."""


@dataclass(frozen=True)
class NeedleSpec:
    key: str
    value: str  # exactly 5 decimal digits
    insert_chunk: int  # 0-based data chunk index
    distance: int  # chunk transitions from needle chunk to question chunk

    def __post_init__(self):
        if not re.fullmatch(r"[0-9]{5}", self.value):
            raise NeedleError(f"value {self.value!r} is not a 5-digit string")


@dataclass
class NeedleTrial:
    specs: list[NeedleSpec]
    tokens: np.ndarray  # data tokens with needles planted, length T
    questions: list[str]  # one per needle
    gold: list[str]
    needle_spans: list[tuple[int, int]]  # absolute token [start, end) per needle
    T: int
    C: int
    seed: int

    @property
    def n_chunks(self) -> int:
        return self.T // self.C


def _filler_text(n_bytes: int, rng: np.random.Generator) -> bytes:
    """Prose-like filler: random lowercase words separated by spaces."""
    alphabet = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz", dtype=np.uint8)
    letters = alphabet[rng.integers(0, len(alphabet), n_bytes)]
    # every 5th-ish byte becomes a space to give word structure
    gaps = rng.integers(0, 6, n_bytes) == 0
    letters[gaps] = ord(" ")
    return letters.tobytes()


def build_trial(
    T: int,
    C: int,
    seed: int,
    distance: int | None = None,
    k: int | None = None,
    filler: bytes | None = None,
) -> NeedleTrial:
    """Build a deterministic trial with one needle at `distance` or `k`
    needles at evenly spaced chunk positions floor((i+1)*N/(k+1))."""
    if (distance is None) == (k is None):
        raise NeedleError("specify exactly one of distance or k")
    if T % C != 0:
        raise NeedleError("T must be divisible by C for needle trials")
    n_chunks = T // C
    rng = np.random.default_rng(seed)

    if distance is not None:
        if not (1 <= distance <= n_chunks):
            raise NeedleError(f"distance {distance} outside [1, {n_chunks}]")
        insert_chunks = [n_chunks - distance]
    else:
        if not (1 <= k <= n_chunks):
            raise NeedleError(f"k {k} outside [1, {n_chunks}]")
        insert_chunks = sorted({(i + 1) * n_chunks // (k + 1) for i in range(k)})
        if len(insert_chunks) != k:
            raise NeedleError(f"k {k} too large for {n_chunks} chunks: placements collide")

    keys = [KEY_WORDS[i] for i in rng.choice(len(KEY_WORDS), len(insert_chunks), replace=False)]
    specs, spans = [], []
    data = bytearray(filler if filler is not None else _filler_text(T, rng))
    if len(data) != T:
        raise NeedleError(f"filler must supply exactly {T} bytes")

    for key, chunk_idx in zip(keys, insert_chunks):
        value = "".join(str(d) for d in rng.integers(0, 10, 5))
        sentence = NEEDLE_TEMPLATE.format(key=key, value=value).encode()
        if len(sentence) > C:
            raise NeedleError(f"needle sentence ({len(sentence)} bytes) does not fit in C={C}")
        start = chunk_idx * C + (C - len(sentence)) // 2  # centered in its chunk
        data[start : start + len(sentence)] = sentence
        specs.append(
            NeedleSpec(
                key=key,
                value=value,
                insert_chunk=chunk_idx,
                distance=n_chunks - chunk_idx,
            )
        )
        spans.append((start, start + len(sentence)))

    return NeedleTrial(
        specs=specs,
        tokens=byte_tokenize(bytes(data)),
        questions=[QUESTION_TEMPLATE.format(key=s.key) for s in specs],
        gold=[s.value for s in specs],
        needle_spans=spans,
        T=T,
        C=C,
        seed=seed,
    )


def score_decode(decoded: str, gold: str) -> dict:
    """Extract the first run of exactly 5 digits and compare to gold.

    Digit runs longer than 5 are not extractable answers."""
    m = _FIVE_DIGITS.search(decoded)
    extracted = m.group(0) if m else None
    return {"extracted": extracted, "exact_match": extracted == gold}


def retrievability_proxy(cache: KvCache, span: tuple[int, int]) -> dict:
    """resident: every needle-span position present in every layer's cache.
    reachable: the question's attention support covers those positions
    (no positional masking applies to the prefix, so eviction is the only
    way to lose reachability)."""
    wanted = np.arange(span[0], span[1])
    resident = all(np.isin(wanted, kv.positions).all() for kv in cache.layers)
    reachable = resident and (len(cache) == 0 or span[1] <= cache.positions[-1] + 1)
    return {"resident": bool(resident), "reachable": bool(reachable)}


def run_trial(
    config: ModelConfig,
    weights: Weights,
    trial: NeedleTrial,
    policy: CachePolicy | None = None,
    precision: Precision = Precision.F64,
    max_new: int = 30,
    decode: bool = True,
) -> list[dict]:
    """Fold the data chunks once, then answer each needle's question from a
    copy of the final fold state. Returns one outcome dict per needle."""
    policy = policy or FoldAccumulate()
    chunks = chunk_sequence(trial.tokens, trial.C)
    state, _ = fold_run(config, weights, chunks, policy, precision)

    outcomes = []
    for spec, span, question, gold in zip(
        trial.specs, trial.needle_spans, trial.questions, trial.gold
    ):
        proxy = retrievability_proxy(state.cache, span)
        outcome = {
            "key": spec.key,
            "gold": gold,
            "distance": spec.distance,
            "insert_chunk": spec.insert_chunk,
            **proxy,
            "decoded": None,
            "extracted": None,
            "exact_match": False,
        }
        if decode:
            qstate = FoldState(
                cache=copy.deepcopy(state.cache),
                next_position=state.next_position,
                depth=state.depth,
            )
            q_tokens = byte_tokenize(question.encode())
            q_chunk = Chunk(tokens=q_tokens, start_position=qstate.next_position)
            from .fold import fold_step

            q_logits = fold_step(config, weights, qstate, q_chunk, precision)
            ids = greedy_decode(
                config,
                weights,
                qstate.cache,
                last_logits=q_logits[-1],
                next_position=qstate.next_position,
                max_new=max_new,
                precision=precision,
            )
            in_range = [i for i in ids if 0 <= i < 256]
            decoded = byte_detokenize(in_range).decode("latin-1")
            outcome["decoded"] = decoded
            outcome.update(score_decode(decoded, gold))
        outcomes.append(outcome)
    return outcomes
