"""Builders for (imposed state, target token) datasets.

Three flavours: the corpus's own next token, the model's top-N next tokens
for a handful of states, and a target drawn at a uniformly random rank of the
model's next-token distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax

from .._io import atomic_write_text, dumps_json
from ..errors import ArgumentError
from ..lmsystem import LmInterface, validate_tokens

GROUND_TRUTH = "ground_truth"
TOP_RANK = "top_rank"
UNIFORM_RANK = "uniform_rank"

DESK_GROUND_TRUTH_N = 500
DESK_STATE_LEN = (8, 16)
DESK_TOP_STATES = 25
DESK_TOP_N = 75
DESK_UNIFORM_N = 200


@dataclass
class ControlPair:
    x0: tuple
    y: int
    provenance: dict
    base_logprob: float
    base_rank: int

    def to_json(self) -> dict:
        return {
            "x0": list(self.x0),
            "y": self.y,
            "provenance": self.provenance,
            "base_logprob": self.base_logprob,
            "base_rank": self.base_rank,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ControlPair":
        return cls(tuple(obj["x0"]), int(obj["y"]), dict(obj["provenance"]),
                   float(obj["base_logprob"]), int(obj["base_rank"]))


@dataclass
class ControlDataset:
    pairs: list
    corpus_id: str = ""
    lm_id: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    def header(self) -> dict:
        return {"corpus_id": self.corpus_id, "lm_id": self.lm_id, "seed": self.seed, **self.meta}

    def save(self, path) -> list[Path]:
        """Write pairs as JSON lines and the header to ``<path>.meta.json``."""
        path = Path(path)
        lines = "".join(json.dumps(p.to_json(), sort_keys=True) + "\n" for p in self.pairs)
        meta_path = path.with_name(path.name + ".meta.json")
        return [atomic_write_text(path, lines), atomic_write_text(meta_path, dumps_json(self.header()))]

    @classmethod
    def load(cls, path) -> "ControlDataset":
        path = Path(path)
        pairs = [ControlPair.from_json(json.loads(ln))
                 for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        meta_path = path.with_name(path.name + ".meta.json")
        meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        return cls(pairs, meta.pop("corpus_id", ""), meta.pop("lm_id", ""), int(meta.pop("seed", 0)), meta)


def descending_order(logp: np.ndarray) -> np.ndarray:
    """Token ids sorted by descending probability, ties by ascending id."""
    return np.lexsort((np.arange(len(logp)), -logp))


def rank_of(logp: np.ndarray, y: int) -> int:
    """1-indexed position of ``y`` in :func:`descending_order`."""
    above = np.count_nonzero(logp > logp[y])
    tied_lower = np.count_nonzero(logp[:y] == logp[y])
    return int(above + tied_lower + 1)


def base_logprobs(lm: LmInterface, x0: Sequence[int]) -> np.ndarray:
    return log_softmax(np.asarray(lm.next_logits(tuple(x0)), dtype=np.float64))


def _sample_windows(corpus, n: int, lo: int, hi: int, rng: np.random.Generator):
    """``n`` (line, offset, length) triples with room for a following token.

    Lines are chosen in proportion to their number of valid windows.
    """
    if lo < 1 or hi < lo:
        raise ArgumentError(f"bad state length range [{lo}, {hi}]")
    lengths = np.array([len(line) for line in corpus], dtype=np.int64)
    out = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        counts = np.maximum(lengths - length, 0)
        total = int(counts.sum())
        if total == 0:
            raise ArgumentError(f"corpus has no window of length {length} + 1")
        pick = int(rng.integers(0, total))
        line = int(np.searchsorted(np.cumsum(counts), pick, side="right"))
        offset = pick - int(counts[:line].sum())
        out.append((line, offset, length))
    return out


def _check_corpus(corpus, lm):
    if not corpus:
        raise ArgumentError("empty corpus")
    return [validate_tokens(line, lm.vocab_size, "corpus") for line in corpus]


def build_ground_truth_dataset(
    corpus, lm: LmInterface, n: int = DESK_GROUND_TRUTH_N, state_len_range=DESK_STATE_LEN,
    seed: int = 0, corpus_id: str = "", lm_id: str = "",
) -> ControlDataset:
    """Contiguous corpus windows as imposed states, each paired with the
    token that actually follows it."""
    corpus = _check_corpus(corpus, lm)
    rng = np.random.default_rng(seed)
    pairs = []
    for line, offset, length in _sample_windows(corpus, n, *state_len_range, rng):
        x0 = corpus[line][offset : offset + length]
        y = corpus[line][offset + length]
        logp = base_logprobs(lm, x0)
        pairs.append(ControlPair(x0, y, {"kind": GROUND_TRUTH, "line": line, "offset": offset},
                                 float(logp[y]), rank_of(logp, y)))
    return ControlDataset(pairs, corpus_id, lm_id, seed, {"kind": GROUND_TRUTH})


def build_top_n_dataset(
    corpus, lm: LmInterface, num_states: int = DESK_TOP_STATES, n_top: Optional[int] = None,
    seed: int = 0, state_len_range=DESK_STATE_LEN, corpus_id: str = "", lm_id: str = "",
) -> ControlDataset:
    """Each sampled state paired with its ``n_top`` most likely next tokens."""
    corpus = _check_corpus(corpus, lm)
    if n_top is None:
        n_top = min(DESK_TOP_N, lm.vocab_size)
    if not 1 <= n_top <= lm.vocab_size:
        raise ArgumentError(f"n_top={n_top} outside [1, {lm.vocab_size}]")
    rng = np.random.default_rng(seed)
    pairs = []
    for line, offset, length in _sample_windows(corpus, num_states, *state_len_range, rng):
        x0 = corpus[line][offset : offset + length]
        logp = base_logprobs(lm, x0)
        for rank, y in enumerate(descending_order(logp)[:n_top], start=1):
            pairs.append(ControlPair(
                x0, int(y),
                {"kind": TOP_RANK, "n": n_top, "rank": rank, "line": line, "offset": offset},
                float(logp[y]), rank))
    return ControlDataset(pairs, corpus_id, lm_id, seed, {"kind": TOP_RANK, "n_top": n_top})


def build_uniform_rank_dataset(
    corpus, lm: LmInterface, n: int = DESK_UNIFORM_N, seed: int = 0,
    state_len_range=DESK_STATE_LEN, corpus_id: str = "", lm_id: str = "",
) -> ControlDataset:
    """States paired with the token at a rank drawn uniformly from ``1..|V|``."""
    corpus = _check_corpus(corpus, lm)
    rng = np.random.default_rng(seed)
    pairs = []
    for line, offset, length in _sample_windows(corpus, n, *state_len_range, rng):
        x0 = corpus[line][offset : offset + length]
        logp = base_logprobs(lm, x0)
        rank = int(rng.integers(1, lm.vocab_size + 1))
        y = int(descending_order(logp)[rank - 1])
        pairs.append(ControlPair(x0, y, {"kind": UNIFORM_RANK, "rank": rank, "line": line, "offset": offset},
                                 float(logp[y]), rank))
    return ControlDataset(pairs, corpus_id, lm_id, seed, {"kind": UNIFORM_RANK})
