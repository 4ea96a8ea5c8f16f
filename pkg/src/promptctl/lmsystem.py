"""The LLM system as a discrete-time state machine.

State is a growing token sequence. Each step either appends a control token
or, when the input is null, appends the greedy (zero-temperature) next token
of the language model. Argmax ties always resolve to the lowest token id.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.special import log_softmax

from ._io import atomic_write_text
from .errors import ArgumentError

TokenSequence = tuple  # tuple[int, ...]


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        tokens = tuple(str(t) for t in self.tokens)
        if len(set(tokens)) != len(tokens):
            raise ArgumentError("vocabulary symbols must be unique")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise ArgumentError(f"unknown token symbol {symbol!r}") from None

    def encode(self, symbols: Iterable[str]) -> TokenSequence:
        return tuple(self.id(s) for s in symbols)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @classmethod
    def numbered(cls, size: int, prefix: str = "t") -> "Vocab":
        width = len(str(max(size - 1, 0)))
        return cls(tuple(f"{prefix}{i:0{width}d}" for i in range(size)))

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(list(self.tokens)) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(tuple(json.loads(Path(path).read_text(encoding="utf-8"))))


@runtime_checkable
class LmInterface(Protocol):
    """Next-token model over a fixed vocabulary. Implementations are read-only
    after construction."""

    vocab_size: int

    def next_logits(self, seq: Sequence[int]) -> np.ndarray: ...

    def next_logprobs_batch(self, seqs: np.ndarray) -> np.ndarray:
        """Log-probabilities ``(B, |V|)`` for a ``(B, n)`` array of equal-length sequences."""
        ...


def next_distribution(lm: LmInterface, seq: Sequence[int]) -> np.ndarray:
    logits = np.asarray(lm.next_logits(seq), dtype=np.float64)
    p = np.exp(logits - logits.max())
    return p / p.sum()


def greedy_token(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest id among ties
    return int(np.argmax(logits))


def validate_tokens(seq: Sequence[int], vocab_size: int, what: str = "sequence") -> TokenSequence:
    seq = tuple(int(t) for t in seq)
    for t in seq:
        if not 0 <= t < vocab_size:
            raise ArgumentError(f"{what}: token id {t} outside vocabulary of size {vocab_size}")
    return seq


def transition(state: Sequence[int], token: Optional[int], lm: LmInterface) -> TokenSequence:
    """One step of the system: append ``token``, or the greedy continuation if it is None."""
    state = validate_tokens(state, lm.vocab_size, "state")
    if token is not None:
        return state + validate_tokens((token,), lm.vocab_size, "input")
    if not state:
        raise ArgumentError("cannot decode from an empty state")
    return state + (greedy_token(lm.next_logits(state)),)


def readout(state: Sequence[int], r: int) -> TokenSequence:
    state = tuple(state)
    if r < 0 or r > len(state):
        raise ArgumentError(f"readout window {r} for state of length {len(state)}")
    return state[len(state) - r :]


def generate(x0: Sequence[int], u: Sequence[int], r: int, lm: LmInterface) -> TokenSequence:
    """Prompt ``u`` before imposed state ``x0``, then ``r`` greedy steps; returns the last ``r`` tokens."""
    if r < 1:
        raise ArgumentError(f"r must be >= 1, got {r}")
    state = ()
    for t in tuple(u) + tuple(x0):
        state = transition(state, t, lm)
    for _ in range(r):
        state = transition(state, None, lm)
    return readout(state, r)


def is_output_reached(x0, u, y_star: Sequence[int], lm: LmInterface) -> bool:
    y_star = validate_tokens(y_star, lm.vocab_size, "y_star")
    if not y_star:
        raise ArgumentError("y_star must contain at least one token")
    return generate(x0, u, len(y_star), lm) == y_star


def token_logprob(lm: LmInterface, seq: Sequence[int], y: int) -> float:
    logits = np.asarray(lm.next_logits(seq), dtype=np.float64)
    return float(log_softmax(logits)[y])


class NgramLM:
    """Table-driven n-gram model: conditions on the last ``order - 1`` tokens.

    ``table`` maps context tuples to logit vectors; contexts shorter than
    ``order - 1`` (near the start of a sequence) are looked up as-is. Missing
    contexts fall back to ``default`` logits.
    """

    def __init__(self, vocab_size: int, order: int, table: dict, default=None, vocab: Optional[Vocab] = None):
        if order < 1:
            raise ArgumentError(f"order must be >= 1, got {order}")
        self.vocab_size = int(vocab_size)
        self.order = int(order)
        self.vocab = vocab
        self._table = {}
        for ctx, logits in table.items():
            logits = np.asarray(logits, dtype=np.float64)
            if logits.shape != (self.vocab_size,):
                raise ArgumentError(f"logits for context {ctx} have shape {logits.shape}")
            self._table[tuple(int(t) for t in ctx)] = logits
        self._default = (
            np.zeros(self.vocab_size) if default is None else np.asarray(default, dtype=np.float64)
        )

    def _context(self, seq: Sequence[int]) -> tuple:
        keep = self.order - 1
        return tuple(seq[max(0, len(seq) - keep) :]) if keep else ()

    def next_logits(self, seq: Sequence[int]) -> np.ndarray:
        seq = validate_tokens(seq, self.vocab_size)
        return self._table.get(self._context(seq), self._default).copy()

    def next_logprobs_batch(self, seqs: np.ndarray) -> np.ndarray:
        seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
        logits = np.stack([self.next_logits(tuple(s)) for s in seqs])
        return log_softmax(logits, axis=1)

    @classmethod
    def from_corpus(
        cls, corpus: Sequence[Sequence[int]], vocab_size: int, order: int = 2, smoothing: float = 1.0,
        vocab: Optional[Vocab] = None,
    ) -> "NgramLM":
        """Add-``smoothing`` counts of each token given its preceding context.

        Unseen contexts get the uniform distribution.
        """
        if not smoothing > 0:
            raise ArgumentError(f"smoothing must be > 0, got {smoothing}")
        if not any(len(line) > 1 for line in corpus):
            raise ArgumentError("corpus has no token pairs")
        counts: dict[tuple, Counter] = {}
        keep = order - 1
        for line in corpus:
            line = validate_tokens(line, vocab_size, "corpus")
            for pos in range(1, len(line)):
                ctx = line[max(0, pos - keep) : pos] if keep else ()
                counts.setdefault(ctx, Counter())[line[pos]] += 1
        table = {}
        for ctx, c in counts.items():
            p = np.full(vocab_size, float(smoothing))
            for tok, n in c.items():
                p[tok] += n
            table[ctx] = np.log(p / p.sum())
        return cls(vocab_size, order, table, vocab=vocab)


def bigram_lm_from_corpus(corpus, smoothing: float, vocab_size: Optional[int] = None, vocab: Optional[Vocab] = None) -> NgramLM:
    if not corpus:
        raise ArgumentError("empty corpus")
    if vocab_size is None:
        vocab_size = vocab.size if vocab is not None else 1 + max(max(line) for line in corpus if line)
    return NgramLM.from_corpus(corpus, vocab_size, order=2, smoothing=smoothing, vocab=vocab)


def read_corpus(path, vocab: Optional[Vocab] = None) -> tuple[list[TokenSequence], Vocab]:
    """Read a whitespace-tokenised corpus; builds a sorted vocabulary if none is given."""
    lines = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [ln for ln in lines if ln]
    if vocab is None:
        vocab = Vocab(tuple(sorted({s for ln in lines for s in ln})))
    return [vocab.encode(ln) for ln in lines], vocab


def write_corpus(path, corpus: Sequence[Sequence[int]], vocab: Vocab) -> None:
    text = "\n".join(" ".join(vocab.decode(line)) for line in corpus)
    atomic_write_text(path, text + "\n")
