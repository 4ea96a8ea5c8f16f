"""Prompt optimisers for single-token targets.

* :func:`greedy_back_generate` builds the prompt back to front, one full
  vocabulary scan per position.
* :func:`gcg` runs greedy coordinate gradient: gradient-ranked candidate
  swaps, a random batch of single-token substitutions per iteration, keep the
  best.
* :func:`back_off_prompt` escalates through prompt lengths, greedy for short
  prompts and GCG for long ones, stopping at the first prompt that steers the
  system to the target.

All objectives maximise ``log P(y | u + x0)``. Success means greedy decoding
emits ``y`` (argmax match, ties to the lowest id).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ArgumentError, CapabilityError
from .lmsystem import LmInterface, Vocab, is_output_reached, token_logprob, validate_tokens

FULL_SCALE_GCG_BATCH = 768
FULL_SCALE_GCG_TOPK = 128
FULL_SCALE_GCG_ITERS = 34
GREEDY_KS = (1, 2, 3)
GCG_KS = (4, 6, 8, 10)


@dataclass
class OptimizeOutcome:
    prompt: tuple
    achieved_logprob: float
    success: bool
    evaluations: int
    method: str
    trace: list = field(default_factory=list)

    def to_json(self, vocab: Optional[Vocab] = None) -> dict:
        out = {
            "method": self.method,
            "prompt": list(self.prompt),
            "achieved_logprob": self.achieved_logprob,
            "success": self.success,
            "evaluations": self.evaluations,
            "trace": self.trace,
        }
        if vocab is not None:
            out["prompt_symbols"] = vocab.decode(self.prompt)
        return out


def _finish(lm, x0, y, prompt, evaluations, method, trace) -> OptimizeOutcome:
    prompt = tuple(int(t) for t in prompt)
    return OptimizeOutcome(
        prompt=prompt,
        achieved_logprob=token_logprob(lm, prompt + x0, y),
        success=is_output_reached(x0, prompt, (y,), lm),
        evaluations=evaluations,
        method=method,
        trace=trace,
    )


def _check_target(lm: LmInterface, x0, y):
    x0 = validate_tokens(x0, lm.vocab_size, "x0")
    validate_tokens((y,), lm.vocab_size, "y")
    return x0, int(y)


def greedy_back_generate(x0: Sequence[int], y: int, k: int, lm: LmInterface) -> OptimizeOutcome:
    """Prepend, ``k`` times, the single token that most raises ``P(y | u' + u + x0)``.

    Each step scores all ``|V|`` one-token extensions in one batch, so the
    search costs exactly ``k * |V|`` evaluations (the final success check is
    not counted). Ties go to the lowest token id.
    """
    x0, y = _check_target(lm, x0, y)
    if k < 0:
        raise ArgumentError(f"k must be >= 0, got {k}")
    vocab = np.arange(lm.vocab_size)
    prompt: tuple = ()
    trace = []
    evaluations = 0
    for step in range(k):
        suffix = np.asarray(prompt + x0, dtype=np.int64)
        batch = np.column_stack([vocab, np.broadcast_to(suffix, (len(vocab), len(suffix)))])
        logp = lm.next_logprobs_batch(batch)
        evaluations += len(vocab)
        best = int(np.argmax(logp[:, y]))
        prompt = (best,) + prompt
        trace.append({
            "step": step + 1,
            "token": best,
            "logprob": float(logp[best, y]),
            "argmax_is_target": int(np.argmax(logp[best])) == y,
        })
    return _finish(lm, x0, y, prompt, evaluations, "greedy", trace)


def default_gcg_topk(vocab_size: int) -> int:
    return min(FULL_SCALE_GCG_TOPK, max(4, vocab_size // 4))


def default_gcg_batch(k: int, topk: int) -> int:
    return min(FULL_SCALE_GCG_BATCH, k * topk)


def _require_gradients(lm):
    if not (hasattr(lm, "loss_and_input_grads") and hasattr(lm, "embedding_table")):
        raise CapabilityError(f"{type(lm).__name__} does not provide input-embedding gradients")


def gcg(
    x0: Sequence[int],
    y: int,
    k: int,
    lm,
    batch: Optional[int] = None,
    topk: Optional[int] = None,
    iters: int = FULL_SCALE_GCG_ITERS,
    seed=0,
    exhaustive: bool = False,
    stop_on_success: bool = False,
) -> OptimizeOutcome:
    """Greedy coordinate gradient search for a length-``k`` prompt.

    Per iteration, position ``i``'s candidates are the ``topk`` tokens with the
    largest first-order gain ``E @ grad_i log P(y)`` (ties to lower ids). Then
    ``batch`` variants each replace one uniformly drawn position with one
    uniformly drawn candidate; draws may repeat. The best-scoring variant
    becomes the new prompt even if it scores below the current one.

    ``exhaustive`` replaces sampling with every (position, candidate) swap in
    (position, token id) order, preceded by the unchanged prompt, so one
    iteration returns the best single swap and the objective never decreases.
    ``stop_on_success`` ends early once greedy decoding already yields ``y``.
    """
    _require_gradients(lm)
    x0, y = _check_target(lm, x0, y)
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if iters < 0:
        raise ArgumentError(f"iters must be >= 0, got {iters}")
    n_vocab = lm.vocab_size
    topk = default_gcg_topk(n_vocab) if topk is None else min(int(topk), n_vocab)
    batch = default_gcg_batch(k, topk) if batch is None else int(batch)
    if topk < 1 or batch < 1:
        raise ArgumentError("topk and batch must be >= 1")
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, n_vocab, size=k)
    table = np.asarray(lm.embedding_table)
    ids = np.arange(n_vocab)
    x0_arr = np.asarray(x0, dtype=np.int64)
    trace = []
    evaluations = 0

    for it in range(iters):
        report = lm.loss_and_input_grads(tuple(prompt) + x0, y)
        evaluations += 1
        gain = -(report.embed_grads[:k] @ table.T)  # (k, |V|), d log P / d one-hot
        if exhaustive:
            cand = np.tile(ids, (k, 1))
            pos = np.repeat(np.arange(k), n_vocab)
            tok = cand.ravel()
            variants = np.vstack([prompt[None], np.tile(prompt, (len(pos), 1))])
            variants[np.arange(1, len(pos) + 1), pos] = tok
        else:
            cand = np.stack([np.lexsort((ids, -g))[:topk] for g in gain])
            pos = rng.integers(0, k, size=batch)
            col = rng.integers(0, topk, size=batch)
            variants = np.tile(prompt, (batch, 1))
            variants[np.arange(batch), pos] = cand[pos, col]
        seqs = np.hstack([variants, np.broadcast_to(x0_arr, (len(variants), len(x0_arr)))])
        logp = lm.next_logprobs_batch(seqs)
        evaluations += len(variants)
        best = int(np.argmax(logp[:, y]))
        prompt = variants[best].copy()
        hit = int(np.argmax(logp[best])) == y
        trace.append({"iteration": it + 1, "logprob": float(logp[best, y]), "argmax_is_target": hit})
        if stop_on_success and hit:
            break
    return _finish(lm, x0, y, prompt, evaluations, "gcg", trace)


@dataclass
class BackoffResult:
    outcome: Optional[OptimizeOutcome]
    required_k: Optional[int]
    attempts: list

    @property
    def failed(self) -> bool:
        return self.required_k is None

    def to_json(self, vocab: Optional[Vocab] = None) -> dict:
        return {
            "required_k": self.required_k,
            "failed": self.failed,
            "outcome": None if self.outcome is None else self.outcome.to_json(vocab),
            "attempts": self.attempts,
        }


def back_off_prompt(
    x0: Sequence[int],
    y: int,
    lm,
    greedy_ks: Sequence[int] = GREEDY_KS,
    gcg_ks: Sequence[int] = GCG_KS,
    gcg_batch: Optional[int] = None,
    gcg_topk: Optional[int] = None,
    gcg_iters: int = FULL_SCALE_GCG_ITERS,
    seed: int = 0,
) -> BackoffResult:
    """Try greedy back-generation at each of ``greedy_ks``, then GCG at each of
    ``gcg_ks``; return the first prompt that steers ``x0`` to ``y``.

    GCG stages are skipped (and recorded as such) for models without input
    gradients. GCG at length ``k`` is seeded from ``(seed, k)``.
    """
    ks = list(greedy_ks) + list(gcg_ks)
    if not ks:
        raise ArgumentError("empty prompt-length schedule")
    if any(b <= a for a, b in zip(ks, ks[1:])) or ks[0] < 1:
        raise ArgumentError(f"schedule must be positive and increasing: {ks}")
    attempts = []
    for k in greedy_ks:
        out = greedy_back_generate(x0, y, k, lm)
        attempts.append({"method": "greedy", "k": k, "success": out.success,
                         "logprob": out.achieved_logprob})
        if out.success:
            return BackoffResult(out, k, attempts)
    has_grads = hasattr(lm, "loss_and_input_grads") and hasattr(lm, "embedding_table")
    for k in gcg_ks:
        if not has_grads:
            attempts.append({"method": "gcg", "k": k, "success": False, "skipped": "no input gradients"})
            continue
        out = gcg(x0, y, k, lm, batch=gcg_batch, topk=gcg_topk, iters=gcg_iters,
                  seed=[int(seed), int(k)], stop_on_success=True)
        attempts.append({"method": "gcg", "k": k, "success": out.success,
                         "logprob": out.achieved_logprob})
        if out.success:
            return BackoffResult(out, k, attempts)
    return BackoffResult(None, None, attempts)
