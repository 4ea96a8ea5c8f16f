"""A small causal transformer language model with hand-written backprop.

Architecture per layer (no normalisation, no biases)::

    h = h + CausalAttention(h)        # single head, W_q / W_key / W_v
    h = h + relu(h @ W1) @ W2         # d -> 4d -> d

Input is ``embed[token] + pos_embed[position]``; logits are ``h @ unembed``.
Everything is batched over a leading axis so greedy scans and training run
as a handful of matmuls.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import log_softmax

from ._io import atomic_write_text
from .attention import AttentionParams
from .errors import ArgumentError
from .lmsystem import Vocab, validate_tokens
from .numcore import matrix_from_json, matrix_to_json

CHECKPOINT_FORMAT = "promptctl-toylm/1"


@dataclass(frozen=True)
class ToyConfig:
    vocab_size: int = 64
    d_model: int = 32
    d_key: int = 16
    n_layers: int = 2
    max_len: int = 64
    init_scale: float = 1.0

    @property
    def d_hidden(self) -> int:
        return 4 * self.d_model


@dataclass(frozen=True)
class ToyTransformerParams:
    config: ToyConfig
    arrays: dict = field(repr=False)
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        c = self.config
        want = {"embed": (c.vocab_size, c.d_model), "pos_embed": (c.max_len, c.d_model),
                "unembed": (c.d_model, c.vocab_size)}
        for i in range(c.n_layers):
            want[f"l{i}.w_q"] = (c.d_model, c.d_key)
            want[f"l{i}.w_key"] = (c.d_model, c.d_key)
            want[f"l{i}.w_v"] = (c.d_model, c.d_model)
            want[f"l{i}.mlp_w1"] = (c.d_model, c.d_hidden)
            want[f"l{i}.mlp_w2"] = (c.d_hidden, c.d_model)
        if set(want) != set(self.arrays):
            raise ArgumentError(f"parameter names mismatch: {sorted(set(want) ^ set(self.arrays))}")
        for name, shape in want.items():
            if self.arrays[name].shape != shape:
                raise ArgumentError(f"{name}: expected {shape}, got {self.arrays[name].shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def embed(self) -> np.ndarray:
        return self.arrays["embed"]

    def attention(self, layer: int) -> AttentionParams:
        a = self.arrays
        return AttentionParams(a[f"l{layer}.w_q"], a[f"l{layer}.w_key"], a[f"l{layer}.w_v"])

    def replace(self, **arrays) -> "ToyTransformerParams":
        merged = dict(self.arrays)
        merged.update(arrays)
        return ToyTransformerParams(self.config, merged, self.seed, self.step)

    def to_json(self, vocab: Optional[Vocab] = None, extra: Optional[dict] = None) -> dict:
        out = {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "seed": self.seed,
            "step": self.step,
            "matrices": {k: matrix_to_json(v) for k, v in sorted(self.arrays.items())},
        }
        if vocab is not None:
            out["vocab"] = list(vocab.tokens)
        if extra:
            out["run_config"] = extra
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ToyTransformerParams":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise ArgumentError(f"not a toy LM checkpoint (format={obj.get('format')!r})")
        config = ToyConfig(**obj["config"])
        arrays = {k: matrix_from_json(v) for k, v in obj["matrices"].items()}
        return cls(config, arrays, int(obj.get("seed", 0)), int(obj.get("step", 0)))


def init_params(config: ToyConfig, seed: int) -> ToyTransformerParams:
    rng = np.random.default_rng(seed)
    c, s = config, config.init_scale

    def normal(shape, std):
        return rng.standard_normal(shape) * (std * s)

    arrays = {
        "embed": normal((c.vocab_size, c.d_model), 1.0 / math.sqrt(c.d_model)),
        "pos_embed": normal((c.max_len, c.d_model), 0.3 / math.sqrt(c.d_model)),
    }
    for i in range(c.n_layers):
        arrays[f"l{i}.w_q"] = normal((c.d_model, c.d_key), 1.0 / math.sqrt(c.d_model))
        arrays[f"l{i}.w_key"] = normal((c.d_model, c.d_key), 1.0 / math.sqrt(c.d_model))
        arrays[f"l{i}.w_v"] = normal((c.d_model, c.d_model), 0.5 / math.sqrt(c.d_model))
        arrays[f"l{i}.mlp_w1"] = normal((c.d_model, c.d_hidden), 1.0 / math.sqrt(c.d_model))
        arrays[f"l{i}.mlp_w2"] = normal((c.d_hidden, c.d_model), 0.5 / math.sqrt(c.d_hidden))
    arrays["unembed"] = normal((c.d_model, c.vocab_size), 1.0 / math.sqrt(c.d_model))
    return ToyTransformerParams(config, arrays, seed=seed, step=0)


def embed_tokens(params: ToyTransformerParams, tokens: np.ndarray) -> np.ndarray:
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    n = tokens.shape[1]
    if n > params.config.max_len:
        raise ArgumentError(f"sequence length {n} exceeds max_len {params.config.max_len}")
    if n == 0:
        raise ArgumentError("empty sequence")
    if tokens.min() < 0 or tokens.max() >= params.config.vocab_size:
        raise ArgumentError("token id outside vocabulary")
    return params.embed[tokens] + params["pos_embed"][:n]


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def forward_hidden(params: ToyTransformerParams, h0: np.ndarray, keep_cache: bool = False):
    """Run the layer stack on input embeddings ``h0`` of shape ``(B, n, d)``.

    Returns the final hidden states and, if requested, the per-layer cache
    consumed by :func:`backward`.
    """
    c = params.config
    n = h0.shape[1]
    mask = _causal_mask(n)
    scale = 1.0 / math.sqrt(c.d_key)
    h = h0
    cache = []
    for i in range(c.n_layers):
        w_q, w_k, w_v = params[f"l{i}.w_q"], params[f"l{i}.w_key"], params[f"l{i}.w_v"]
        q, k, v = h @ w_q, h @ w_k, h @ w_v
        s = (q @ k.transpose(0, 2, 1)) * scale
        s[:, mask] = -np.inf
        s -= s.max(axis=2, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=2, keepdims=True)
        h1 = h + p @ v
        z = h1 @ params[f"l{i}.mlp_w1"]
        r = np.maximum(z, 0.0)
        h2 = h1 + r @ params[f"l{i}.mlp_w2"]
        if keep_cache:
            cache.append((h, q, k, v, p, h1, z, r))
        h = h2
    return h, cache


def backward(params: ToyTransformerParams, cache, h_final, dh: np.ndarray):
    """Reverse pass from ``dL/dh_final``; returns ``(grads, dL/dh0)``.

    ``grads`` covers the layer weights only; the caller adds embedding and
    unembedding terms.
    """
    c = params.config
    scale = 1.0 / math.sqrt(c.d_key)
    grads = {}
    for i in reversed(range(c.n_layers)):
        h, q, k, v, p, h1, z, r = cache[i]
        w1, w2 = params[f"l{i}.mlp_w1"], params[f"l{i}.mlp_w2"]
        grads[f"l{i}.mlp_w2"] = np.einsum("bnh,bnd->hd", r, dh)
        dz = (dh @ w2.T) * (z > 0.0)
        grads[f"l{i}.mlp_w1"] = np.einsum("bnd,bnh->dh", h1, dz)
        dh1 = dh + dz @ w1.T

        dp = dh1 @ v.transpose(0, 2, 1)
        dv = p.transpose(0, 2, 1) @ dh1
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        w_q, w_k, w_v = params[f"l{i}.w_q"], params[f"l{i}.w_key"], params[f"l{i}.w_v"]
        grads[f"l{i}.w_q"] = np.einsum("bnd,bnk->dk", h, dq)
        grads[f"l{i}.w_key"] = np.einsum("bnd,bnk->dk", h, dk)
        grads[f"l{i}.w_v"] = np.einsum("bnd,bne->de", h, dv)
        dh = dh1 + dq @ w_q.T + dk @ w_k.T + dv @ w_v.T
    return grads, dh


def forward(tokens: Sequence[int], params: ToyTransformerParams) -> np.ndarray:
    """Next-token logits after ``tokens``."""
    h, _ = forward_hidden(params, embed_tokens(params, np.asarray(tokens)[None]))
    return h[0, -1] @ params["unembed"]


def last_logits_batch(params: ToyTransformerParams, tokens: np.ndarray) -> np.ndarray:
    h, _ = forward_hidden(params, embed_tokens(params, tokens))
    return h[:, -1] @ params["unembed"]


@dataclass(frozen=True)
class GradientReport:
    loss: float
    embed_grads: np.ndarray  # (seq_len, d)


def loss_from_inputs(h0: np.ndarray, target: int, params: ToyTransformerParams) -> float:
    """Cross-entropy of ``target`` at the last position, from raw input embeddings ``(n, d)``."""
    h, _ = forward_hidden(params, np.asarray(h0, dtype=np.float64)[None])
    return float(-log_softmax(h[0, -1] @ params["unembed"])[target])


def loss_and_input_grads(tokens: Sequence[int], target: int, params: ToyTransformerParams) -> GradientReport:
    """Cross-entropy of ``target`` as the next token and its exact gradient
    with respect to every position's input embedding vector."""
    if not 0 <= target < params.config.vocab_size:
        raise ArgumentError(f"target {target} outside vocabulary")
    h0 = embed_tokens(params, np.asarray(tokens)[None])
    h, cache = forward_hidden(params, h0, keep_cache=True)
    logp = log_softmax(h[0, -1] @ params["unembed"])
    dlogits = np.exp(logp)
    dlogits[target] -= 1.0
    dh = np.zeros_like(h)
    dh[0, -1] = params["unembed"] @ dlogits
    _, dh0 = backward(params, cache, h, dh)
    return GradientReport(float(-logp[target]), dh0[0])


def batch_loss_and_grads(params: ToyTransformerParams, tokens: np.ndarray, targets: np.ndarray):
    """Mean next-token cross-entropy over every position of a ``(B, n)`` batch
    and its gradient for every parameter."""
    b, n = tokens.shape
    h0 = embed_tokens(params, tokens)
    h, cache = forward_hidden(params, h0, keep_cache=True)
    logits = h @ params["unembed"]
    logp = log_softmax(logits, axis=2)
    rows, cols = np.arange(b)[:, None], np.arange(n)[None, :]
    loss = -float(logp[rows, cols, targets].mean())
    dlogits = np.exp(logp)
    dlogits[rows, cols, targets] -= 1.0
    dlogits /= b * n
    grads = {"unembed": np.einsum("bnd,bnv->dv", h, dlogits)}
    layer_grads, dh0 = backward(params, cache, h, dlogits @ params["unembed"].T)
    grads.update(layer_grads)
    g_embed = np.zeros_like(params.embed)
    np.add.at(g_embed, tokens.ravel(), dh0.reshape(-1, dh0.shape[2]))
    grads["embed"] = g_embed
    g_pos = np.zeros_like(params["pos_embed"])
    g_pos[:n] = dh0.sum(axis=0)
    grads["pos_embed"] = g_pos
    return loss, grads


def train(
    corpus: Sequence[Sequence[int]],
    steps: int,
    learning_rate: float,
    batch: int,
    seed: int,
    config: Optional[ToyConfig] = None,
    window: int = 24,
    trajectory: Optional[list] = None,
) -> ToyTransformerParams:
    """Plain SGD on next-token cross-entropy.

    Training windows of ``window + 1`` tokens are drawn (seeded) from the
    corpus lines concatenated into one stream. Per-step mean losses are
    appended to ``trajectory`` when given.
    """
    if steps < 0:
        raise ArgumentError(f"steps must be >= 0, got {steps}")
    stream = [t for line in corpus for t in line]
    if not stream:
        raise ArgumentError("empty corpus")
    if config is None:
        config = ToyConfig(vocab_size=max(stream) + 1)
    validate_tokens(stream, config.vocab_size, "corpus")
    window = min(window, config.max_len, len(stream) - 1)
    if window < 1:
        raise ArgumentError("corpus too short for a training window")
    stream = np.asarray(stream, dtype=np.int64)
    params = init_params(config, seed)
    rng = np.random.default_rng([seed, 1])
    arrays = dict(params.arrays)
    n_starts = len(stream) - window
    offsets = np.arange(window + 1)
    for _ in range(steps):
        starts = rng.integers(0, n_starts, size=batch)
        chunk = stream[starts[:, None] + offsets]
        params = ToyTransformerParams(config, arrays, seed, 0)
        loss, grads = batch_loss_and_grads(params, chunk[:, :-1], chunk[:, 1:])
        if trajectory is not None:
            trajectory.append(loss)
        arrays = {name: arrays[name] - learning_rate * grads[name] for name in arrays}
    return ToyTransformerParams(config, arrays, seed, steps)


class ToyTransformerLM:
    """Adapter exposing trained params through the LM interface, plus the
    input-gradient capability that GCG needs."""

    def __init__(self, params: ToyTransformerParams, vocab: Optional[Vocab] = None):
        self.params = params
        self.vocab = vocab
        self.vocab_size = params.config.vocab_size

    @property
    def embedding_table(self) -> np.ndarray:
        return self.params.embed

    def next_logits(self, seq: Sequence[int]) -> np.ndarray:
        return forward(seq, self.params)

    def next_logprobs_batch(self, seqs: np.ndarray) -> np.ndarray:
        return log_softmax(last_logits_batch(self.params, seqs), axis=1)

    def loss_and_input_grads(self, seq: Sequence[int], target: int) -> GradientReport:
        return loss_and_input_grads(seq, target, self.params)

    def save(self, path, extra: Optional[dict] = None) -> None:
        atomic_write_text(path, json.dumps(self.params.to_json(self.vocab, extra)))

    @classmethod
    def load(cls, path) -> "ToyTransformerLM":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ArgumentError(f"{path}: malformed checkpoint JSON ({exc})") from exc
        vocab = Vocab(tuple(obj["vocab"])) if "vocab" in obj else None
        return cls(ToyTransformerParams.from_json(obj), vocab)
