"""Synthetic corpora standing in for natural text at desk scale."""

from __future__ import annotations

import numpy as np

from ..errors import ArgumentError


def synthetic_corpus(
    vocab_size: int = 64,
    n_templates: int = 4,
    template_len: int = 32,
    n_lines: int = 200,
    noise: float = 0.1,
    seed: int = 0,
) -> list[tuple[int, ...]]:
    """Lines copied from a few random template sentences, with each token
    independently replaced by a uniform random token with probability ``noise``.

    A model can memorise the templates; the noise leaves next tokens it cannot
    predict, which is what makes prompting them a non-trivial control problem.
    """
    if vocab_size < 2 or n_templates < 1 or template_len < 2 or n_lines < 0:
        raise ArgumentError("synthetic_corpus: degenerate size parameters")
    if not 0.0 <= noise <= 1.0:
        raise ArgumentError(f"noise must be in [0, 1], got {noise}")
    rng = np.random.default_rng(seed)
    templates = rng.integers(0, vocab_size, size=(n_templates, template_len))
    which = rng.integers(0, n_templates, size=n_lines)
    flips = rng.random((n_lines, template_len)) < noise
    replacements = rng.integers(0, vocab_size, size=(n_lines, template_len))
    lines = np.where(flips, replacements, templates[which])
    return [tuple(int(t) for t in line) for line in lines]
