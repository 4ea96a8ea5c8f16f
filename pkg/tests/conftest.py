from __future__ import annotations

import math

import numpy as np
import pytest

from promptctl.attention import AttentionParams, decompose_output
from promptctl.harness.corpus import synthetic_corpus
from promptctl.lmsystem import Vocab
from promptctl.toylm import ToyConfig, ToyTransformerLM, init_params, train

ACCEPTANCE_LINES: list[str] = []

DESK_TRAIN = {"steps": 1500, "learning_rate": 1.0, "batch": 16, "seed": 0}


def random_attention_instance(rng: np.random.Generator, max_m=4, max_k=4, max_d=6):
    """Small random (params, x0, m_u, k) mix that exercises both verdicts.

    Norm caps are spread log-uniformly and imposed rows are rescaled so the
    softmax is neither saturated nor flat.
    """
    d_in, d_key, d_out = (int(rng.integers(2, max_d + 1)) for _ in range(3))
    m = int(rng.integers(1, max_m + 1))
    k = int(rng.integers(0, max_k + 1))
    params = AttentionParams.random(d_in, d_key, d_out, rng)
    x0 = rng.standard_normal((m, d_in)) * rng.uniform(0.5, 3.0) / math.sqrt(d_in)
    m_u = float(10 ** rng.uniform(-2.0, 0.3))
    return params, x0, k, m_u


def admissible_controls(rng, n, k, d_in, m_u):
    """``n`` control matrices with every row norm at most ``m_u``."""
    u = rng.standard_normal((n, k, d_in))
    norms = np.linalg.norm(u, axis=2, keepdims=True)
    radii = m_u * rng.uniform(0.0, 1.0, size=(n, k, 1)) ** 0.25
    return u / np.where(norms > 0, norms, 1.0) * radii


def planted_target(rng, params, x0, k, m_u):
    u = admissible_controls(rng, 1, k, params.d_in, m_u)[0]
    y_u, y_x = decompose_output(u, x0, params)
    return y_u + y_x


@pytest.fixture(scope="session")
def desk_corpus():
    return synthetic_corpus(vocab_size=64, n_templates=4, template_len=32, n_lines=200, noise=0.1, seed=0)


@pytest.fixture(scope="session")
def desk_lm(desk_corpus):
    params = train(desk_corpus, config=ToyConfig(), **DESK_TRAIN)
    return ToyTransformerLM(params, Vocab.numbered(64))


@pytest.fixture(scope="session")
def tiny_lm():
    """Untrained |V| = 12 model; enough structure for optimiser mechanics."""
    config = ToyConfig(vocab_size=12, d_model=8, d_key=4, n_layers=1, max_len=24, init_scale=2.0)
    return ToyTransformerLM(init_params(config, seed=3), Vocab.numbered(12))


@pytest.fixture
def acceptance():
    """Record a PASS/FAIL line for the terminal summary and echo it."""
    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
