import itertools

import numpy as np
import pytest

import planted
from oracles import best_single_swap, full_scan_prepend
from promptctl.errors import ArgumentError, CapabilityError
from promptctl.lmsystem import NgramLM, is_output_reached, token_logprob
from promptctl.promptopt import (
    back_off_prompt,
    default_gcg_batch,
    default_gcg_topk,
    gcg,
    greedy_back_generate,
)


def test_greedy_k1_is_full_scan(tiny_lm):
    rng = np.random.default_rng(0)
    for _ in range(10):
        x0 = tuple(int(t) for t in rng.integers(0, 12, size=4))
        y = int(rng.integers(12))
        out = greedy_back_generate(x0, y, 1, tiny_lm)
        assert out.prompt == (full_scan_prepend(tiny_lm, x0, y)[0],)


def test_greedy_per_step_matches_rescan():
    rng = np.random.default_rng(1)
    table = {ctx: rng.standard_normal(4) for ctx in itertools.product(range(4), repeat=2)}
    lm = NgramLM(4, 3, table)
    for x0, y in [((0,), 3), ((2,), 1), ((3,), 0)]:
        out = greedy_back_generate(x0, y, 2, lm)
        suffix = x0
        chosen = []
        for _ in range(2):
            tok, _ = full_scan_prepend(lm, suffix, y)
            chosen.insert(0, tok)
            suffix = (tok,) + suffix
        assert out.prompt == tuple(chosen)


def test_greedy_evaluation_count(tiny_lm):
    for k in (1, 2, 3):
        assert greedy_back_generate((1, 2), 3, k, tiny_lm).evaluations == k * 12


def test_greedy_k0_is_empty_prompt():
    lm = planted.one_token_switch()
    out = greedy_back_generate(planted.X0, 1, 0, lm)
    assert out.prompt == () and out.success and out.evaluations == 0


def test_greedy_trace_records_whether_argmax_survives():
    # y = 1 is already the continuation; prepending 2 would flip it to 3
    lm = planted.one_token_switch()
    out = greedy_back_generate(planted.X0, 1, 1, lm)
    assert out.prompt == (0,)
    assert out.success and out.trace[0]["argmax_is_target"]
    # here the P(y)-maximising prefix also breaks the original argmax
    flip = NgramLM(4, 3, {(1, 0): [-9.0, 1.0, -9.0, 1.05]}, default=[0.9, 1.0, 0.9, 0.9])
    out = greedy_back_generate(planted.X0, 1, 1, flip)
    assert out.prompt == (1,)
    assert not out.success and not out.trace[0]["argmax_is_target"]


def test_success_matches_is_output_reached(tiny_lm):
    rng = np.random.default_rng(2)
    for _ in range(5):
        x0 = tuple(int(t) for t in rng.integers(0, 12, size=3))
        y = int(rng.integers(12))
        for out in (greedy_back_generate(x0, y, 2, tiny_lm), gcg(x0, y, 2, tiny_lm, iters=3, seed=1)):
            assert out.success == is_output_reached(x0, out.prompt, (y,), tiny_lm)
            assert out.achieved_logprob == pytest.approx(token_logprob(tiny_lm, out.prompt + x0, y), abs=1e-12)


def test_gcg_iters0_returns_seeded_start(tiny_lm):
    out = gcg((1, 2), 3, 4, tiny_lm, iters=0, seed=11)
    assert out.prompt == tuple(int(t) for t in np.random.default_rng(11).integers(0, 12, size=4))
    assert out.evaluations == 0


def test_gcg_deterministic(tiny_lm):
    a = gcg((1, 2, 3), 5, 3, tiny_lm, iters=5, seed=7)
    b = gcg((1, 2, 3), 5, 3, tiny_lm, iters=5, seed=7)
    assert a.prompt == b.prompt and a.trace == b.trace


def test_gcg_exhaustive_matches_all_swaps(tiny_lm):
    rng = np.random.default_rng(3)
    for i in range(10):
        x0 = tuple(int(t) for t in rng.integers(0, 12, size=3))
        y, k = int(rng.integers(12)), int(rng.integers(1, 4))
        start = gcg(x0, y, k, tiny_lm, iters=0, seed=i).prompt
        out = gcg(x0, y, k, tiny_lm, iters=1, seed=i, exhaustive=True)
        assert out.prompt == best_single_swap(tiny_lm, x0, y, start)[0]


def test_gcg_exhaustive_never_degrades(tiny_lm):
    out = gcg((4, 5, 6), 7, 3, tiny_lm, iters=8, seed=0, exhaustive=True)
    lps = [t["logprob"] for t in out.trace]
    assert all(b >= a for a, b in zip(lps, lps[1:]))


def test_gcg_needs_gradients():
    with pytest.raises(CapabilityError):
        gcg(planted.X0, 3, 2, planted.one_token_switch())


def test_gcg_argument_errors(tiny_lm):
    with pytest.raises(ArgumentError):
        gcg((1,), 2, 0, tiny_lm)
    with pytest.raises(ArgumentError):
        gcg((1,), 2, 2, tiny_lm, iters=-1)
    with pytest.raises(ArgumentError):
        gcg((1,), 99, 2, tiny_lm)


def test_desk_defaults():
    assert default_gcg_topk(64) == 16 and default_gcg_topk(8) == 4 and default_gcg_topk(10**5) == 128
    assert default_gcg_batch(4, 16) == 64 and default_gcg_batch(10, 128) == 768


def test_backoff_stops_at_k1():
    res = back_off_prompt(planted.X0, planted.TARGET, planted.one_token_switch())
    assert res.required_k == 1 and res.outcome.prompt == (2,)
    assert [a["k"] for a in res.attempts] == [1]


def test_backoff_planted_two_token_prompt():
    lm = planted.two_token_switch()
    for p in range(4):
        assert not is_output_reached(planted.X0, (p,), (planted.TARGET,), lm)
    winners = [u for u in itertools.product(range(4), repeat=2)
               if is_output_reached(planted.X0, u, (planted.TARGET,), lm)]
    assert winners == [(1, 2)]
    res = back_off_prompt(planted.X0, planted.TARGET, lm)
    assert res.required_k == 2 and res.outcome.prompt == (1, 2)


def test_backoff_adversarial_failure():
    lm = planted.never_target()
    for n in range(4):
        for u in itertools.product(range(4), repeat=n):
            assert not is_output_reached(planted.X0, u, (planted.TARGET,), lm)
    res = back_off_prompt(planted.X0, planted.TARGET, lm)
    assert res.failed and res.outcome is None
    assert [a.get("skipped") for a in res.attempts if a["method"] == "gcg"] == ["no input gradients"] * 4


def test_backoff_schedule_validation():
    lm = planted.one_token_switch()
    with pytest.raises(ArgumentError):
        back_off_prompt(planted.X0, 3, lm, greedy_ks=(), gcg_ks=())
    with pytest.raises(ArgumentError):
        back_off_prompt(planted.X0, 3, lm, greedy_ks=(2, 1), gcg_ks=())


def test_backoff_deterministic(tiny_lm):
    a = back_off_prompt((1, 2, 3), 9, tiny_lm, gcg_iters=3, seed=4)
    b = back_off_prompt((1, 2, 3), 9, tiny_lm, gcg_iters=3, seed=4)
    assert a.required_k == b.required_k and a.attempts == b.attempts
