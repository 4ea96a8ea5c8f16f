import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import planted
from promptctl.errors import ArgumentError
from promptctl.lmsystem import (
    LmInterface,
    NgramLM,
    Vocab,
    bigram_lm_from_corpus,
    generate,
    is_output_reached,
    next_distribution,
    read_corpus,
    readout,
    transition,
    write_corpus,
)

A, B, C = 0, 1, 2


def _bigram_argmax_b():
    return NgramLM(3, 2, {(A,): [0.1, 2.0, 0.3]})


def test_vocab_lookup_and_round_trip(tmp_path):
    v = Vocab(("a", "b", "c"))
    assert v.size == 3 and v.id("c") == 2
    assert v.decode(v.encode(["b", "a"])) == ["b", "a"]
    with pytest.raises(ArgumentError):
        v.id("z")
    with pytest.raises(ArgumentError):
        Vocab(("a", "a"))
    v.save(tmp_path / "v.json")
    assert Vocab.load(tmp_path / "v.json") == v


def test_numbered_vocab_sorts_by_id():
    v = Vocab.numbered(12)
    assert list(v.tokens) == sorted(v.tokens)


def test_protocol():
    assert isinstance(_bigram_argmax_b(), LmInterface)


def test_transition_appends_input():
    assert transition((A, B), C, _bigram_argmax_b()) == (A, B, C)


def test_transition_decodes_argmax():
    assert transition((A,), None, _bigram_argmax_b()) == (A, B)


def test_transition_ties_to_lowest_id():
    lm = NgramLM(3, 2, {(A,): [0.0, 5.0, 5.0]})
    assert transition((A,), None, lm) == (A, B)


def test_transition_empty_state_without_input():
    with pytest.raises(ArgumentError):
        transition((), None, _bigram_argmax_b())


def test_transition_rejects_bad_ids():
    with pytest.raises(ArgumentError):
        transition((A,), 7, _bigram_argmax_b())


def test_iterated_transition_is_composition():
    lm = bigram_lm_from_corpus([(0, 1, 2, 0, 1, 2, 0)], smoothing=0.1)
    state = (0,)
    for _ in range(5):
        state = transition(state, None, lm)
    assert state == (0,) + generate((0,), (), 5, lm)


def test_readout():
    s = (A, B, C)
    assert readout(s, 1) == (C,)
    assert readout(s, 3) == s
    assert readout(s, 0) == ()
    with pytest.raises(ArgumentError):
        readout(s, 4)


def test_generate_without_control():
    lm = _bigram_argmax_b()
    assert generate((A,), (), 1, lm) == (B,)


def test_generate_prompt_flips_output():
    lm = planted.one_token_switch()
    assert generate(planted.X0, (), 1, lm) == (1,)
    assert generate(planted.X0, (2,), 1, lm) == (planted.TARGET,)


def test_generate_two_steps_is_chained():
    lm = bigram_lm_from_corpus([(0, 2, 1, 3, 0, 2, 1, 3)], smoothing=0.5)
    first = generate((0,), (), 1, lm)
    second = generate((0,) + first, (), 1, lm)
    assert generate((0,), (), 2, lm) == first + second


def test_is_output_reached_self_consistent():
    lm = bigram_lm_from_corpus([(0, 1, 2, 3, 1, 0)], smoothing=1.0)
    for u in [(), (2,), (3, 1)]:
        y = generate((1, 2), u, 2, lm)
        assert is_output_reached((1, 2), u, y, lm)


def test_is_output_reached_rejects_bad_target():
    with pytest.raises(ArgumentError):
        is_output_reached((0,), (), (9,), _bigram_argmax_b())


def test_only_planted_token_reaches():
    lm = planted.one_token_switch()
    hits = [p for p in range(4) if is_output_reached(planted.X0, (p,), (planted.TARGET,), lm)]
    assert hits == [2]


def test_bigram_count_ratio():
    lm = bigram_lm_from_corpus([(0, 1, 0, 1)], smoothing=1e-9)
    assert next_distribution(lm, (0,))[1] == pytest.approx(1.0, abs=1e-8)


def test_bigram_uniform_corpus():
    lm = bigram_lm_from_corpus([(0, 0, 1, 1, 0)], smoothing=1.0)
    assert np.allclose(next_distribution(lm, (0,)), [0.5, 0.5], atol=1e-9)


def test_bigram_heavy_smoothing_is_uniform():
    lm = bigram_lm_from_corpus([(0, 1, 1, 1, 1, 2)], smoothing=1e9)
    assert np.allclose(next_distribution(lm, (1,)), 1 / 3, atol=1e-8)


def test_bigram_uses_last_token_only():
    lm = bigram_lm_from_corpus([(0, 1, 2, 0, 2, 1)], smoothing=0.5)
    assert np.array_equal(lm.next_logits((0, 1, 2)), lm.next_logits((2,)))


def test_bigram_errors():
    with pytest.raises(ArgumentError):
        bigram_lm_from_corpus([], smoothing=1.0)
    with pytest.raises(ArgumentError):
        bigram_lm_from_corpus([(0, 1)], smoothing=0.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(0, 4), min_size=2, max_size=12), min_size=1, max_size=5),
       st.floats(0.01, 10.0))
def test_distribution_is_valid(corpus, smoothing):
    lm = bigram_lm_from_corpus(corpus, smoothing, vocab_size=5)
    for t in range(5):
        p = next_distribution(lm, (t,))
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
        assert int(np.argmax(p)) == int(np.argmax(lm.next_logits((t,))))


def test_batch_matches_single():
    lm = planted.two_token_switch()
    seqs = np.array([[1, 2, 0], [2, 2, 0], [3, 1, 0]])
    batch = lm.next_logprobs_batch(seqs)
    for row, s in zip(batch, seqs):
        p = next_distribution(lm, tuple(s))
        assert np.allclose(np.exp(row), p, atol=1e-15)


def test_transition_deterministic():
    lm = bigram_lm_from_corpus([(0, 3, 1, 2, 2, 0, 1)], smoothing=0.3)
    assert all(transition((0, 1), None, lm) == transition((0, 1), None, lm) for _ in range(5))


def test_reachable_sets_nest():
    rng = np.random.default_rng(0)
    for trial in range(5):
        lm = NgramLM(4, 3, {ctx: rng.standard_normal(4) for ctx in itertools.product(range(4), repeat=2)})
        x0 = (int(rng.integers(4)),)
        prev: set = set()
        for k in range(4):
            reached = {generate(x0, u, 1, lm)[0]
                       for n in range(k + 1) for u in itertools.product(range(4), repeat=n)}
            assert prev <= reached
            prev = reached


def test_corpus_round_trip(tmp_path):
    vocab = Vocab(("the", "cat", "sat"))
    corpus = [(0, 1, 2), (2, 1)]
    write_corpus(tmp_path / "c.txt", corpus, vocab)
    back, v = read_corpus(tmp_path / "c.txt", vocab)
    assert back == corpus and v == vocab
    _, inferred = read_corpus(tmp_path / "c.txt")
    assert inferred.tokens == ("cat", "sat", "the")


def test_ngram_short_context_used_as_is():
    lm = NgramLM(3, 4, {(1, 2): [0.0, 0.0, 5.0], (0, 1, 2): [5.0, 0.0, 0.0]})
    assert lm.next_logits((1, 2))[2] == 5.0
    assert lm.next_logits((0, 1, 2))[0] == 5.0
    assert not np.any(lm.next_logits((2, 1, 2)))
