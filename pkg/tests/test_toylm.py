import json
import math

import numpy as np
import pytest

from oracles import central_difference_errors, scalar_toy_forward
from promptctl.errors import ArgumentError
from promptctl.lmsystem import LmInterface, Vocab, next_distribution
from promptctl.toylm import (
    ToyConfig,
    ToyTransformerLM,
    ToyTransformerParams,
    embed_tokens,
    forward,
    forward_hidden,
    init_params,
    loss_and_input_grads,
    loss_from_inputs,
    train,
)

SMALL = ToyConfig(vocab_size=8, d_model=4, d_key=3, n_layers=1, max_len=10)


def _params(config=SMALL, seed=0):
    return init_params(config, seed)


def test_zero_unembed_gives_uniform():
    p = _params()
    p = p.replace(unembed=np.zeros_like(p["unembed"]))
    logits = forward((1, 2, 3), p)
    assert not np.any(logits)
    assert np.allclose(next_distribution(ToyTransformerLM(p), (1, 2, 3)), 1 / 8)


def test_depth_zero_is_bilinear_readout():
    p = _params(ToyConfig(vocab_size=8, d_model=4, d_key=3, n_layers=0, max_len=10))
    toks = (5, 1, 6)
    expected = (p.embed[6] + p["pos_embed"][2]) @ p["unembed"]
    assert np.allclose(forward(toks, p), expected, atol=1e-14)


@pytest.mark.parametrize("layers", [1, 2])
def test_matches_scalar_reference(layers):
    config = ToyConfig(vocab_size=8, d_model=4, d_key=3, n_layers=layers, max_len=10, init_scale=1.5)
    p = _params(config, seed=layers)
    rng = np.random.default_rng(layers)
    for _ in range(5):
        toks = tuple(int(t) for t in rng.integers(0, 8, size=int(rng.integers(1, 8))))
        ref = scalar_toy_forward(toks, p.arrays, layers)
        assert np.abs(forward(toks, p) - ref).max() < 1e-10


def test_overlength_rejected():
    with pytest.raises(ArgumentError):
        forward(tuple([0] * 11), _params())
    with pytest.raises(ArgumentError):
        forward((9,), _params())


def test_zero_unembed_gradients():
    p = _params()
    p = p.replace(unembed=np.zeros_like(p["unembed"]))
    rep = loss_and_input_grads((1, 2, 3), 4, p)
    assert rep.loss == pytest.approx(math.log(8), abs=1e-12)
    assert not np.any(rep.embed_grads)


def test_severed_attention_isolates_last_position():
    p = _params()
    zeros = {n: np.zeros_like(p[n]) for n in ("l0.w_q", "l0.w_key", "l0.w_v")}
    rep = loss_and_input_grads((1, 2, 3, 4), 5, p.replace(**zeros))
    assert not np.any(rep.embed_grads[:-1])
    assert np.any(rep.embed_grads[-1])


def test_loss_matches_forward():
    p = _params(ToyConfig(vocab_size=8, d_model=6, d_key=3, n_layers=2, max_len=10), seed=4)
    toks = (3, 1, 4, 1, 5)
    rep = loss_and_input_grads(toks, 2, p)
    logits = forward(toks, p)
    ref = -(logits[2] - math.log(np.exp(logits).sum()))
    assert abs(rep.loss - ref) < 1e-9


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    p = _params(ToyConfig(vocab_size=8, d_model=4, d_key=3, n_layers=1, max_len=10, init_scale=1.5), seed=5)
    toks = (1, 7, 2, 6, 3)
    rep = loss_and_input_grads(toks, 4, p)
    h0 = embed_tokens(p, np.asarray(toks)[None])[0]
    coords = [(int(rng.integers(5)), int(rng.integers(4))) for _ in range(20)]
    errs = central_difference_errors(lambda h: loss_from_inputs(h, 4, p), h0, rep.embed_grads, coords)
    assert max(errs) < 1e-5


def test_causal_masking():
    p = _params(ToyConfig(vocab_size=8, d_model=6, d_key=3, n_layers=2, max_len=10), seed=6)
    toks = np.array([[1, 2, 3, 4, 5, 6]])
    h_a, _ = forward_hidden(p, embed_tokens(p, toks))
    changed = toks.copy()
    changed[0, 4:] = [0, 7]
    h_b, _ = forward_hidden(p, embed_tokens(p, changed))
    assert np.array_equal(h_a[0, :4], h_b[0, :4])


def test_steps_zero_returns_init():
    corpus = [(0, 1, 2, 3, 4, 5)]
    trained = train(corpus, 0, 0.5, 4, seed=9, config=SMALL)
    init = init_params(SMALL, 9)
    assert all(np.array_equal(trained[n], init[n]) for n in init.arrays)


def test_training_is_deterministic():
    corpus = [(0, 1, 2, 3, 4, 5, 6, 7), (7, 6, 5, 4)]
    ta, tb = [], []
    a = train(corpus, 30, 0.3, 4, seed=2, config=SMALL, window=5, trajectory=ta)
    b = train(corpus, 30, 0.3, 4, seed=2, config=SMALL, window=5, trajectory=tb)
    assert ta == tb
    assert all(np.array_equal(a[n], b[n]) for n in a.arrays)


def test_training_errors():
    with pytest.raises(ArgumentError):
        train([], 1, 0.1, 2, seed=0, config=SMALL)
    with pytest.raises(ArgumentError):
        train([(0, 1)], -1, 0.1, 2, seed=0, config=SMALL)


def test_memorises_repeated_sentence():
    sentence = tuple(int(t) for t in np.random.default_rng(0).permutation(16))
    config = ToyConfig(vocab_size=16, d_model=16, d_key=8, n_layers=1, max_len=32)
    losses = []
    train([sentence] * 8, 5000, 0.5, 8, seed=0, config=config, window=16, trajectory=losses)
    assert np.mean(losses[-50:]) < 0.1


def test_lm_interface_and_checkpoint(tmp_path):
    lm = ToyTransformerLM(_params(), Vocab.numbered(8))
    assert isinstance(lm, LmInterface)
    seqs = np.array([[1, 2, 3], [4, 5, 6]])
    batch = lm.next_logprobs_batch(seqs)
    for row, s in zip(batch, seqs):
        assert np.allclose(np.exp(row), next_distribution(lm, tuple(s)), atol=1e-14)
        assert abs(np.exp(row).sum() - 1) < 1e-9
    lm.save(tmp_path / "m.json", extra={"note": 1})
    back = ToyTransformerLM.load(tmp_path / "m.json")
    assert back.vocab == lm.vocab
    assert np.array_equal(back.next_logits((1, 2)), lm.next_logits((1, 2)))
    assert json.loads((tmp_path / "m.json").read_text())["run_config"] == {"note": 1}


def test_checkpoint_validation():
    obj = _params().to_json()
    obj["format"] = "other"
    with pytest.raises(ArgumentError):
        ToyTransformerParams.from_json(obj)
    with pytest.raises(ArgumentError):
        _params().replace(embed=np.zeros((3, 3)))
