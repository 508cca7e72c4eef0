import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grmfuzz import isa
from grmfuzz.fuzzmem import PreferencePair
from grmfuzz.policy import (
    NGramPolicy,
    PolicyConfig,
    PolicyError,
    RewardParams,
    VocabularyMismatch,
    mean_margin,
    pretrain,
    sample_next,
    sequence_reward,
    simpo_gradient,
    simpo_loss,
    simpo_update,
)

TOY = PolicyConfig(order=2, min_count=1, pretrain_epochs=5)


def toy_policy(V=7, seed=0):
    rng = np.random.default_rng(seed)
    corpus = [list(rng.integers(0, V, 12)) for _ in range(40)]
    pol = pretrain(corpus, V, TOY)
    pol.logits += rng.normal(0, 0.5, pol.logits.shape)
    pol.invalidate()
    return pol


def toy_pairs(V=7, n=6, seed=1):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        w = tuple(int(t) for t in rng.integers(0, V, rng.integers(2, 7)))
        l_ = tuple(int(t) for t in rng.integers(0, V, rng.integers(2, 7)))
        if w != l_:
            out.append(PreferencePair(w, l_))
    return out


def finite_difference(pol, pairs, rp, row, tok, h=1e-5):
    old = pol.logits[row, tok]
    pol.logits[row, tok] = old + h
    up = simpo_loss(pol, pairs, rp)
    pol.logits[row, tok] = old - h
    down = simpo_loss(pol, pairs, rp)
    pol.logits[row, tok] = old
    return (up - down) / (2 * h)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_central_differences(seed):
    pol = toy_policy(seed=seed)
    pairs = toy_pairs(seed=seed + 10)
    rp = RewardParams()
    _, grads, _ = simpo_gradient(pol, pairs, rp)
    for row, g in grads.items():
        for tok in range(pol.V):
            fd = finite_difference(pol, pairs, rp, row, tok)
            assert abs(g[tok] - fd) <= 1e-5 * max(abs(fd), 1e-3), (row, tok, g[tok], fd)


def test_loss_is_ln2_at_zero_margin_surplus():
    pol = toy_policy()
    rp = RewardParams(reward_scale=10.0, margin=0.8)
    # shift the loser's reward so that r_w - r_l equals the margin exactly
    pair = toy_pairs(n=1)[0]
    diff = sequence_reward(pol, pair.winner, rp) - sequence_reward(pol, pair.loser, rp)
    rp0 = RewardParams(reward_scale=10.0, margin=diff)
    assert abs(simpo_loss(pol, [pair], rp0) - math.log(2)) <= 1e-9


def test_small_step_never_decreases_mean_margin():
    for seed in range(10):
        pol = toy_policy(seed=seed)
        pairs = toy_pairs(seed=seed + 100)
        before = mean_margin(pol, pairs)
        simpo_update(pol, pairs, lr=1e-3)
        assert mean_margin(pol, pairs) >= before - 1e-12


def test_repeated_updates_learn_the_preference():
    pol = toy_policy()
    pairs = toy_pairs()
    first = simpo_loss(pol, pairs)
    for _ in range(200):
        simpo_update(pol, pairs, lr=0.5)
    assert simpo_loss(pol, pairs) < first


def test_pretraining_uniform_corpus_is_near_log_v(vocab):
    rng = np.random.default_rng(0)
    V = len(vocab)
    train = [list(rng.integers(0, V, 40)) for _ in range(2000)]
    test = [list(rng.integers(0, V, 40)) for _ in range(300)]
    pol = pretrain(train, vocab)
    assert abs(pol.nll(test) / math.log(V) - 1) < 0.05


def test_pretraining_single_instruction(vocab):
    inst = isa.parse_line("csrrs x5, mstatus, x6")
    seq = [t.id for t in isa.instruction_tokens(inst, vocab)] + [vocab.eoi.id]
    pol = pretrain([seq * 6] * 100, vocab)
    prob, ctx = 1.0, []
    for tok in seq:
        prob *= pol.distribution(ctx)[tok]
        ctx.append(tok)
    assert prob > 0.99


@settings(max_examples=20)
@given(st.integers(0, 2**32))
def test_sampling_stays_in_vocab(seed):
    pol = toy_policy()
    rng = np.random.default_rng(seed)
    ctx = []
    for _ in range(20):
        ctx.append(sample_next(pol, ctx, rng))
    assert all(0 <= t < pol.V for t in ctx)


def test_greedy_sampling_is_argmax():
    pol = toy_policy()
    rng = np.random.default_rng(0)
    row = pol.row_for([], 0)
    assert sample_next(pol, [], rng, temperature=0) == int(np.argmax(pol.logits[row]))


def test_distribution_sums_to_one():
    pol = toy_policy()
    for ctx in ([], [1], [1, 2, 3]):
        assert pol.distribution(ctx).sum() == pytest.approx(1.0)


def test_save_load_roundtrip(tmp_path, vocab):
    from grmfuzz.engine import pretrain_corpus

    pol = pretrain(pretrain_corpus(vocab, 200), vocab, PolicyConfig(pretrain_epochs=3))
    path = tmp_path / "p.npz"
    pol.save(path)
    back = NGramPolicy.load(path, vocab)
    assert back.digest() == pol.digest()
    other = isa.build_vocabulary(isa.SubsetConfig(mnemonics=("add", "addi")))
    with pytest.raises(VocabularyMismatch):
        NGramPolicy.load(path, other)


def test_input_validation():
    with pytest.raises(PolicyError):
        pretrain([], 5)
    with pytest.raises(PolicyError):
        pretrain([[9]], 5)
    pol = toy_policy()
    with pytest.raises(PolicyError):
        simpo_gradient(pol, [])
    with pytest.raises(PolicyError):
        simpo_gradient(pol, [PreferencePair((99,), (1,))])
    with pytest.raises(PolicyError):
        pretrain([[1, 2]], 5, PolicyConfig(prior_mode="nope"))


@pytest.mark.parametrize("mode", ["fixed", "evidence", "hybrid"])
def test_prior_modes_fit(mode):
    rng = np.random.default_rng(0)
    corpus = [list(rng.integers(0, 5, 10)) for _ in range(50)]
    pol = pretrain(corpus, 5, PolicyConfig(order=1, min_count=1, prior_mode=mode))
    assert np.isfinite(pol.logits).all()
    assert pol.nll(corpus) < math.log(5) + 0.1
