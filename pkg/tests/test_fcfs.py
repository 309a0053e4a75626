import numpy as np
import pytest
from hypothesis import given, strategies as st

from fcfsmatch.fcfs import (
    ExchangedPath,
    ItemSequence,
    Matching,
    decompose_perfect_blocks,
    exchange_transform,
    fcfs_match_finite,
    naive_reversal_differs,
    reversed_rematch_check,
    unmatched_counts,
    verify_fcfs,
)
from fcfsmatch.model import nn_model, random_model
from oracles import brute_force_fcfs

NN = nn_model()


@st.composite
def model_and_words(draw, max_len=12):
    seed = draw(st.integers(0, 10**6))
    I = draw(st.integers(1, 4))
    J = draw(st.integers(1, 4))
    m = random_model(np.random.default_rng(seed), I, J)
    cw = draw(st.lists(st.integers(0, I - 1), max_size=max_len))
    sw = draw(st.lists(st.integers(0, J - 1), max_size=max_len))
    return m, ItemSequence(cw, sw)


@st.composite
def nn_pairs(draw, max_len=16):
    n = draw(st.integers(0, max_len))
    cw = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    sw = draw(st.lists(st.integers(0, 2), min_size=n, max_size=n))
    return ItemSequence(cw, sw)


def test_hand_example():
    # c1 c2 / s1 s2: c1 cannot take s1, c2 takes s1, c1 takes s2
    seq = ItemSequence.from_labels(NN, ["c1", "c2"], ["s1", "s2"])
    mt = fcfs_match_finite(NN, seq)
    assert mt.links == frozenset({(1, 0), (0, 1)})
    assert mt.is_perfect


@given(model_and_words())
def test_orders_agree_and_match_oracle(mw):
    m, seq = mw
    a = fcfs_match_finite(m, seq, "server")
    assert a.links == brute_force_fcfs(m, seq.customers, seq.servers)
    assert fcfs_match_finite(m, seq, "customer").links == a.links
    assert verify_fcfs(m, seq, a)
    if len(seq.customers) == len(seq.servers):
        assert fcfs_match_finite(m, seq, "pair").links == a.links


@given(model_and_words())
def test_no_compatible_unmatched_pair_left(mw):
    m, seq = mw
    mt = fcfs_match_finite(m, seq)
    for i in mt.unmatched_customers:
        for j in mt.unmatched_servers:
            assert not m.compatible(seq.customers[i], seq.servers[j])


def test_verify_rejects_non_fcfs():
    seq = ItemSequence.from_labels(NN, ["c2", "c2"], ["s1"])
    assert verify_fcfs(NN, seq, Matching(frozenset({(0, 0)}), 2, 1))
    # the later customer took the server: not first-come-first-served
    assert not verify_fcfs(NN, seq, Matching(frozenset({(1, 0)}), 2, 1))
    # incompatible link
    assert not verify_fcfs(NN, ItemSequence([0], [0]), Matching(frozenset({(0, 0)}), 1, 1))


def test_unknown_order():
    with pytest.raises(ValueError):
        fcfs_match_finite(NN, ItemSequence([0], [1]), "random")


@given(model_and_words(), st.integers(0, 3))
def test_monotonicity(mw, c0):
    m, seq = mw
    c0 = c0 % m.I
    K, L = unmatched_counts(m, seq)
    K2, L2 = unmatched_counts(m, ItemSequence((c0,) + seq.customers, seq.servers))
    assert (K2, L2) in {(K + 1, L), (K, L - 1)}


@given(model_and_words(max_len=16), st.integers(0, 16), st.integers(0, 16))
def test_subadditivity(mw, cut_c, cut_s):
    m, seq = mw
    a = min(cut_c, len(seq.customers))
    b = min(cut_s, len(seq.servers))
    K, L = unmatched_counts(m, seq)
    K1, L1 = unmatched_counts(m, ItemSequence(seq.customers[:a], seq.servers[:b]))
    K2, L2 = unmatched_counts(m, ItemSequence(seq.customers[a:], seq.servers[b:]))
    assert K <= K1 + K2 and L <= L1 + L2


@given(nn_pairs())
def test_exchange_is_an_involution(seq):
    mt = fcfs_match_finite(NN, seq)
    once = exchange_transform(seq, mt)
    twice = exchange_transform(once)
    assert twice == ExchangedPath.from_sequence(seq, mt)


def test_exchange_needs_matching():
    with pytest.raises(ValueError):
        exchange_transform(ItemSequence([0], [1]))


@given(nn_pairs(max_len=24))
def test_blocks_reverse_exactly(seq):
    mt = fcfs_match_finite(NN, seq, "pair")
    for lo, hi in decompose_perfect_blocks(seq, mt):
        sub = ItemSequence(seq.customers[lo:hi], seq.servers[lo:hi])
        links = frozenset((m - lo, n - lo) for m, n in mt.links if lo <= m < hi)
        block = Matching(links, hi - lo, hi - lo)
        assert block.is_perfect
        assert fcfs_match_finite(NN, sub).links == links
        assert reversed_rematch_check(NN, sub, block)


def test_blocks_are_cut_where_pair_state_is_empty():
    seq = ItemSequence.from_labels(NN, ["c3", "c1", "c2", "c1"], ["s1", "s1", "s2", "s2"])
    mt = fcfs_match_finite(NN, seq)
    assert decompose_perfect_blocks(seq, mt) == [(0, 1), (1, 3), (3, 4)]


def test_reversed_check_needs_perfect_block():
    seq = ItemSequence([0], [0])
    with pytest.raises(ValueError):
        reversed_rematch_check(NN, seq, fcfs_match_finite(NN, seq))


def test_naive_reversal_can_fail():
    rng = np.random.default_rng(5)
    found = False
    for _ in range(2000):
        n = int(rng.integers(2, 8))
        seq = ItemSequence(rng.choice(3, n, p=NN.alpha), rng.choice(3, n, p=NN.beta))
        mt = fcfs_match_finite(NN, seq)
        if mt.is_perfect and naive_reversal_differs(NN, seq, mt):
            found = True
            assert reversed_rematch_check(NN, seq, mt)
            break
    assert found


def test_json_roundtrip():
    mt = Matching(frozenset({(0, 1), (1, 0)}), 2, 2)
    text = mt.to_json(base_index=10)
    assert text == "[[10, 11], [11, 10]]"
    assert Matching.from_json(text, 2, 2, base_index=10) == mt
