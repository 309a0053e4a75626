import math

import numpy as np
import pytest

from fcfsmatch import analytic as an
from fcfsmatch import chains as ch
from fcfsmatch import sim
from fcfsmatch.fcfs import ItemSequence, fcfs_match_finite, unmatched_counts
from fcfsmatch.model import nn_model, validate_model


@pytest.fixture(scope="module")
def nn_cycles(nn):
    return sim.regeneration_estimates(nn, 50_000, seed=2024)


def test_stream_determinism_and_independence(nn):
    a, b = sim.SeededStream(nn, 5), sim.SeededStream(nn, 5)
    xa = [a.next_customer() for _ in range(100)]
    assert xa == [b.next_customer() for _ in range(100)]
    # server draws do not perturb the customer line
    c = sim.SeededStream(nn, 5)
    xc = []
    for _ in range(100):
        c.next_server()
        xc.append(c.next_customer())
    assert xc == xa


def test_stream_frequencies(nn):
    s = sim.SeededStream(nn, 1)
    n = 100_000
    cs = np.bincount([s.next_customer() for _ in range(n)], minlength=3) / n
    ss = np.bincount([s.next_server() for _ in range(n)], minlength=3) / n
    assert np.allclose(cs, nn.alpha, atol=0.01)
    assert np.allclose(ss, nn.beta, atol=0.01)


def test_pair_engine_matches_finite_fcfs(nn):
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        cw = rng.choice(3, n, p=nn.alpha).tolist()
        sw = rng.choice(3, n, p=nn.beta).tolist()
        eng = sim.PairEngine(nn)
        links = set()
        for a, b in zip(cw, sw):
            links |= {(m, k) for m, k, _, _ in eng.step(a, b)}
        assert frozenset(links) == fcfs_match_finite(nn, ItemSequence(cw, sw)).links
        state = eng.state()
        ref = (), ()
        for a, b in zip(cw, sw):
            ref = ch.o_transition(nn, ref, a, b)
        assert state == ref


def test_single_edge_model_always_empty():
    m = validate_model([("c", 1.0)], [("s", 1.0)], [("c", "s")])
    run = sim.simulate_chain(m, "O", 500, seed=3)
    assert run.empty_visits == 500 and run.sizes.max() == 0
    for kind in ch.KINDS:
        assert sim.simulate_chain(m, kind, 50, seed=3).final_state == ch.empty_state(kind)


@pytest.mark.parametrize("kind", ch.KINDS)
def test_same_seed_same_run(nn, kind):
    a = sim.simulate_chain(nn, kind, 2000, seed=9)
    b = sim.simulate_chain(nn, kind, 2000, seed=9)
    assert a.final_state == b.final_state
    assert np.array_equal(a.sizes, b.sizes)
    assert a.match_log == b.match_log
    assert ch.is_valid_state(nn, kind, a.final_state)


def test_match_log_columns(nn):
    run = sim.simulate_chain(nn, "O", 1000, seed=4)
    assert run.match_log
    for m, n, i, j in run.match_log:
        assert nn.compatible(i, j)


def test_qs_empty_fraction(nn):
    steps = 400_000
    run = sim.simulate_chain(nn, "Qs", steps, seed=12)
    batches = (run.sizes == 0).reshape(100, -1).mean(axis=1)
    est = batches.mean()
    se = batches.std(ddof=1) / math.sqrt(len(batches))
    assert abs(est - 0.25) <= 3 * se


def test_fast_engines_agree_with_generic_step(nn):
    # same draws drive the per-type queue engine and the generic kernel
    for kind in ("Qs", "Qc", "O"):
        run = sim.simulate_chain(nn, kind, 3000, seed=21)
        stream = sim.SeededStream(nn, 21)
        state = ch.empty_state(kind)
        for _ in range(3000):
            state = ch.step(nn, kind, state, stream)
        assert state == run.final_state


def test_rates_and_kac(nn, nn_cycles):
    cs, rep = nn_cycles
    assert rep.rates[0, 0] == 0 and rep.rates_se[0, 0] == 0
    R = an.matching_rates(an.StationaryEvaluator(nn))
    for i, j in nn.edges:
        assert 0 < rep.rates_se[i, j] < 0.01
        assert abs(rep.rates[i, j] - R[i, j]) <= 4 * rep.rates_se[i, j]
    e, se = rep.empty_fraction
    assert abs(e - 0.25) <= 4 * se
    assert cs.mean_cycle_length * e == pytest.approx(1.0, rel=1e-12)  # identical by construction
    assert cs.mean_cycle_length * 0.25 == pytest.approx(1.0, abs=0.05)


def test_disjoint_seeds_agree(nn, nn_cycles):
    _, a = nn_cycles
    _, b = sim.regeneration_estimates(nn, 20_000, seed=7)
    for i, j in nn.edges:
        diff = a.rates[i, j] - b.rates[i, j]
        assert abs(diff) <= 4 * math.hypot(a.rates_se[i, j], b.rates_se[i, j])


def test_replicas_merge(nn):
    cs, rep = sim.regeneration_estimates(nn, 4000, seed=3, replicas=4)
    assert cs.cycles == 4000 and len(cs.cycle_lengths) == 4000
    cs2, rep2 = sim.regeneration_estimates(nn, 4000, seed=3, replicas=4)
    assert np.array_equal(rep.rates, rep2.rates)


def test_link_pmf_per_edge_within_3_sigma(nn, nn_cycles):
    _, rep = nn_cycles
    ev = an.StationaryEvaluator(nn)
    worst = 0.0
    for i, j in sorted(nn.edges):
        d = an.link_length_distribution(ev, j, c_i=i)
        n = rep.counts[(i, j)]
        for k, p in zip(*d.support()):
            if p * n < 100:
                continue
            est, se = rep.pmf((i, j), int(k))
            worst = max(worst, abs(est - p) / se)
    assert worst <= 3


def test_zs_occupancy_within_3_sigma(nn):
    est, _ = sim.occupancy_estimates(nn, "Zs", 100_000, seed=8, max_len=3)
    ev = an.StationaryEvaluator(nn)
    states = ch.enumerate_states(nn, "Zs", 3)
    for z in states:
        e, se = est.get(z, (0.0, 0.0))
        p = an.pi_detailed(ev, "Zs", z)
        assert se > 0, z
        assert abs(e - p) <= 3 * se, (z, e, p, se)


def test_regeneration_refuses_unstable(nn_unstable):
    with pytest.raises(sim.RegenerationError):
        sim.regeneration_estimates(nn_unstable, 10)


def test_regeneration_budget():
    m = nn_model((0.45, 0.2, 0.35), (0.4, 0.4, 0.2))  # pooling holds with a thin margin
    with pytest.raises(sim.RegenerationError, match="budget"):
        sim.regeneration_estimates(m, 1000, seed=1, max_steps=50)


def test_transience_witness(nn_unstable):
    run = sim.simulate_chain(nn_unstable, "Qs", 200_000, seed=5, log_matches=False)
    assert not run.crp
    assert run.last_empty_step < 0.1 * run.steps
    assert run.sizes[-1] > 1000


def test_ratio_accumulator_merge():
    a, b, c = sim.RatioAccumulator(), sim.RatioAccumulator(), sim.RatioAccumulator()
    cycles = [({"g": 2}, {("x", "g"): 1}), ({"g": 3}, {}), ({"g": 1}, {("x", "g"): 1})]
    for k, (d, n) in enumerate(cycles):
        (a if k < 2 else b).add_cycle(d, n)
        c.add_cycle(d, n)
    a.merge(b)
    assert a.estimate("x") == c.estimate("x")
    assert a.estimate("x")[0] == pytest.approx(2 / 6)


def test_unmatched_count_inequalities_on_simulated_prefixes(nn):
    s = sim.SeededStream(nn, 17)
    cw = [s.next_customer() for _ in range(60)]
    sw = [s.next_server() for _ in range(60)]
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = sorted(rng.integers(0, 60, 2))
        K, L = unmatched_counts(nn, ItemSequence(cw, sw))
        K1, L1 = unmatched_counts(nn, ItemSequence(cw[:a], sw[:b]))
        K2, L2 = unmatched_counts(nn, ItemSequence(cw[a:], sw[b:]))
        assert K <= K1 + K2 and L <= L1 + L2
        c0 = int(rng.integers(0, 3))
        K3, L3 = unmatched_counts(nn, ItemSequence([c0] + cw[a:], sw[b:]))
        assert (K3, L3) in {(K2 + 1, L2), (K2, L2 - 1)}


# -- Loynes ------------------------------------------------------------------------

def test_loynes_certificate(nn):
    res = sim.loynes_window(nn, (0, 100), seed=1, k0=64)
    assert res.regeneration_time <= 0
    assert res.k >= 64
    lines = sim.FrozenLines(nn, 1)
    for m, n in res.links:
        assert nn.compatible(lines.customer(m), lines.server(n))
    # every window item is linked
    assert {m for m, _ in res.links if 0 <= m < 100} == set(range(100))
    assert {n for _, n in res.links if 0 <= n < 100} == set(range(100))


def test_loynes_stable_under_deeper_start(nn):
    res = sim.loynes_window(nn, (0, 100), seed=3, k0=64)
    lines = sim.FrozenLines(nn, 3)
    deeper = sim._run_window(lines, -8 * res.k, 0, 100, 10**6)
    assert deeper.links == res.links


def test_loynes_block_matches_finite(nn):
    res = sim.loynes_window(nn, (0, 200), seed=4, k0=64)
    lines = sim.FrozenLines(nn, 4)
    cuts = [c for c in res.cuts if c <= 200]
    assert len(cuts) >= 2
    a, b = cuts[0], cuts[1]
    inner = sim.loynes_window(nn, (a, b), seed=4, k0=64, lines=lines)
    seq = lines.words(a, b)
    assert inner.matching().links == fcfs_match_finite(nn, seq).links
    assert inner.matching().is_perfect


def test_frozen_lines_are_stable(nn):
    a, b = sim.FrozenLines(nn, 2), sim.FrozenLines(nn, 2)
    assert [a.customer(n) for n in range(-50, 50)] == [b.customer(n) for n in range(49, -51, -1)][::-1]
    with pytest.raises(ValueError):
        sim.FrozenLines(nn, -1)


def test_loynes_refuses_unstable(nn_unstable):
    with pytest.raises(sim.LoynesError):
        sim.loynes_window(nn_unstable, (0, 10))


def test_loynes_doubling_cap(nn):
    with pytest.raises(sim.LoynesError, match="doublings"):
        sim.loynes_window(nn, (0, 50), seed=1, k0=1, max_doublings=0)


# -- reversibility -------------------------------------------------------------------

def test_reversibility_suite(nn):
    rep = sim.reversibility_suite(nn, 10_000, seed=6)
    assert rep.blocks == 10_000 and rep.mismatches == 0
    assert rep.passed, rep.tests
    assert rep.block_length_counts[1] > 0


def test_minimal_blocks_length_one(nn):
    law = sim.minimal_block_probabilities(nn, 1)
    assert set(law) == {((i,), (j,)) for i, j in nn.edges}
    assert sum(law.values()) == pytest.approx(0.62)


# -- comparison -------------------------------------------------------------------------

def test_compare_rows(nn):
    rows, cs, rep = sim.compare_analytic(nn, 5000, seed=2)
    names = [r.quantity for r in rows]
    assert "rate c1,s1 (non-edge)" in names
    assert all(r.ok for r in rows if r.exact)
    d = sim.report_to_dict(nn, cs, rep)
    assert d["generator"] == sim.GENERATOR and d["cycles"] == 5000
