"""Seeded simulation of the matching chains with regenerative estimators.

Random types come from numpy Philox generators; the customer and server
lines get separate child streams of one SeedSequence, so they never
overlap and each line is reproducible on its own.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import chains
from .fcfs import ItemSequence, Matching, exchange_transform, fcfs_match_finite, reversed_rematch_check
from .model import MatchingModel, bits, check_crp

GENERATOR = "numpy.random.Philox via SeedSequence"
BUFFER = 4096


class RegenerationError(RuntimeError):
    pass


class LoynesError(RuntimeError):
    def __init__(self, msg, last_links=None):
        super().__init__(msg)
        self.last_links = last_links  # the last two link sets compared, when available


class ReversibilityError(AssertionError):
    pass


def _seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


class _Line:
    """Buffered categorical draws from one generator."""

    def __init__(self, rng, probs):
        self.rng = rng
        self.cum = np.cumsum(probs)
        self.cum[-1] = 1.0
        self.buf = []
        self.pos = 0

    def refill(self):
        u = self.rng.random(BUFFER)
        self.buf = np.searchsorted(self.cum, u, side="right").tolist()
        self.pos = 0

    def draw(self) -> int:
        if self.pos >= len(self.buf):
            self.refill()
        t = self.buf[self.pos]
        self.pos += 1
        return t


class SeededStream:
    """Two independent i.i.d. type sequences (customers ~ alpha, servers ~ beta)."""

    def __init__(self, model: MatchingModel, seed):
        self.seed = seed
        ss = _seed_sequence(seed)
        cs, sv = ss.spawn(2)
        self._c = _Line(np.random.Generator(np.random.Philox(cs)), model.alpha)
        self._s = _Line(np.random.Generator(np.random.Philox(sv)), model.beta)
        self.drawn_customers = 0
        self.drawn_servers = 0

    def next_customer(self) -> int:
        self.drawn_customers += 1
        return self._c.draw()

    def next_server(self) -> int:
        self.drawn_servers += 1
        return self._s.draw()


class ScriptedStream:
    """Stream replaying fixed type lists (for hand-traced examples)."""

    def __init__(self, customers=(), servers=()):
        self._c = deque(customers)
        self._s = deque(servers)

    def next_customer(self) -> int:
        return self._c.popleft()

    def next_server(self) -> int:
        return self._s.popleft()

    @property
    def remaining(self):
        return list(self._c), list(self._s)


# -- pair by pair engine ----------------------------------------------------------

class PairEngine:
    """Incremental pair-by-pair FCFS matching with per-type queues.

    Unmatched items are kept in one deque per type holding their positions,
    so finding the earliest compatible partner costs O(number of types).
    """

    def __init__(self, model: MatchingModel, start: int = 0):
        self.model = model
        self.cq = [deque() for _ in range(model.I)]
        self.sq = [deque() for _ in range(model.J)]
        self.c_nb = [tuple(sorted(bits(model.cust_adj[i]))) for i in range(model.I)]
        self.s_nb = [tuple(sorted(bits(model.serv_adj[j]))) for j in range(model.J)]
        self.open = 0  # unmatched customers (= unmatched servers)
        self.t = start  # next position

    def step(self, a: int, b: int):
        """Add customer ``a`` and server ``b`` at position ``t``.

        Returns the list of links ``(m, n, i, j)`` created.
        """
        t = self.t
        cq, sq = self.cq, self.sq
        links = []
        # customer a looks for the earliest compatible unmatched server
        best = None
        for j in self.c_nb[a]:
            q = sq[j]
            if q and (best is None or q[0] < best[0]):
                best = (q[0], j)
        sbest = None
        for i in self.s_nb[b]:
            q = cq[i]
            if q and (sbest is None or q[0] < sbest[0]):
                sbest = (q[0], i)
        if best is not None:
            sq[best[1]].popleft()
            links.append((t, best[0], a, best[1]))
        if sbest is not None:
            cq[sbest[1]].popleft()
            links.append((sbest[0], t, sbest[1], b))
        if best is None and sbest is None and self.model.compatible(a, b):
            links.append((t, t, a, b))
        else:
            if best is None:
                cq[a].append(t)
                self.open += 1
            if sbest is None:
                sq[b].append(t)
            else:
                self.open -= 1
        self.t = t + 1
        return links

    def state(self):
        """O state as ((customer types), (server types)) in position order."""
        cs = sorted((p, i) for i, q in enumerate(self.cq) for p in q)
        ss = sorted((p, j) for j, q in enumerate(self.sq) for p in q)
        return tuple(i for _, i in cs), tuple(j for _, j in ss)

    def positioned_state(self):
        cs = sorted((p, i) for i, q in enumerate(self.cq) for p in q)
        ss = sorted((p, j) for j, q in enumerate(self.sq) for p in q)
        return tuple(cs), tuple(ss)

    @property
    def empty(self) -> bool:
        return self.open == 0


class ServerEngine:
    """Server-by-server FCFS matching (the Qs chain) with per-type queues."""

    def __init__(self, model: MatchingModel):
        self.model = model
        self.cq = [deque() for _ in range(model.I)]
        self.s_nb = [tuple(bits(model.serv_adj[j])) for j in range(model.J)]
        self.next_c = 0
        self.size = 0

    def step(self, j: int, draw_customer):
        best = None
        for i in self.s_nb[j]:
            q = self.cq[i]
            if q and (best is None or q[0] < best[0]):
                best = (q[0], i)
        if best is not None:
            self.cq[best[1]].popleft()
            self.size -= 1
            return best
        adj = self.model.serv_adj[j]
        while True:
            c = draw_customer()
            m = self.next_c
            self.next_c += 1
            if adj >> c & 1:
                return (m, c)
            self.cq[c].append(m)
            self.size += 1

    def state(self):
        cs = sorted((p, i) for i, q in enumerate(self.cq) for p in q)
        return tuple(i for _, i in cs)


# -- chain runs ---------------------------------------------------------------------

@dataclass
class ChainRun:
    kind: str
    steps: int
    seed: object
    final_state: object
    occupancy: Counter
    sizes: np.ndarray
    empty_visits: int
    last_empty_step: int  # -1 if never empty after step 0
    match_log: list | None
    crp: bool

    @property
    def empty_fraction(self) -> float:
        return self.empty_visits / self.steps


class _Swap:
    def __init__(self, stream):
        self.s = stream

    def next_customer(self):
        return self.s.next_server()

    def next_server(self):
        return self.s.next_customer()


def simulate_chain(model: MatchingModel, kind: str, steps: int, seed=1, occupancy_max_len: int = 4,
                   log_matches: bool = True) -> ChainRun:
    """Run chain ``kind`` for ``steps`` steps from the empty state.

    Occupancy counts are kept for states of size at most
    ``occupancy_max_len``.  Models without complete resource pooling are
    allowed (the run then witnesses transience) and flagged via ``crp``.
    """
    if kind not in chains.KINDS:
        raise ValueError(f"unknown chain kind {kind!r}")
    if steps < 1:
        raise ValueError("steps must be positive")
    crp = check_crp(model).holds
    stream = SeededStream(model, seed)
    occ: Counter = Counter()
    sizes = np.zeros(steps, dtype=np.int64)
    empty_visits = 0
    last_empty = -1
    log = [] if (log_matches and kind == "O") else None
    if kind == "O":
        eng = PairEngine(model)
        for n in range(steps):
            links = eng.step(stream.next_customer(), stream.next_server())
            if log is not None:
                log.extend(links)
            size = eng.open
            sizes[n] = size
            if size == 0:
                empty_visits += 1
                last_empty = n
            if 2 * size <= occupancy_max_len:
                occ[eng.state()] += 1
        final = eng.state()
    elif kind in ("Qs", "Qc"):
        mdl = model if kind == "Qs" else model.mirrored
        src = stream if kind == "Qs" else _Swap(stream)
        eng = ServerEngine(mdl)
        for n in range(steps):
            eng.step(src.next_server(), src.next_customer)
            size = eng.size
            sizes[n] = size
            if size == 0:
                empty_visits += 1
                last_empty = n
            if size <= occupancy_max_len:
                occ[eng.state()] += 1
        final = eng.state()
    else:
        state = chains.empty_state(kind)
        for n in range(steps):
            state = chains.step(model, kind, state, stream)
            size = chains.state_size(kind, state)
            sizes[n] = size
            if size == 0:
                empty_visits += 1
                last_empty = n
            if size <= occupancy_max_len:
                occ[state] += 1
        final = state
    return ChainRun(kind, steps, seed, final, occ, sizes, empty_visits, last_empty, log, crp)


# -- regenerative estimation ----------------------------------------------------------

class RatioAccumulator:
    """Sums needed for renewal-reward ratio estimates and their standard errors.

    Every key belongs to a denominator group; per cycle the caller adds the
    group denominators and the key numerators.  Keys absent from a cycle
    count as zero.
    """

    def __init__(self):
        self.n = 0
        self.gy: Counter = Counter()
        self.gyy: Counter = Counter()
        self.x: Counter = Counter()
        self.xx: Counter = Counter()
        self.xy: Counter = Counter()
        self.group_of: dict = {}

    def add_cycle(self, denominators: dict, numerators: dict):
        self.n += 1
        for g, y in denominators.items():
            self.gy[g] += y
            self.gyy[g] += y * y
        for (key, g), x in numerators.items():
            self.group_of[key] = g
            y = denominators.get(g, 0)
            self.x[key] += x
            self.xx[key] += x * x
            self.xy[key] += x * y

    def merge(self, other: "RatioAccumulator"):
        self.n += other.n
        for attr in ("gy", "gyy", "x", "xx", "xy"):
            getattr(self, attr).update(getattr(other, attr))
        self.group_of.update(other.group_of)

    def estimate(self, key, group=None):
        g = self.group_of.get(key, group)
        sy = self.gy.get(g, 0)
        if sy == 0:
            return math.nan, math.nan
        r = self.x.get(key, 0) / sy
        ss = self.xx.get(key, 0) - 2 * r * self.xy.get(key, 0) + r * r * self.gyy.get(g, 0)
        n = self.n
        var = max(ss, 0.0) / (sy * sy) * (n / (n - 1) if n > 1 else 1.0)
        return r, math.sqrt(var)


@dataclass
class CycleStats:
    cycles: int
    steps: int
    cycle_lengths: np.ndarray
    acc: RatioAccumulator = field(repr=False)

    @property
    def mean_cycle_length(self) -> float:
        return float(self.cycle_lengths.mean())


@dataclass
class EmpiricalReport:
    rates: np.ndarray
    rates_se: np.ndarray
    empty_fraction: tuple
    link_pmf: dict  # s_j or (c_i, s_j) -> {k: (estimate, se)}
    link_mean: dict  # same keys -> (estimate, se)
    counts: dict  # same keys -> number of observed links
    seed: object = None

    def pmf(self, key, k):
        return self.link_pmf.get(key, {}).get(k, (0.0, 0.0))


def _run_cycles(model, cycles, seq, max_steps, blocks=None, log=None):
    stream = SeededStream(model, seq)
    eng = PairEngine(model)
    acc = RatioAccumulator()
    lengths = []
    start = 0
    num: Counter = Counter()
    den: Counter = Counter()
    block_c, block_s, block_links = [], [], []
    done = 0
    steps = 0
    while done < cycles:
        if steps >= max_steps:
            raise RegenerationError(
                f"step budget {max_steps} exhausted after {done} of {cycles} cycles; "
                "the model may be at or beyond the stability boundary"
            )
        a, b = stream.next_customer(), stream.next_server()
        if blocks is not None:
            block_c.append(a)
            block_s.append(b)
        for m, n, i, j in eng.step(a, b):
            L = m - n
            num[(("rate", i, j), "pairs")] += 1
            num[(("len", j, L), ("srv", j))] += 1
            num[(("len", i, j, L), ("edge", i, j))] += 1
            num[(("sum", j), ("srv", j))] += L
            num[(("sum", i, j), ("edge", i, j))] += L
            den[("srv", j)] += 1
            den[("edge", i, j)] += 1
            if blocks is not None:
                block_links.append((m - start, n - start))
            if log is not None:
                log.append((m, n, i, j))
        steps += 1
        if eng.empty:
            length = eng.t - start
            den["pairs"] = length
            num[(("empty",), "pairs")] = 1
            acc.add_cycle(den, num)
            lengths.append(length)
            if blocks is not None:
                blocks.append((tuple(block_c), tuple(block_s), frozenset(block_links)))
                block_c, block_s, block_links = [], [], []
            num = Counter()
            den = Counter()
            start = eng.t
            done += 1
    return acc, lengths, steps


def regeneration_estimates(model: MatchingModel, cycles: int, seed=1, replicas: int = 1,
                           max_steps: int | None = None, keep_blocks: bool = False, match_log: list | None = None):
    """Simulate O until ``cycles`` returns to the empty state.

    Returns ``(CycleStats, EmpiricalReport)`` and, with ``keep_blocks``, the
    list of perfectly matched blocks ``(customers, servers, links)``.
    Replicas use independent child seeds and are merged.  Links
    ``(m, n, i, j)`` are appended to ``match_log`` when given (positions
    restart at 0 in each replica).
    """
    if not check_crp(model).holds:
        raise RegenerationError("complete resource pooling fails; regeneration cycles are not finite")
    if max_steps is None:
        max_steps = 10_000 * cycles + 10**6
    base = _seed_sequence(seed)
    seqs = base.spawn(replicas) if replicas > 1 else [base]
    per = [cycles // replicas + (r < cycles % replicas) for r in range(replicas)]
    acc = RatioAccumulator()
    lengths: list = []
    steps = 0
    blocks = [] if keep_blocks else None
    for sq, c in zip(seqs, per):
        a, ln, st = _run_cycles(model, c, sq, max_steps, blocks, match_log)
        acc.merge(a)
        lengths.extend(ln)
        steps += st
    cs = CycleStats(cycles, steps, np.array(lengths), acc)
    rep = _report(model, acc, seed)
    return (cs, rep, blocks) if keep_blocks else (cs, rep)


def _report(model, acc, seed):
    I, J = model.I, model.J
    rates = np.zeros((I, J))
    se = np.zeros((I, J))
    for i in range(I):
        for j in range(J):
            rates[i, j], se[i, j] = acc.estimate(("rate", i, j), "pairs")
    pmf: dict = {}
    means: dict = {}
    counts: dict = {}
    for key in acc.x:
        if key[0] == "len":
            if len(key) == 3:
                _, j, L = key
                target = j
            else:
                _, i, j, L = key
                target = (i, j)
            pmf.setdefault(target, {})[L] = acc.estimate(key)
    for j in range(J):
        counts[j] = acc.gy.get(("srv", j), 0)
        if counts[j]:
            means[j] = acc.estimate(("sum", j), ("srv", j))
    for i, j in model.edges:
        counts[(i, j)] = acc.gy.get(("edge", i, j), 0)
        if counts[(i, j)]:
            means[(i, j)] = acc.estimate(("sum", i, j), ("edge", i, j))
    return EmpiricalReport(rates, se, acc.estimate(("empty",), "pairs"), pmf, means, counts, seed)


def occupancy_estimates(model: MatchingModel, kind: str, cycles: int, seed=1, max_len: int = 3,
                        max_steps: int | None = None):
    """Regenerative occupancy estimates of one chain, cycles delimited by the empty state.

    Returns ``{state: (estimate, se)}`` for visited states of size <= max_len.
    """
    if max_steps is None:
        max_steps = 10_000 * cycles + 10**6
    stream = SeededStream(model, seed)
    acc = RatioAccumulator()
    state = chains.empty_state(kind)
    num: Counter = Counter()
    length = 0
    done = steps = 0
    while done < cycles:
        if steps >= max_steps:
            raise RegenerationError(f"step budget {max_steps} exhausted after {done} cycles")
        state = chains.step(model, kind, state, stream)
        steps += 1
        length += 1
        if chains.state_size(kind, state) <= max_len:
            num[(state, "steps")] += 1
        if chains.state_size(kind, state) == 0:
            acc.add_cycle({"steps": length}, num)
            num = Counter()
            length = 0
            done += 1
    return {k: acc.estimate(k, "steps") for k in acc.x}, acc


# -- Loynes window ------------------------------------------------------------------

def _zigzag(b: int) -> int:
    return 2 * b if b >= 0 else -2 * b - 1


class FrozenLines:
    """Customer and server types indexed by all integers, generated lazily per block."""

    def __init__(self, model: MatchingModel, seed: int, block: int = 1024):
        if int(seed) < 0:
            raise ValueError("seed must be non-negative")
        self.model = model
        self.seed = int(seed)
        self.block = block
        self._cache: dict = {}
        self._cum = (np.cumsum(model.alpha), np.cumsum(model.beta))

    def _blk(self, side: int, b: int):
        key = (side, b)
        if key not in self._cache:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, side, _zigzag(b)])))
            cum = self._cum[side].copy()
            cum[-1] = 1.0
            self._cache[key] = np.searchsorted(cum, rng.random(self.block), side="right").tolist()
        return self._cache[key]

    def customer(self, n: int) -> int:
        return self._blk(0, n // self.block)[n % self.block]

    def server(self, n: int) -> int:
        return self._blk(1, n // self.block)[n % self.block]

    def words(self, lo: int, hi: int) -> ItemSequence:
        return ItemSequence(
            tuple(self.customer(n) for n in range(lo, hi)),
            tuple(self.server(n) for n in range(lo, hi)),
            base_index=lo,
        )


@dataclass
class _WindowRun:
    start: int
    links: frozenset
    state_at_lo: tuple
    regenerations: list  # cut times in [start, lo] where the state was empty
    cuts: list  # cut times in [lo, end] where the state was empty


def _run_window(lines: FrozenLines, start, lo, hi, max_extra):
    eng = PairEngine(lines.model, start)
    links = set()
    regen = [start]
    cuts = []
    state_lo = eng.positioned_state() if start == lo else None
    pending = 0  # unmatched window items
    t = start
    limit = hi + max_extra
    while t < hi or pending > 0:
        if t >= limit:
            raise LoynesError(f"window items still unmatched {max_extra} positions after the window")
        new = eng.step(lines.customer(t), lines.server(t))
        if lo <= t < hi:
            pending += 2
        for m, n, i, j in new:
            inside = (lo <= m < hi) + (lo <= n < hi)
            if inside:
                links.add((m, n))
                pending -= inside
        t += 1
        if t <= lo and eng.empty:
            regen.append(t)
        if t == lo:
            state_lo = eng.positioned_state()
        if lo <= t and eng.empty:
            cuts.append(t)
    return _WindowRun(start, frozenset(links), state_lo, regen, cuts)


@dataclass
class LoynesResult:
    window: tuple
    links: frozenset
    k: int  # depth of the certified run: it started at window start - k
    coupling_start: int  # start of the deeper run it coupled with
    regeneration_time: int  # latest empty cut of the certified run at or before the window
    doublings: int
    cuts: list  # empty cuts inside or after the window

    def matching(self) -> Matching:
        lo, hi = self.window
        inner = frozenset((m - lo, n - lo) for m, n in self.links if lo <= m < hi and lo <= n < hi)
        return Matching(inner, hi - lo, hi - lo)


def loynes_window(model: MatchingModel, window, seed: int = 1, k0: int = 64, max_doublings: int = 20,
                  max_extra: int = 10**6, lines: FrozenLines | None = None) -> LoynesResult:
    """Stationary FCFS links touching ``window = (lo, hi)`` by backward doubling.

    Runs start empty at ``lo - k`` for k = k0, 2k0, ... on the same frozen
    lines.  A run is accepted when the run from twice as deep leaves the
    same unmatched items at ``lo`` (so every later run agrees on the window)
    and the accepted run itself visited the empty state before ``lo``.
    """
    if not check_crp(model).holds:
        raise LoynesError("complete resource pooling fails; the stationary matching does not exist")
    lo, hi = map(int, window)
    if hi <= lo:
        raise ValueError("empty window")
    lines = lines or FrozenLines(model, seed)
    k = k0
    prev = _run_window(lines, lo - k, lo, hi, max_extra)
    cur = prev
    for d in range(1, max_doublings + 1):
        cur = _run_window(lines, lo - 2 * k, lo, hi, max_extra)
        if cur.state_at_lo == prev.state_at_lo and len(prev.regenerations) > 1:
            if cur.links != prev.links:
                raise AssertionError("coupled runs disagree on the window")
            return LoynesResult((lo, hi), prev.links, k, lo - 2 * k, prev.regenerations[-1], d, prev.cuts)
        prev = cur
        k *= 2
    older = _run_window(lines, lo - k // 2, lo, hi, max_extra) if k > k0 else prev
    raise LoynesError(
        f"no certificate after {max_doublings} doublings (k={k}); "
        f"last two link sets differ in {len(older.links ^ prev.links)} links",
        (older.links, prev.links),
    )


# -- reversibility --------------------------------------------------------------------

@dataclass
class ReversibilityReport:
    blocks: int
    mismatches: int
    tests: dict  # name -> (statistic, dof, p-value)
    alpha_level: float
    block_length_counts: Counter

    @property
    def passed(self) -> bool:
        return self.mismatches == 0 and all(p >= self.alpha_level for _, _, p in self.tests.values())


def _chisq_marginal(counts, probs):
    obs = np.asarray(counts, dtype=float)
    exp = obs.sum() * np.asarray(probs)
    stat, p = stats.chisquare(obs, exp)
    return float(stat), len(obs) - 1, float(p)


def _chisq_pairs(x, y, kx, ky):
    table = np.zeros((kx, ky))
    np.add.at(table, (np.asarray(x), np.asarray(y)), 1)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return 0.0, 0, 1.0
    stat, p, dof, _ = stats.chi2_contingency(table, correction=False)
    return float(stat), int(dof), float(p)


def minimal_block_probabilities(model: MatchingModel, M: int) -> dict:
    """Unnormalized i.i.d. probabilities of all minimal perfect blocks of length M."""
    out = {}
    for cw in itertools.product(range(model.I), repeat=M):
        pa = math.prod(model.alpha[c] for c in cw)
        for sw in itertools.product(range(model.J), repeat=M):
            seq = ItemSequence(cw, sw)
            mt = fcfs_match_finite(model, seq, order="pair")
            if not mt.is_perfect:
                continue
            reach = 0
            minimal = True
            pc = dict(mt.links)
            ps = {n: m for m, n in mt.links}
            for t in range(M - 1):
                reach = max(reach, pc[t], ps[t])
                if reach == t:
                    minimal = False
                    break
            if minimal:
                out[(cw, sw)] = pa * math.prod(model.beta[s] for s in sw)
    return out


def block_configuration_test(model: MatchingModel, blocks, M: int):
    """Chi-square test that blocks of length M have i.i.d.-product frequencies."""
    law = minimal_block_probabilities(model, M)
    keys = sorted(law)
    obs = Counter((c, s) for c, s, _ in blocks if len(c) == M)
    n = sum(obs.values())
    if n == 0 or len(keys) < 2:
        return 0.0, 0, 1.0, n
    unknown = set(obs) - set(law)
    if unknown:
        raise AssertionError(f"observed blocks outside the minimal-block set: {sorted(unknown)[:3]}")
    tot = math.fsum(law.values())
    exp = np.array([law[k] / tot * n for k in keys])
    o = np.array([obs.get(k, 0) for k in keys], dtype=float)
    # pool sparse cells so expected counts stay >= 5
    order = np.argsort(exp)
    pooled_o, pooled_e = [], []
    acc_o = acc_e = 0.0
    for idx in order:
        acc_o += o[idx]
        acc_e += exp[idx]
        if acc_e >= 5:
            pooled_o.append(acc_o)
            pooled_e.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 and pooled_e:
        pooled_o[-1] += acc_o
        pooled_e[-1] += acc_e
    if len(pooled_o) < 2:
        return 0.0, 0, 1.0, n
    stat, p = stats.chisquare(pooled_o, pooled_e)
    return float(stat), len(pooled_o) - 1, float(p), n


def reversibility_suite(model: MatchingModel, cycles: int, seed=1, alpha_level: float = 1e-3,
                        block_lengths=(1, 2)) -> ReversibilityReport:
    """Exchange, reverse and rematch every regeneration block, then test the
    exchanged sequences for i.i.d. structure."""
    _, _, blocks = regeneration_estimates(model, cycles, seed, keep_blocks=True)
    mismatches = 0
    ct, st = [], []
    for cw, sw, links in blocks:
        seq = ItemSequence(cw, sw)
        mt = Matching(links, len(cw), len(sw))
        if not reversed_rematch_check(model, seq, mt):
            raise ReversibilityError(f"reversed rematch differs on block customers={cw} servers={sw}")
        path = exchange_transform(seq, mt)
        ct.extend(t for _, t in path.bottom)  # exchanged customers, server positions
        st.extend(t for _, t in path.top)
    ct_a = np.array(ct)
    st_a = np.array(st)
    tests = {
        "customer marginal": _chisq_marginal(np.bincount(ct_a, minlength=model.I), model.alpha),
        "server marginal": _chisq_marginal(np.bincount(st_a, minlength=model.J), model.beta),
        "customer lag-1": _chisq_pairs(ct_a[:-1], ct_a[1:], model.I, model.I),
        "server lag-1": _chisq_pairs(st_a[:-1], st_a[1:], model.J, model.J),
        "cross same position": _chisq_pairs(ct_a, st_a, model.I, model.J),
    }
    for M in block_lengths:
        stat, dof, p, n = block_configuration_test(model, blocks, M)
        tests[f"block configurations M={M}"] = (stat, dof, p)
    return ReversibilityReport(len(blocks), mismatches, tests, alpha_level, Counter(len(c) for c, _, _ in blocks))


# -- analytic versus empirical --------------------------------------------------------

@dataclass
class CompareRow:
    quantity: str
    analytic: float
    empirical: float
    se: float
    z: float
    exact: bool = False  # exact check: passes only on equality

    @property
    def ok(self) -> bool:
        if self.exact:
            return self.analytic == self.empirical
        return abs(self.z) <= Z_LIMIT


Z_LIMIT = 4.0
MIN_EXPECTED = 100


def _z(a, e, se):
    if se > 0:
        return (e - a) / se
    return 0.0 if abs(e - a) <= 1e-12 else math.inf


def report_to_dict(model: MatchingModel, cs: CycleStats, rep: EmpiricalReport) -> dict:
    ct, st = model.customer_types, model.server_types

    def name(key):
        return st[key] if isinstance(key, int) else f"{ct[key[0]]}|{st[key[1]]}"

    return {
        "seed": str(rep.seed),
        "generator": GENERATOR,
        "cycles": cs.cycles,
        "steps": cs.steps,
        "mean_cycle_length": cs.mean_cycle_length,
        "empty_fraction": list(rep.empty_fraction),
        "rates": {f"{ct[i]},{st[j]}": [rep.rates[i, j], rep.rates_se[i, j]]
                  for i in range(model.I) for j in range(model.J)},
        "link_mean": {name(k): list(v) for k, v in sorted(rep.link_mean.items(), key=lambda kv: str(kv[0]))},
        "link_pmf": {name(k): {str(L): list(v) for L, v in sorted(d.items())}
                     for k, d in sorted(rep.link_pmf.items(), key=lambda kv: str(kv[0]))},
    }


def compare_analytic(model: MatchingModel, cycles: int, seed=1, variant: str = "derived", threads: int = 1):
    """Rows comparing exact quantities with regenerative estimates.

    Covers the empty-state probability, Kac's identity, every matching rate
    (non-edges as exact zero checks), mean link lengths and every link-length
    bin with at least ``MIN_EXPECTED`` expected observations, unconditional
    and per edge.
    """
    from . import analytic

    ev = analytic.StationaryEvaluator(model, threads=threads)
    ev.require_crp()
    cs, rep = regeneration_estimates(model, cycles, seed)
    ct, st = model.customer_types, model.server_types
    rows = []
    e, se = rep.empty_fraction
    rows.append(CompareRow("pi_O(empty)", ev.B, e, se, _z(ev.B, e, se)))
    lens = cs.cycle_lengths
    kac = ev.B * lens.mean()
    kac_se = ev.B * lens.std(ddof=1) / math.sqrt(len(lens)) if len(lens) > 1 else 0.0
    rows.append(CompareRow("mean cycle length * B", 1.0, kac, kac_se, _z(1.0, kac, kac_se)))
    R = analytic.matching_rates(ev)
    for i in range(model.I):
        for j in range(model.J):
            if (i, j) in model.edges:
                rows.append(CompareRow(f"rate {ct[i]},{st[j]}", float(R[i, j]), rep.rates[i, j], rep.rates_se[i, j],
                                       _z(R[i, j], rep.rates[i, j], rep.rates_se[i, j])))
            else:
                rows.append(CompareRow(f"rate {ct[i]},{st[j]} (non-edge)", 0.0, float(rep.rates[i, j]), 0.0, 0.0, True))
    targets = [(j, None) for j in range(model.J)] + sorted((j, i) for i, j in model.edges)
    for j, i in targets:
        key = j if i is None else (i, j)
        label = st[j] if i is None else f"{st[j]}|{ct[i]}"
        dist = analytic.link_length_distribution(ev, j, c_i=i, variant=variant)
        if key in rep.link_mean:
            m, mse = rep.link_mean[key]
            rows.append(CompareRow(f"mean link {label}", dist.mean(), m, mse, _z(dist.mean(), m, mse)))
        n = rep.counts.get(key, 0)
        for k, p in zip(*dist.support()):
            k, p = int(k), float(p)
            if p * n < MIN_EXPECTED:
                continue
            est, pse = rep.pmf(key, k)
            rows.append(CompareRow(f"link pmf {label} k={k}", p, est, pse, _z(p, est, pse)))
    return rows, cs, rep
