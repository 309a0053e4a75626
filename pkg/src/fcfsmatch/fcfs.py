"""FCFS matching of finite customer/server words.

Positions are zero-based indices into the two words; ``base_index`` only
matters when a window of a longer line is serialized.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from .model import MatchingModel


@dataclass(frozen=True)
class ItemSequence:
    customers: tuple
    servers: tuple
    base_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "customers", tuple(int(c) for c in self.customers))
        object.__setattr__(self, "servers", tuple(int(s) for s in self.servers))

    @classmethod
    def from_labels(cls, model: MatchingModel, customers: Sequence[str], servers: Sequence[str], base_index=0):
        return cls(
            tuple(model.customer_index(c) for c in customers),
            tuple(model.server_index(s) for s in servers),
            base_index,
        )

    def check(self, model: MatchingModel):
        if any(not 0 <= c < model.I for c in self.customers):
            raise ValueError("customer type out of range")
        if any(not 0 <= s < model.J for s in self.servers):
            raise ValueError("server type out of range")


@dataclass(frozen=True)
class Matching:
    links: frozenset  # (customer position, server position)
    n_customers: int
    n_servers: int

    @property
    def matched_customers(self) -> set:
        return {m for m, _ in self.links}

    @property
    def matched_servers(self) -> set:
        return {n for _, n in self.links}

    @property
    def unmatched_customers(self) -> list:
        got = self.matched_customers
        return [m for m in range(self.n_customers) if m not in got]

    @property
    def unmatched_servers(self) -> list:
        got = self.matched_servers
        return [n for n in range(self.n_servers) if n not in got]

    @property
    def is_perfect(self) -> bool:
        return self.n_customers == self.n_servers == len(self.links)

    def to_json(self, base_index: int = 0) -> str:
        return json.dumps([[m + base_index, n + base_index] for m, n in sorted(self.links)])

    @classmethod
    def from_json(cls, text: str, n_customers: int, n_servers: int, base_index: int = 0) -> "Matching":
        pairs = json.loads(text)
        return cls(frozenset((m - base_index, n - base_index) for m, n in pairs), n_customers, n_servers)


def _match_server_by_server(model, cw, sw):
    taken = [False] * len(cw)
    links = []
    adj = model.serv_adj
    for n, s in enumerate(sw):
        a = adj[s]
        for m, c in enumerate(cw):
            if not taken[m] and a >> c & 1:
                taken[m] = True
                links.append((m, n))
                break
    return links


def _match_customer_by_customer(model, cw, sw):
    taken = [False] * len(sw)
    links = []
    adj = model.cust_adj
    for m, c in enumerate(cw):
        a = adj[c]
        for n, s in enumerate(sw):
            if not taken[n] and a >> s & 1:
                taken[n] = True
                links.append((m, n))
                break
    return links


def _match_pair_by_pair(model, cw, sw):
    free_c: list[int] = []  # positions of unmatched customers, in order
    free_s: list[int] = []
    links = []
    cadj, sadj = model.cust_adj, model.serv_adj
    for t in range(max(len(cw), len(sw))):
        c_new = t < len(cw)
        s_new = t < len(sw)
        c_done = s_done = False
        if c_new:
            a = cadj[cw[t]]
            for k, n in enumerate(free_s):
                if a >> sw[n] & 1:
                    links.append((t, n))
                    del free_s[k]
                    c_done = True
                    break
        if s_new:
            a = sadj[sw[t]]
            for k, m in enumerate(free_c):
                if a >> cw[m] & 1:
                    links.append((m, t))
                    del free_c[k]
                    s_done = True
                    break
        if c_new and s_new and not c_done and not s_done and model.compatible(cw[t], sw[t]):
            links.append((t, t))
            continue
        if c_new and not c_done:
            free_c.append(t)
        if s_new and not s_done:
            free_s.append(t)
    return links


_ORDERS = {
    "server": _match_server_by_server,
    "customer": _match_customer_by_customer,
    "pair": _match_pair_by_pair,
}


def fcfs_match_finite(model: MatchingModel, seq: ItemSequence, order: str = "server") -> Matching:
    """Return the unique complete FCFS matching of two finite words.

    ``order`` picks the construction: each server in turn takes the earliest
    compatible free customer (``"server"``), the mirror (``"customer"``), or
    pairs are added one position at a time (``"pair"``).  All three give the
    same link set.
    """
    try:
        build = _ORDERS[order]
    except KeyError:
        raise ValueError(f"unknown construction order {order!r}") from None
    links = build(model, seq.customers, seq.servers)
    return Matching(frozenset(links), len(seq.customers), len(seq.servers))


def verify_fcfs(model: MatchingModel, seq: ItemSequence, matching: Matching) -> bool:
    """Brute-force check that ``matching`` is a complete FCFS matching."""
    cw, sw = seq.customers, seq.servers
    M, N = len(cw), len(sw)
    partner_c: dict[int, int] = {}
    partner_s: dict[int, int] = {}
    for m, n in matching.links:
        if not (0 <= m < M and 0 <= n < N):
            raise IndexError(f"link {(m, n)} out of range for words of length {M}, {N}")
        if m in partner_c or n in partner_s:
            return False
        if not model.compatible(cw[m], sw[n]):
            return False
        partner_c[m] = n
        partner_s[n] = m
    # completeness
    for m in range(M):
        if m in partner_c:
            continue
        for n in range(N):
            if n not in partner_s and model.compatible(cw[m], sw[n]):
                return False
    # FCFS clauses
    for m, n in matching.links:
        for l in range(n):
            if model.compatible(cw[m], sw[l]):
                k = partner_s.get(l)
                if k is None or k >= m:
                    return False
        for k in range(m):
            if model.compatible(cw[k], sw[n]):
                l = partner_c.get(k)
                if l is None or l >= n:
                    return False
    return True


# -- exchange transformation -----------------------------------------------

@dataclass(frozen=True)
class ExchangedPath:
    """Two lines of items after (partial) exchange.

    ``top`` is the customer line and ``bottom`` the server line; each item is a
    pair ``(kind, type)`` with kind ``"c"`` or ``"s"``.  After exchanging link
    ``(m, n)``, ``top[m]`` holds the server and ``bottom[n]`` the customer.
    """

    top: tuple
    bottom: tuple
    links: frozenset = field(default_factory=frozenset)

    @classmethod
    def from_sequence(cls, seq: ItemSequence, matching: Matching | None = None) -> "ExchangedPath":
        return cls(
            tuple(("c", c) for c in seq.customers),
            tuple(("s", s) for s in seq.servers),
            frozenset() if matching is None else matching.links,
        )

    def exchanged_customers(self) -> list:
        """Types of customers sitting on the server line."""
        return [t for k, t in self.bottom if k == "c"]

    def exchanged_servers(self) -> list:
        return [t for k, t in self.top if k == "s"]


def exchange_transform(seq: ItemSequence | ExchangedPath, matching: Matching | None = None) -> ExchangedPath:
    """Swap the two items of every link across the lines, keeping the links.

    Accepts a raw :class:`ItemSequence` with its matching, or an
    :class:`ExchangedPath` (in which case its own links are used), so applying
    it twice gives back the original lines.
    """
    if isinstance(seq, ItemSequence):
        if matching is None:
            raise ValueError("a matching is required to exchange a raw sequence")
        path = ExchangedPath.from_sequence(seq, matching)
    else:
        path = seq
    top, bottom = list(path.top), list(path.bottom)
    for m, n in path.links:
        top[m], bottom[n] = bottom[n], top[m]
    return ExchangedPath(tuple(top), tuple(bottom), path.links)


def reversed_rematch_check(model: MatchingModel, seq: ItemSequence, matching: Matching) -> bool:
    """Exchange a perfect block, reverse time, rematch FCFS, compare links.

    Returns True iff the FCFS matching of the reversed exchanged words is
    exactly the retained link set (with positions reversed).
    """
    if not matching.is_perfect or len(seq.customers) != len(seq.servers):
        raise ValueError("reversed_rematch_check needs a perfect matching of equal-length words")
    M = len(seq.customers)
    path = exchange_transform(seq, matching)
    # exchanged customers live on the server line, exchanged servers on the customer line
    rev_customers = tuple(t for _, t in reversed(path.bottom))
    rev_servers = tuple(t for _, t in reversed(path.top))
    rematched = fcfs_match_finite(model, ItemSequence(rev_customers, rev_servers))
    # customer c~^n is at reversed position M-1-n, server s~^m at M-1-m
    expected = frozenset((M - 1 - n, M - 1 - m) for m, n in matching.links)
    return rematched.links == expected


def naive_reversal_differs(model: MatchingModel, seq: ItemSequence, matching: Matching) -> bool:
    """True when reversing time *without* exchange changes the FCFS links."""
    M, N = len(seq.customers), len(seq.servers)
    rev = ItemSequence(seq.customers[::-1], seq.servers[::-1])
    rematched = fcfs_match_finite(model, rev)
    expected = frozenset((M - 1 - m, N - 1 - n) for m, n in matching.links)
    return rematched.links != expected


def decompose_perfect_blocks(seq: ItemSequence, matching: Matching) -> list[tuple[int, int]]:
    """Split into maximal runs of minimal perfectly matched blocks.

    Returns half-open ``(start, stop)`` intervals.  A cut at ``t`` is placed
    whenever every item at positions ``< t`` on both lines is matched to an
    item at a position ``< t`` (the pair-by-pair state is empty).  A trailing
    segment that is not perfectly matched is not reported.
    """
    L = min(len(seq.customers), len(seq.servers))
    partner_c = {m: n for m, n in matching.links}
    partner_s = {n: m for m, n in matching.links}
    blocks = []
    start = 0
    reach = 0  # max partner position seen so far
    for t in range(L):
        pc = partner_c.get(t)
        ps = partner_s.get(t)
        if pc is None or ps is None:
            break  # an unmatched item at t: no later cut is possible
        reach = max(reach, pc, ps)
        if reach == t:
            blocks.append((start, t + 1))
            start = t + 1
    return blocks


def unmatched_counts(model: MatchingModel, seq: ItemSequence) -> tuple[int, int]:
    """(unmatched customers, unmatched servers) of the FCFS matching."""
    mt = fcfs_match_finite(model, seq)
    return len(seq.customers) - len(mt.links), len(seq.servers) - len(mt.links)
