"""State spaces and transition kernels of the FCFS matching chains.

Items are ``(kind, type)`` pairs where ``kind`` is ``"c"`` for a customer and
``"s"`` for a server, regardless of which line the item sits on.  Whether an
item is unmatched or matched-and-exchanged follows from its line: on the
customer line a ``"c"`` is unmatched and an ``"s"`` is an exchanged server,
and the other way round on the server line.

Chain kinds and their state shapes:

=====  ================================================================
``Zs``  word on the customer line (server by server detailed chain)
``Zc``  word on the server line (customer by customer detailed chain)
``D``   ``(z, y)``: customer-line word, server-line word (pair by pair, backward)
``E``   ``(y, z)``: customer-line word, server-line word from position N+1
``Qs``  tuple of unmatched customer types
``Qc``  tuple of unmatched server types
``O``   ``(customer types, server types)`` of the unmatched items
=====  ================================================================

The empty state is ``()`` for one-word kinds and ``((), ())`` for two-word
kinds.
"""
from __future__ import annotations

import itertools
import math
import unicodedata
from dataclasses import dataclass

from .model import MatchingModel, bits

C, S = "c", "s"
KINDS = ("Zs", "Zc", "D", "E", "Qs", "Qc", "O")
TWO_WORD = ("D", "E", "O")
DEFAULT_MAX_APPENDED = 4
MAX_ENUM_LEN = 8


class StateError(ValueError):
    pass


def empty_state(kind: str):
    return ((), ()) if kind in TWO_WORD else ()


def flip(word):
    """Swap item kinds, i.e. read a word in the mirrored model."""
    return tuple((S if k == C else C, t) for k, t in word)


def _check_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"unknown chain kind {kind!r}")


# -- validity -------------------------------------------------------------

def _customer_line_ok(model: MatchingModel, word) -> bool:
    """No unmatched customer precedes a compatible exchanged server."""
    blocked = 0  # servers compatible with some earlier customer
    adj = model.cust_adj
    for k, t in word:
        if k == C:
            blocked |= adj[t]
        elif blocked >> t & 1:
            return False
    return True


def _server_line_ok(model: MatchingModel, word) -> bool:
    blocked = 0
    adj = model.serv_adj
    for k, t in word:
        if k == S:
            blocked |= adj[t]
        elif blocked >> t & 1:
            return False
    return True


def _well_formed(model, word):
    for item in word:
        if not (isinstance(item, tuple) and len(item) == 2 and item[0] in (C, S)):
            return False
        k, t = item
        if not isinstance(t, int) or not 0 <= t < (model.I if k == C else model.J):
            return False
    return True


def is_valid_state(model: MatchingModel, kind: str, state) -> bool:
    """True iff ``state`` is a possible state of the chain ``kind``."""
    _check_kind(kind)
    try:
        if kind == "Zs":
            w = tuple(state)
            if not _well_formed(model, w):
                return False
            if not w:
                return True
            return w[0][0] == C and w[-1][0] == S and _customer_line_ok(model, w)
        if kind == "Zc":
            w = tuple(state)
            return is_valid_state(model.mirrored, "Zs", flip(w)) if _well_formed(model, w) else False
        if kind == "D":
            z, y = map(tuple, state)
            if not (_well_formed(model, z) and _well_formed(model, y)):
                return False
            if not z and not y:
                return True
            if not z or not y:
                return False
            if z[0][0] != C or y[0][0] != S:
                return False
            if sum(k == C for k, _ in z) != sum(k == S for k, _ in y):
                return False
            return _customer_line_ok(model, z + y[::-1])
        if kind == "E":
            y, z = map(tuple, state)
            return is_valid_state(model, "D", (z[::-1], y[::-1]))
        if kind == "Qs":
            return all(isinstance(t, int) and 0 <= t < model.I for t in state)
        if kind == "Qc":
            return all(isinstance(t, int) and 0 <= t < model.J for t in state)
        if kind == "O":
            cw, sw = map(tuple, state)
            if len(cw) != len(sw):
                return False
            if not all(isinstance(t, int) and 0 <= t < model.I for t in cw):
                return False
            if not all(isinstance(t, int) and 0 <= t < model.J for t in sw):
                return False
            return not any(model.compatible(c, s) for c in cw for s in sw)
    except (TypeError, ValueError):
        return False
    return False


def _require_valid(model, kind, state):
    if not is_valid_state(model, kind, state):
        raise StateError(f"invalid {kind} state {state!r}")


# -- successor enumeration ------------------------------------------------

def _runs(skip_types, weights, kind, max_items):
    """All runs of ``k <= max_items`` skipped items of the given types.

    Yields ``(items, product of weights)``.  The matching item that closes the
    run is not included.
    """
    for k in range(max_items + 1):
        for combo in itertools.product(skip_types, repeat=k):
            p = 1.0
            for t in combo:
                p *= weights[t]
            yield tuple((kind, t) for t in combo), p


def _geom_tail(q: float, n: int) -> float:
    """P(a Geom_0 variable with ratio q is >= n)."""
    return q ** n if n > 0 else 1.0


def _add(out: dict, state, p: float):
    out[state] = out.get(state, 0.0) + p


def _zs_successors(model, z, max_appended):
    out: dict = {}
    tail = 0.0
    alpha, beta = model.alpha, model.beta
    for j in range(model.J):
        adj = model.serv_adj[j]
        pos = next((p for p, (k, t) in enumerate(z) if k == C and adj >> t & 1), None)
        if pos is not None:
            if pos == 0:
                rest = z[1:]
                first = next((p for p, (k, _) in enumerate(rest) if k == C), None)
                new = () if first is None else rest[first:]
            else:
                new = z[:pos] + ((S, j),) + z[pos + 1:]
            _add(out, new, beta[j])
            continue
        skip = [i for i in range(model.I) if not adj >> i & 1]
        a_match = model.alpha_of(adj)
        for items, p in _runs(skip, alpha, C, max_appended):
            new = () if not z and not items else z + items + ((S, j),)
            _add(out, new, beta[j] * p * a_match)
        tail += beta[j] * _geom_tail(model.alpha_of(model.all_customers & ~adj), max_appended + 1)
    return out, tail


def _qs_successors(model, word, max_appended):
    out: dict = {}
    tail = 0.0
    for j in range(model.J):
        adj = model.serv_adj[j]
        pos = next((p for p, t in enumerate(word) if adj >> t & 1), None)
        if pos is not None:
            _add(out, word[:pos] + word[pos + 1:], model.beta[j])
            continue
        skip = [i for i in range(model.I) if not adj >> i & 1]
        a_match = model.alpha_of(adj)
        for items, p in _runs(skip, model.alpha, C, max_appended):
            _add(out, word + tuple(t for _, t in items), model.beta[j] * p * a_match)
        tail += model.beta[j] * _geom_tail(model.alpha_of(model.all_customers & ~adj), max_appended + 1)
    return out, tail


def _o_successors(model, state):
    out: dict = {}
    for a in range(model.I):
        for b in range(model.J):
            _add(out, o_transition(model, state, a, b), model.alpha[a] * model.beta[b])
    return out, 0.0


def d_transition(model: MatchingModel, state, a: int, b: int):
    """Next D state after adding customer type ``a`` and server type ``b``.

    Returns ``(new_state, case)`` where ``case`` names what happened to the
    new customer and the new server: ``"head"`` (matched the first unmatched
    item of the other line), ``"inner"`` (matched a later unmatched item),
    ``"pair"`` (matched each other) or ``"none"``.
    """
    z, y = list(state[0]), list(state[1])
    ca = next((k for k, (kd, t) in enumerate(y) if kd == S and model.compatible(a, t)), None)
    sb = next((k for k, (kd, t) in enumerate(z) if kd == C and model.compatible(t, b)), None)
    if ca is None and sb is None and model.compatible(a, b):
        z.append((S, b))
        y.append((C, a))
        case = ("pair", "pair")
    else:
        if ca is not None:
            h = y[ca][1]
            y[ca] = (C, a)
            z_new = (S, h)
        else:
            z_new = (C, a)
        if sb is not None:
            t = z[sb][1]
            z[sb] = (S, b)
            y_new = (C, t)
        else:
            y_new = (S, b)
        z.append(z_new)
        y.append(y_new)
        case = tuple("none" if k is None else ("head" if k == 0 else "inner") for k in (ca, sb))
    while z and z[0][0] == S:
        z.pop(0)
    while y and y[0][0] == C:
        y.pop(0)
    if bool(z) != bool(y):
        raise AssertionError("D transition produced a half-empty state")
    return (tuple(z), tuple(y)), case


def _d_successors(model, state):
    out: dict = {}
    for a in range(model.I):
        for b in range(model.J):
            new, _ = d_transition(model, state, a, b)
            _add(out, new, model.alpha[a] * model.beta[b])
    return out, 0.0


def _e_needs(model, y, z):
    """Which of the two position-N+1 items must search among fresh items."""
    a_kind, a = y[0]
    need_s = need_c = False
    a_partner = None
    if a_kind == C:
        a_partner = next((q for q, (k, t) in enumerate(z) if k == S and model.compatible(a, t)), None)
        need_s = a_partner is None
    b_kind, b = z[0]
    b_open = b_kind == S and a_partner != 0
    b_partner = None
    if b_open:
        b_partner = next((p for p, (k, t) in enumerate(y) if p > 0 and k == C and model.compatible(t, b)), None)
        need_c = b_partner is None
    return a_partner, need_s, b_open, b_partner, need_c


def _e_apply(model, y, z, a_partner, b_open, b_partner, serv_items, cust_items):
    y, z = list(y), list(z)
    a_kind, a = y[0]
    if a_kind == C:
        if a_partner is not None:
            z[a_partner] = (C, a)
        else:
            z.extend(serv_items)
            z.append((C, a))
    if b_open:
        b = z[0][1]
        if b_partner is not None:
            y[b_partner] = (S, b)
        else:
            y.extend(cust_items)
            y.append((S, b))
    y, z = tuple(y[1:]), tuple(z[1:])
    if bool(y) != bool(z):
        raise AssertionError("E transition produced a half-empty state")
    return y, z


def _e_successors(model, state, max_appended):
    y0, z0 = state
    out: dict = {}
    tail = 0.0
    if not y0:
        starts = [
            (((C, a),), ((S, b),), model.alpha[a] * model.beta[b])
            for a in range(model.I)
            for b in range(model.J)
        ]
    else:
        starts = [(y0, z0, 1.0)]
    for y, z, base in starts:
        a_partner, need_s, b_open, b_partner, need_c = _e_needs(model, y, z)
        a = y[0][1]
        b = z[0][1]
        if need_s:
            s_skip = [j for j in range(model.J) if not model.compatible(a, j)]
            s_match = model.beta_of(model.cust_adj[a])
            s_q = 1.0 - s_match
        if need_c:
            c_skip = [i for i in range(model.I) if not model.compatible(i, b)]
            c_match = model.alpha_of(model.serv_adj[b])
            c_q = 1.0 - c_match
        budget = max_appended
        s_runs = list(_runs(s_skip, model.beta, S, budget)) if need_s else [((), 1.0)]
        c_runs = list(_runs(c_skip, model.alpha, C, budget)) if need_c else [((), 1.0)]
        for s_items, ps in s_runs:
            if need_s:
                ps *= s_match
            for c_items, pc in c_runs:
                if len(s_items) + len(c_items) > budget:
                    continue
                if need_c:
                    pc *= c_match
                new = _e_apply(model, y, z, a_partner, b_open, b_partner, s_items, c_items)
                _add(out, new, base * ps * pc)
        # analytic tail: P(k_s + k_c > budget) for independent geometric run lengths
        if need_s and need_c:
            inside = math.fsum(
                s_q ** ks * (1 - s_q) * (1 - _geom_tail(c_q, budget - ks + 1)) for ks in range(budget + 1)
            )
        elif need_s:
            inside = 1 - _geom_tail(s_q, budget + 1)
        elif need_c:
            inside = 1 - _geom_tail(c_q, budget + 1)
        else:
            inside = 1.0
        tail += base * (1.0 - inside)
    return out, tail


def successors(model: MatchingModel, kind: str, state, max_appended: int = DEFAULT_MAX_APPENDED):
    """Enumerate successor states with exact transition probabilities.

    Countable transitions are truncated: only successors whose step skips
    at most ``max_appended`` fresh items are listed (for E the two searches
    share this budget).  Returns
    ``(list of (state, prob), tail)`` where ``tail`` is the exact probability
    of the omitted successors.
    """
    _check_kind(kind)
    _require_valid(model, kind, state)
    if kind == "Zs":
        out, tail = _zs_successors(model, tuple(state), max_appended)
    elif kind == "Zc":
        raw, tail = _zs_successors(model.mirrored, flip(state), max_appended)
        out = {flip(w): p for w, p in raw.items()}
    elif kind == "Qs":
        out, tail = _qs_successors(model, tuple(state), max_appended)
    elif kind == "Qc":
        out, tail = _qs_successors(model.mirrored, tuple(state), max_appended)
    elif kind == "O":
        out, tail = _o_successors(model, (tuple(state[0]), tuple(state[1])))
    elif kind == "D":
        out, tail = _d_successors(model, (tuple(state[0]), tuple(state[1])))
    else:
        out, tail = _e_successors(model, (tuple(state[0]), tuple(state[1])), max_appended)
    return sorted(out.items(), key=lambda kv: repr(kv[0])), tail


def state_size(kind: str, state) -> int:
    """Total number of items in a state."""
    if kind in TWO_WORD:
        return len(state[0]) + len(state[1])
    return len(state)


def transition_probability(model, kind, state, target, max_appended=None) -> float:
    """Exact one-step probability from ``state`` to ``target``."""
    if max_appended is None:
        max_appended = state_size(kind, target)
    succ, _ = successors(model, kind, state, max_appended)
    return math.fsum(p for s, p in succ if s == target)


# -- simulation steps -----------------------------------------------------

class _Mirrored:
    """View of an innovation stream with customer and server draws swapped."""

    def __init__(self, stream):
        self._s = stream

    def next_customer(self):
        return self._s.next_server()

    def next_server(self):
        return self._s.next_customer()


def _fresh_match(draw, adj):
    skipped = []
    while True:
        t = draw()
        if adj >> t & 1:
            return skipped, t
        skipped.append(t)


def step(model: MatchingModel, kind: str, state, stream, check: bool = False):
    """Advance one step of chain ``kind`` using draws from ``stream``.

    ``stream`` provides ``next_customer()`` and ``next_server()``; only the
    draws the mechanism actually needs are consumed.
    """
    _check_kind(kind)
    if check:
        _require_valid(model, kind, state)
    if kind == "Zs":
        z = state
        j = stream.next_server()
        adj = model.serv_adj[j]
        for pos, (k, t) in enumerate(z):
            if k == C and adj >> t & 1:
                if pos == 0:
                    rest = z[1:]
                    first = next((p for p, (kk, _) in enumerate(rest) if kk == C), None)
                    return () if first is None else rest[first:]
                return z[:pos] + ((S, j),) + z[pos + 1:]
        skipped, _ = _fresh_match(stream.next_customer, adj)
        if not z and not skipped:
            return ()
        return z + tuple((C, t) for t in skipped) + ((S, j),)
    if kind == "Zc":
        return flip(step(model.mirrored, "Zs", flip(state), _Mirrored(stream)))
    if kind == "Qs":
        j = stream.next_server()
        adj = model.serv_adj[j]
        for pos, t in enumerate(state):
            if adj >> t & 1:
                return state[:pos] + state[pos + 1:]
        skipped, _ = _fresh_match(stream.next_customer, adj)
        return state + tuple(skipped)
    if kind == "Qc":
        return step(model.mirrored, "Qs", state, _Mirrored(stream))
    if kind in ("O", "D"):
        a = stream.next_customer()
        b = stream.next_server()
        if kind == "D":
            return d_transition(model, state, a, b)[0]
        return o_transition(model, state, a, b)
    # E
    y, z = state
    if not y:
        y, z = ((C, stream.next_customer()),), ((S, stream.next_server()),)
    a_partner, need_s, b_open, b_partner, need_c = _e_needs(model, y, z)
    s_items = c_items = ()
    if need_s:
        sk, _ = _fresh_match(stream.next_server, model.cust_adj[y[0][1]])
        s_items = tuple((S, t) for t in sk)
    if need_c:
        sk, _ = _fresh_match(stream.next_customer, model.serv_adj[z[0][1]])
        c_items = tuple((C, t) for t in sk)
    return _e_apply(model, y, z, a_partner, b_open, b_partner, s_items, c_items)


def o_transition(model: MatchingModel, state, a: int, b: int):
    """Next O state after adding customer type ``a`` and server type ``b``."""
    cw, sw = state
    ca = next((k for k, t in enumerate(sw) if model.compatible(a, t)), None)
    sb = next((k for k, t in enumerate(cw) if model.compatible(t, b)), None)
    ncw, nsw = list(cw), list(sw)
    if ca is not None:
        del nsw[ca]
    if sb is not None:
        del ncw[sb]
    if not (ca is None and sb is None and model.compatible(a, b)):
        if ca is None:
            ncw.append(a)
        if sb is None:
            nsw.append(b)
    return tuple(ncw), tuple(nsw)


# -- enumeration ----------------------------------------------------------

def _line_words(model, max_len, line):
    """All words of length <= max_len valid as prefixes on a line."""
    alphabet = [(C, i) for i in range(model.I)] + [(S, j) for j in range(model.J)]
    ok = _customer_line_ok if line == "customer" else _server_line_ok
    out = [()]
    frontier = [()]
    for _ in range(max_len):
        nxt = []
        for w in frontier:
            for item in alphabet:
                w2 = w + (item,)
                if ok(model, w2):
                    nxt.append(w2)
        out.extend(nxt)
        frontier = nxt
    return out


def enumerate_states(model: MatchingModel, kind: str, max_len: int, cap: int = MAX_ENUM_LEN) -> list:
    """All valid states of ``kind`` with total word length at most ``max_len``."""
    _check_kind(kind)
    if max_len > cap:
        raise ValueError(f"max_len {max_len} exceeds enumeration cap {cap}")
    if kind == "Zs":
        return [w for w in _line_words(model, max_len, "customer") if is_valid_state(model, kind, w)]
    if kind == "Zc":
        return [w for w in _line_words(model, max_len, "server") if is_valid_state(model, kind, w)]
    if kind in ("D", "E"):
        zs = _line_words(model, max_len, "customer")
        ys = _line_words(model, max_len, "server")
        out = []
        for z in zs:
            for y in ys:
                if len(z) + len(y) <= max_len and is_valid_state(model, "D", (z, y)):
                    out.append((z, y))
        if kind == "E":
            out = [(y[::-1], z[::-1]) for z, y in out]
        return out
    if kind == "Qs":
        return [w for n in range(max_len + 1) for w in itertools.product(range(model.I), repeat=n)]
    if kind == "Qc":
        return [w for n in range(max_len + 1) for w in itertools.product(range(model.J), repeat=n)]
    out = []
    for n in range(max_len // 2 + 1):
        for cw in itertools.product(range(model.I), repeat=n):
            for sw in itertools.product(range(model.J), repeat=n):
                if is_valid_state(model, "O", (cw, sw)):
                    out.append((cw, sw))
    return out


# -- bijection between Zs and D states ------------------------------------

def zs_to_d(model: MatchingModel, word):
    """Split a Zs word into the corresponding D state.

    The split point is the unique position where the number of unmatched
    customers before it equals the number of exchanged servers after it,
    which is the number of servers in the word.
    """
    _require_valid(model, "Zs", word)
    word = tuple(word)
    L = sum(k == S for k, _ in word)
    return word[:L], word[L:][::-1]


def d_to_zs(model: MatchingModel, state):
    _require_valid(model, "D", state)
    z, y = state
    return tuple(z) + tuple(y)[::-1]


def d_to_e(state):
    z, y = state
    return tuple(y)[::-1], tuple(z)[::-1]


def e_to_d(state):
    y, z = state
    return tuple(z)[::-1], tuple(y)[::-1]


# -- augmented state and marginal projections ----------------------------

@dataclass(frozen=True)
class AugmentedState:
    perm: tuple  # S_1..S_J server types by increasing last occurrence
    words: tuple  # w_1..w_{J-1}
    tail: tuple = ()  # w_J: items after S_J (o-Z form)
    head: tuple = ()  # items before S_1, not part of the augmented state


def to_augmented(model: MatchingModel, word) -> AugmentedState:
    """Rewrite a customer-line word by last occurrences of each server type."""
    word = tuple(word)
    last = {}
    for p, (k, t) in enumerate(word):
        if k == S:
            last[t] = p
    if len(last) != model.J:
        missing = sorted(set(range(model.J)) - set(last))
        raise StateError(f"word lacks exchanged servers of type(s) {[model.server_types[j] for j in missing]}")
    order = sorted(last, key=last.get)
    pos = [last[j] for j in order]
    words = tuple(word[pos[l] + 1: pos[l + 1]] for l in range(model.J - 1))
    return AugmentedState(tuple(order), words, word[pos[-1] + 1:], word[: pos[0]])


def augmented_ok(model: MatchingModel, aug: AugmentedState) -> bool:
    """Customers in w_l lie in U{S_1..S_l}; servers in w_l lie in {S_{l+1}..S_J}."""
    prefix = 0
    for l, w in enumerate(aug.words):
        prefix |= 1 << aug.perm[l]
        U = model.unique_customers(prefix)
        later = model.all_servers & ~prefix
        for k, t in w:
            if k == C and not U >> t & 1:
                return False
            if k == S and not later >> t & 1:
                return False
    return True


def project(aug: AugmentedState, marg_kind: str):
    """Marginal value of an augmented state.

    ``W``: 0/1 words; ``X``: unmatched customer counts; ``Y``: exchanged server
    counts; ``U``: both counts; ``V``: word lengths; ``R``: the permutation.
    """
    n = tuple(sum(k == C for k, _ in w) for w in aug.words)
    m = tuple(sum(k == S for k, _ in w) for w in aug.words)
    if marg_kind == "W":
        return aug.perm, tuple(tuple(0 if k == C else 1 for k, _ in w) for w in aug.words)
    if marg_kind == "X":
        return aug.perm, n
    if marg_kind == "Y":
        return aug.perm, m
    if marg_kind == "U":
        return aug.perm, tuple(zip(n, m))
    if marg_kind == "V":
        return aug.perm, tuple(a + b for a, b in zip(n, m))
    if marg_kind == "R":
        return aug.perm
    raise ValueError(f"unknown marginal {marg_kind!r}")


# -- text form ------------------------------------------------------------

_HAT = "̂"


def _hat(label: str) -> str:
    return unicodedata.normalize("NFC", label[:1] + _HAT) + label[1:]


def _unhat(token: str):
    d = unicodedata.normalize("NFD", token)
    if len(d) >= 2 and d[1] == _HAT:
        return True, unicodedata.normalize("NFC", d[0] + d[2:])
    return False, token


def format_word(model: MatchingModel, word, line: str = "customer") -> str:
    """Render a word, hatting the exchanged items of ``line``."""
    if not word:
        return "∅"
    parts = []
    for k, t in word:
        label = model.customer_types[t] if k == C else model.server_types[t]
        exchanged = (k == S) if line == "customer" else (k == C)
        parts.append(_hat(label) if exchanged else label)
    return " ".join(parts)


def parse_word(model: MatchingModel, text: str, line: str = "customer"):
    text = text.strip()
    if text in ("", "∅", "0"):
        return ()
    out = []
    for tok in text.split():
        exchanged, label = _unhat(tok)
        is_server = exchanged if line == "customer" else not exchanged
        if is_server:
            out.append((S, model.server_index(label)))
        else:
            out.append((C, model.customer_index(label)))
    return tuple(out)


def format_state(model: MatchingModel, kind: str, state) -> str:
    _check_kind(kind)
    if kind == "Zs":
        return format_word(model, state, "customer")
    if kind == "Zc":
        return format_word(model, state, "server")
    if kind == "D":
        return f"{format_word(model, state[0], 'customer')} | {format_word(model, state[1], 'server')}"
    if kind == "E":
        return f"{format_word(model, state[0], 'customer')} | {format_word(model, state[1], 'server')}"
    if kind == "Qs":
        return " ".join(model.customer_types[t] for t in state) or "∅"
    if kind == "Qc":
        return " ".join(model.server_types[t] for t in state) or "∅"
    cw = " ".join(model.customer_types[t] for t in state[0]) or "∅"
    sw = " ".join(model.server_types[t] for t in state[1]) or "∅"
    return f"{cw} | {sw}"
