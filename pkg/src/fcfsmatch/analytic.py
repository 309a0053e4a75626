"""Exact product-form quantities: normalizing constant, stationary laws,
matching rates and link-length distributions.

All sums over orderings of the server (or customer) types are driven by
per-subset lookup tables indexed by prefix bitmasks, so one permutation
costs a handful of numpy gathers.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import chains
from .model import MatchingModel, bits, check_crp

PERM_CAP = 10
EXACT_CAP = 4
AGREE_TOL = 1e-10
CHUNK = 40320  # 8!
PMF_TOL = 1e-13
POLE_TOL = 1e-9


class DivergenceError(ArithmeticError):
    """Complete resource pooling fails, so the stationary sums diverge."""


class PermutationCapError(ValueError):
    pass


# -- permutation machinery ------------------------------------------------

def _perm_chunks(n: int, chunk: int = CHUNK):
    it = itertools.permutations(range(n))
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        yield np.array(block, dtype=np.int64).reshape(len(block), n)


def _prefix_masks(P: np.ndarray) -> np.ndarray:
    return np.bitwise_or.accumulate(np.left_shift(1, P), axis=1)


def _map_chunks(fn, n, threads=1):
    """Apply ``fn`` to every permutation chunk; returns the list of results."""
    chunks = _perm_chunks(n)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def _check_cap(n, cap, what):
    if n > cap:
        raise PermutationCapError(
            f"{what} count {n} exceeds the permutation cap {cap} ({math.factorial(n)} permutations)"
        )


def _perm_product_sum(n: int, table: np.ndarray, threads=1) -> float:
    """Sum over orderings of ``n`` types of prod_{l<n} table[prefix_l]."""
    if n == 1:
        return 1.0

    def part(P):
        M = _prefix_masks(P)[:, :-1]
        return float(np.prod(table[M], axis=1).sum())

    return math.fsum(_map_chunks(part, n, threads))


def _subset_dp(n: int, f) -> float:
    """Same sum as :func:`_perm_product_sum` by dynamic programming over subsets."""
    full = (1 << n) - 1
    dp = [0.0] * (1 << n)
    dp[0] = 1.0
    for mask in range(1, full + 1):
        acc = 0.0
        for k in bits(mask):
            acc += dp[mask ^ (1 << k)]
        dp[mask] = acc * (1.0 if mask == full else f(mask))
    return dp[full]


def _server_table(model: MatchingModel, exact=False):
    """1 / (beta_S - alpha_U(S)) for every server subset S (full set unused)."""
    out = []
    for S in range(1 << model.J):
        if exact:
            b = sum((Fraction(str(model.beta[j])) for j in bits(S)), Fraction(0))
            a = sum((Fraction(str(model.alpha[i])) for i in bits(model.unique_customers(S))), Fraction(0))
        else:
            b = model.beta_of(S)
            a = model.alpha_of(model.unique_customers(S))
        gap = b - a
        out.append(1 / gap if gap > 0 else (math.inf if not exact else None))
    return out


def _customer_table(model: MatchingModel, exact=False):
    """1 / (beta_S(C) - alpha_C) for every customer subset C."""
    out = []
    for Cm in range(1 << model.I):
        if exact:
            b = sum((Fraction(str(model.beta[j])) for j in bits(model.servers_of(Cm))), Fraction(0))
            a = sum((Fraction(str(model.alpha[i])) for i in bits(Cm)), Fraction(0))
        else:
            b = model.beta_of(model.servers_of(Cm))
            a = model.alpha_of(Cm)
        gap = b - a
        out.append(1 / gap if gap > 0 else (math.inf if not exact else None))
    return out


def _exact_perm_sum(n, table):
    total = Fraction(0)
    for perm in itertools.permutations(range(n)):
        term = Fraction(1)
        mask = 0
        for k in perm[:-1]:
            mask |= 1 << k
            term *= table[mask]
        total += term
    return total


# -- normalizing constant -------------------------------------------------

@dataclass(frozen=True)
class NormalizingConstant:
    B: float
    Bs: float
    server_form: float  # B from the sum over server orderings
    customer_form: float  # B from the sum over customer orderings
    dp_form: float  # B from the subset recursion
    diverges: bool
    exact: Fraction | None = None

    def __str__(self):
        if self.diverges:
            return "B = 0 (stationary sums diverge: complete resource pooling fails)"
        return f"B = {self.B!r}\nBs = {self.Bs!r}"


def normalizing_constant(
    model: MatchingModel, exact: bool = False, cap: int = PERM_CAP, threads: int = 1, tol: float = AGREE_TOL
) -> NormalizingConstant:
    """Evaluate B by both permutation sums and check they agree.

    When complete resource pooling fails some subset gap is non-positive and
    the sums are infinite; the result then has ``diverges`` set and ``B = 0``.
    """
    _check_cap(model.J, cap, "server type")
    _check_cap(model.I, cap, "customer type")
    if not check_crp(model).holds:
        return NormalizingConstant(0.0, 0.0, 0.0, 0.0, 0.0, True)
    prod_b = math.prod(model.beta)
    prod_a = math.prod(model.alpha)
    st = np.array(_server_table(model), dtype=float)
    ct = np.array(_customer_table(model), dtype=float)
    s_sum = _perm_product_sum(model.J, st, threads)
    c_sum = _perm_product_sum(model.I, ct, threads)
    d_sum = _subset_dp(model.J, lambda S: st[S])
    Bsrv = 1.0 / (prod_b * s_sum)
    Bcus = 1.0 / (prod_a * c_sum)
    Bdp = 1.0 / (prod_b * d_sum)
    for other, name in ((Bcus, "customer"), (Bdp, "subset recursion")):
        if abs(other - Bsrv) > tol * max(1.0, abs(Bsrv)):
            raise ArithmeticError(f"server-ordering B={Bsrv!r} disagrees with {name} B={other!r}")
    ex = None
    if exact:
        if max(model.I, model.J) > EXACT_CAP:
            raise PermutationCapError(f"exact mode supports at most {EXACT_CAP} types per side")
        pb = math.prod(Fraction(str(b)) for b in model.beta)
        pa = math.prod(Fraction(str(a)) for a in model.alpha)
        ex_s = 1 / (pb * _exact_perm_sum(model.J, _server_table(model, True)))
        ex_c = 1 / (pa * _exact_perm_sum(model.I, _customer_table(model, True)))
        if ex_s != ex_c:
            raise ArithmeticError(f"exact forms disagree: {ex_s} vs {ex_c}")
        ex = ex_s
    return NormalizingConstant(Bsrv, Bsrv * prod_b, Bsrv, Bcus, Bdp, False, ex)


# -- per-permutation context (reference path) -----------------------------

@dataclass(frozen=True)
class PermutationContext:
    """Level aggregates of one ordering S_1..S_J of the server types."""

    perm: tuple
    a: tuple  # alpha_(k) = alpha of U{S_1..S_k}
    b: tuple  # beta_(k)
    U: tuple  # customer masks U{S_1..S_k}

    @classmethod
    def build(cls, model: MatchingModel, perm):
        a, b, U = [], [], []
        mask = 0
        for s in perm:
            mask |= 1 << s
            u = model.unique_customers(mask)
            U.append(u)
            a.append(model.alpha_of(u))
            b.append(model.beta_of(mask))
        return cls(tuple(perm), tuple(a), tuple(b), tuple(U))

    def focal(self, model: MatchingModel, i: int, j: int):
        """(phi_k, psi_k, chi_k) for the pair (c_i, s_j); 0/0 is taken as 0."""
        out = []
        Cj = model.serv_adj[j]
        for ak, Uk in zip(self.a, self.U):
            if ak == 0:
                out.append((0.0, 0.0, 1.0))
                continue
            phi = model.alpha_of(Uk & Cj & (1 << i)) / ak
            psi = model.alpha_of(Uk & Cj & ~(1 << i)) / ak
            out.append((phi, psi, 1.0 - phi - psi))
        return out

    def pi_r(self, Bs: float) -> float:
        return Bs * math.prod(1.0 / (bk - ak) for ak, bk in zip(self.a[:-1], self.b[:-1]))


def permutation_contexts(model: MatchingModel):
    for perm in itertools.permutations(range(model.J)):
        yield PermutationContext.build(model, perm)


# -- evaluator --------------------------------------------------------------

class StationaryEvaluator:
    """Caches B and the subset tables for one model."""

    def __init__(self, model: MatchingModel, exact: bool = False, threads: int = 1, cap: int = PERM_CAP):
        self.model = model
        self.threads = threads
        self.cap = cap
        self.nc = normalizing_constant(model, exact=exact, cap=cap, threads=threads)
        self.crp = not self.nc.diverges
        J = model.J
        n = 1 << J
        self.bS = np.array([model.beta_of(S) for S in range(n)])
        self.Umask = [model.unique_customers(S) for S in range(n)]
        self.aU = np.array([model.alpha_of(u) for u in self.Umask])
        # alpha of U(S) within C(s_j), one row per server type
        self.mC = np.array([[model.alpha_of(u & model.serv_adj[j]) for u in self.Umask] for j in range(J)])
        # indicator c_i in U(S)
        self.inU = np.array([[(u >> i) & 1 for u in self.Umask] for i in range(model.I)], dtype=float)

    @property
    def B(self) -> float:
        return self.nc.B

    @property
    def Bs(self) -> float:
        return self.nc.Bs

    def require_crp(self):
        if not self.crp:
            raise DivergenceError("complete resource pooling fails; stationary quantities do not exist")


# -- stationary laws --------------------------------------------------------

def _word_weight(model, word) -> float:
    p = 1.0
    for k, t in word:
        p *= model.alpha[t] if k == chains.C else model.beta[t]
    return p


def pi_detailed(ev: StationaryEvaluator, kind: str, state) -> float:
    """Stationary probability of a state of Zs, Zc, D or E."""
    ev.require_crp()
    if kind not in ("Zs", "Zc", "D", "E"):
        raise ValueError(f"pi_detailed handles Zs, Zc, D, E; got {kind!r}")
    if not chains.is_valid_state(ev.model, kind, state):
        raise chains.StateError(f"invalid {kind} state {state!r}")
    if kind in ("D", "E"):
        return ev.B * _word_weight(ev.model, state[0]) * _word_weight(ev.model, state[1])
    return ev.B * _word_weight(ev.model, state)


def _qs_value(model, word, B):
    mask = 0
    p = B
    for c in word:
        mask |= 1 << c
        p *= model.alpha[c] / model.beta_of(model.servers_of(mask))
    return p * (1.0 - model.beta_of(model.servers_of(mask)))


def pi_natural(ev: StationaryEvaluator, kind: str, word) -> float:
    """Stationary probability of a Qs word, a Qc word or an O state."""
    ev.require_crp()
    m = ev.model
    if kind == "Qs":
        if not chains.is_valid_state(m, kind, tuple(word)):
            raise ValueError(f"bad customer word {word!r}")
        return _qs_value(m, tuple(word), ev.B)
    if kind == "Qc":
        if not chains.is_valid_state(m, kind, tuple(word)):
            raise ValueError(f"bad server word {word!r}")
        return _qs_value(m.mirrored, tuple(word), ev.B)
    if kind == "O":
        cw, sw = map(tuple, word)
        if not chains.is_valid_state(m, "O", (cw, sw)):
            return 0.0
        p = ev.B
        cmask = smask = 0
        for c, s in zip(cw, sw):
            cmask |= 1 << c
            smask |= 1 << s
            p *= m.alpha[c] / m.beta_of(m.servers_of(cmask))
            p *= m.beta[s] / m.alpha_of(m.customers_of(smask))
        return p
    raise ValueError(f"pi_natural handles Qs, Qc, O; got {kind!r}")


def _run_sum(q: float, tol: float):
    """Truncated sum of q^j, j >= 0, plus a bound on the omitted tail."""
    if q <= 0:
        return 1.0, 0.0
    n = 0
    total = 0.0
    term = 1.0
    while term / (1.0 - q) > tol:
        total += term
        term *= q
        n += 1
    return total, term / (1.0 - q)


def natural_by_summation(ev: StationaryEvaluator, kind: str, word, tol: float = 1e-13):
    """Sum detailed-chain probabilities over the runs of exchanged items.

    A natural state corresponds to all detailed states obtained by inserting
    runs of exchanged items after each unmatched item.  Each run is summed as a
    truncated series.  Returns ``(value, tail_bound)``.
    """
    ev.require_crp()
    m = ev.model
    if kind == "Qc":
        return natural_by_summation(_MirrorView(ev), "Qs", word, tol)
    if kind == "Qs":
        word = tuple(word)
        if not word:
            return ev.B, 0.0
        val = ev.B
        rel_tail = 0.0
        mask = 0
        for pos, c in enumerate(word):
            mask |= 1 << c
            q = 1.0 - m.beta_of(m.servers_of(mask))  # allowed exchanged servers
            s, t = _run_sum(q, tol / (2 * len(word)))
            if pos == len(word) - 1:
                s, t = q * s, q * t  # the last run is nonempty
            val *= m.alpha[c] * s
            rel_tail += t / max(s, 1e-300)
        return val, val * rel_tail
    if kind == "O":
        cw, sw = map(tuple, word)
        if not chains.is_valid_state(m, "O", (cw, sw)):
            return 0.0, 0.0
        val = ev.B
        rel_tail = 0.0
        cmask = smask = 0
        n = max(1, 2 * len(cw))
        for c, s in zip(cw, sw):
            cmask |= 1 << c
            smask |= 1 << s
            qs = 1.0 - m.beta_of(m.servers_of(cmask))
            qc = 1.0 - m.alpha_of(m.customers_of(smask))
            s1, t1 = _run_sum(qs, tol / n)
            s2, t2 = _run_sum(qc, tol / n)
            val *= m.alpha[c] * s1 * m.beta[s] * s2
            rel_tail += t1 / s1 + t2 / s2
        return val, val * rel_tail
    raise ValueError(f"natural_by_summation handles Qs, Qc, O; got {kind!r}")


class _MirrorView:
    """Evaluator facade on the mirrored model (same B)."""

    def __init__(self, ev):
        self.model = ev.model.mirrored
        self.B = ev.B

    def require_crp(self):
        pass


# -- marginals ----------------------------------------------------------------

def _perm_levels(ev, perm):
    perm = tuple(int(s) for s in perm)
    if sorted(perm) != list(range(ev.model.J)):
        raise ValueError(f"{perm!r} is not a permutation of the server types")
    masks = []
    mask = 0
    for s in perm:
        mask |= 1 << s
        masks.append(mask)
    return perm, masks


def _ints(seq, n, what):
    seq = tuple(seq)
    if len(seq) != n:
        raise ValueError(f"{what}: expected {n} entries, got {len(seq)}")
    for x in seq:
        if isinstance(x, bool) or not isinstance(x, (int, np.integer)) or x < 0:
            raise ValueError(f"{what}: entries must be non-negative integers, got {x!r}")
    return seq


def pi_marginal(ev: StationaryEvaluator, marg_kind: str, value) -> float:
    """Stationary probability of a W, X, Y, U, V or R value.

    ``R`` values are permutations of server indices; the others are
    ``(perm, per-level data)`` with J-1 entries: 0/1 tuples for W, counts for
    X, Y, V, and ``(n, m)`` pairs for U.
    """
    ev.require_crp()
    J = ev.model.J
    if marg_kind == "R":
        perm, masks = _perm_levels(ev, value)
        return ev.Bs * math.prod(1.0 / (ev.bS[M] - ev.aU[M]) for M in masks[:-1])
    try:
        perm, data = value
    except (TypeError, ValueError):
        raise ValueError(f"{marg_kind} value must be (perm, data)") from None
    perm, masks = _perm_levels(ev, perm)
    data = tuple(data)
    if len(data) != J - 1:
        raise ValueError(f"{marg_kind}: expected {J - 1} levels, got {len(data)}")
    p = ev.Bs
    for l, M in enumerate(masks[:-1]):
        a = ev.aU[M]  # alpha_U{S_1..S_l}
        b = ev.bS[M]  # beta_{S_1..S_l}
        rest = 1.0 - b  # beta of the later servers
        aC = 1.0 - a  # alpha_C of the later servers
        d = data[l]
        if marg_kind == "W":
            w = tuple(d)
            if any(x not in (0, 1) for x in w):
                raise ValueError("W words are 0/1 sequences")
            n0 = w.count(0)
            p *= a ** n0 * rest ** (len(w) - n0)
        elif marg_kind == "U":
            n, mm = _ints(d, 2, "U level")
            p *= math.comb(n + mm, n) * a ** n * rest ** mm
        elif marg_kind == "X":
            (n,) = _ints((d,), 1, "X level")
            p *= a ** n / b ** (n + 1)
        elif marg_kind == "Y":
            (mm,) = _ints((d,), 1, "Y level")
            p *= rest ** mm / aC ** (mm + 1)
        elif marg_kind == "V":
            (r,) = _ints((d,), 1, "V level")
            p *= (a + rest) ** r
        else:
            raise ValueError(f"unknown marginal {marg_kind!r}")
    return p


def pi_conditional(ev: StationaryEvaluator, marg_kind: str, value) -> float:
    """P(X = value | R) or P(Y = value | R) as a product of geometric terms."""
    ev.require_crp()
    perm, data = value
    perm, masks = _perm_levels(ev, perm)
    data = _ints(data, ev.model.J - 1, marg_kind)
    p = 1.0
    for n, M in zip(data, masks[:-1]):
        if marg_kind == "X":
            q = ev.aU[M] / ev.bS[M]
        elif marg_kind == "Y":
            q = (1.0 - ev.bS[M]) / (1.0 - ev.aU[M])
        else:
            raise ValueError("conditional laws exist for X and Y only")
        p *= q ** n * (1.0 - q)
    return p


# -- matching rates -----------------------------------------------------------

def _rate_chunk(ev, P):
    M = _prefix_masks(P)
    aU, bS = ev.aU[M], ev.bS[M]
    gap = bS - aU
    piR = ev.Bs / np.prod(gap[:, :-1], axis=1)
    m = ev.model
    out = np.zeros((m.I, m.J))
    for j in range(m.J):
        denom = gap + ev.mC[j][M]
        surv = gap / denom
        cum = np.cumprod(np.concatenate([np.ones((len(P), 1)), surv[:, :-1]], axis=1), axis=1)
        base = cum / denom
        for i in bits(m.serv_adj[j]):
            out[i, j] = m.alpha[i] * np.dot(piR, (ev.inU[i][M] * base).sum(axis=1))
    return out


def matching_rates(ev: StationaryEvaluator) -> np.ndarray:
    """Matrix of matching rates r[i, j] (fraction of matches pairing c_i with s_j)."""
    ev.require_crp()
    _check_cap(ev.model.J, ev.cap, "server type")
    parts = _map_chunks(lambda P: _rate_chunk(ev, P), ev.model.J, ev.threads)
    R = np.sum(parts, axis=0) * np.array(ev.model.beta)[None, :]
    return R


def matching_rates_reference(ev: StationaryEvaluator) -> np.ndarray:
    """Matching rates evaluated term by term with :class:`PermutationContext`."""
    ev.require_crp()
    m = ev.model
    J = m.J
    R = np.zeros((m.I, m.J))
    for ctx in permutation_contexts(m):
        pr = ctx.pi_r(ev.Bs)
        for i, j in m.edges:
            f = ctx.focal(m, i, j)
            acc = 0.0
            surv = 1.0
            for k in range(J):
                phi, psi, chi = f[k]
                a, b = ctx.a[k], ctx.b[k]
                if k < J - 1:
                    acc += phi * a / (b - a * chi) * surv
                    surv *= (b - a) / (b - a * chi)
                else:
                    acc += (phi / (phi + psi) if phi + psi > 0 else 0.0) * surv
            R[i, j] += m.beta[j] * pr * acc
    return R


# -- link lengths -------------------------------------------------------------

def _geom_pmf(q: float, tol: float, stretch: float = 1.0) -> np.ndarray:
    """Truncated Geom_0 pmf; ``stretch`` > 1 lengthens it so that
    q^n stretch^n stays below ``tol``."""
    if q <= 0:
        return np.ones(1)
    qe = q * stretch
    if qe >= 1.0:
        raise ValueError("series does not converge for this argument")
    n = max(1, int(math.ceil(math.log(tol) / math.log(qe))))
    k = np.arange(n + 1)
    return (1.0 - q) * q ** k


@dataclass
class SignedGeometricMixture:
    """Mixture over components of  G_1+..+G_l - (H_l+..+H_J) - (J-l).

    ``g`` and ``h`` hold the geometric ratios (P(G = n) = (1-g) g^n), padded
    with zeros for unused levels.  ``weights`` are unnormalized; their sum is
    ``mass`` and the law is obtained by dividing by it.
    """

    weights: np.ndarray
    g: np.ndarray
    h: np.ndarray
    shift: np.ndarray
    provenance: list = field(default_factory=list)  # (perm, l) per component
    label: str = ""

    @property
    def mass(self) -> float:
        return math.fsum(self.weights)

    def annulus(self):
        """(inner, outer) radii where the pgf series converges."""
        hmax = float(self.h.max(initial=0.0))
        gmax = float(self.g.max(initial=0.0))
        return hmax, (math.inf if gmax == 0 else 1.0 / gmax)

    def pgf(self, z, strict: bool = True):
        """E[z^L] from the component closed forms.

        Outside the annulus the rational expression is returned when
        ``strict`` is off; at a pole a ValueError is raised either way.
        """
        lo, hi = self.annulus()
        if strict and not lo < abs(z) < hi:
            raise ValueError(f"|z|={abs(z)} outside the convergence annulus ({lo}, {hi})")
        dg = 1.0 - self.g * z
        dh = 1.0 - self.h / z
        if min(np.abs(dg).min(initial=1.0), np.abs(dh).min(initial=1.0)) < POLE_TOL:
            raise ValueError(f"z={z} is a pole of the generating function")
        gz = np.prod((1.0 - self.g) / dg, axis=1)
        hz = np.prod((1.0 - self.h) / dh, axis=1)
        return np.sum(self.weights * gz * hz * z ** (-self.shift.astype(float))) / self.mass

    def mean(self) -> float:
        pos = (self.g / (1.0 - self.g)).sum(axis=1)
        neg = (self.h / (1.0 - self.h)).sum(axis=1)
        return float(np.sum(self.weights * (pos - neg - self.shift)) / self.mass)

    def pmf_table(self, tol: float = PMF_TOL, z: float = 1.0):
        """Return ``(kmin, pmf array, tail_bound)`` of the normalized law.

        Supports are truncated so that every dropped geometric tail, weighted
        by ``|z|^k``, is below ``tol``; ``tail_bound`` is the union bound on
        the dropped probability.
        """
        z = abs(z)
        groups: dict = {}
        for w, g, h, s in zip(self.weights, self.g, self.h, self.shift):
            if w <= 0:
                continue
            key = (tuple(np.round(g, 15)), tuple(np.round(h, 15)), int(s))
            groups[key] = groups.get(key, 0.0) + w
        pieces = []
        tail = 0.0
        for (g, h, s), w in groups.items():
            pos = np.ones(1)
            for q in g:
                if q > 0:
                    pm = _geom_pmf(q, tol, max(1.0, z))
                    pos = np.convolve(pos, pm)
                    tail += w * q ** len(pm)
            neg = np.ones(1)
            for q in h:
                if q > 0:
                    pm = _geom_pmf(q, tol, max(1.0, 1.0 / z))
                    neg = np.convolve(neg, pm)
                    tail += w * q ** len(pm)
            full = np.convolve(pos, neg[::-1])
            kmin = -(len(neg) - 1) - s
            pieces.append((kmin, w * full))
        kmin = min(k for k, _ in pieces)
        kmax = max(k + len(a) - 1 for k, a in pieces)
        out = np.zeros(kmax - kmin + 1)
        for k, a in pieces:
            out[k - kmin: k - kmin + len(a)] += a
        mass = self.mass
        return kmin, out / mass, tail / mass

    def _table(self, z: float = 1.0):
        cache = self.__dict__.setdefault("_cache", {})
        if z not in cache:
            cache[z] = self.pmf_table(z=z)
        return cache[z]

    def pmf(self, k) -> float:
        kmin, table, _ = self._table()
        idx = int(k) - kmin
        return float(table[idx]) if 0 <= idx < len(table) else 0.0

    def support(self):
        """(k values, pmf values) over the truncated support."""
        kmin, table, _ = self._table()
        return np.arange(kmin, kmin + len(table)), table

    def pgf_from_pmf(self, z) -> float:
        """Series sum of pmf(k) z^k over a support truncated for this ``z``."""
        kmin, table, _ = self._table(abs(float(z)))
        ks = np.arange(kmin, kmin + len(table))
        return float(np.sum(table * np.power(float(z), ks)))

    def to_csv(self) -> str:
        kmin, table, _ = self._table()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "pmf"])
        for off, p in enumerate(table):
            w.writerow([kmin + off, repr(float(p))])
        return buf.getvalue()


VARIANTS = ("derived", "renormalized")


def _link_chunk(ev, P, j, i, variant):
    J = ev.model.J
    M = _prefix_masks(P)
    aU, bS = ev.aU[M], ev.bS[M]
    gap = bS - aU
    piR = ev.Bs / np.prod(gap[:, :-1], axis=1)
    mj = ev.mC[j][M]  # alpha_(k) (phi_k + psi_k)
    if i is None or variant == "derived":
        denom = gap + mj
        g_all = (aU - mj) / bS
        num = mj if i is None else ev.model.alpha[i] * ev.inU[i][M]
    else:
        ai = ev.model.alpha[i] * ev.inU[i][M]  # alpha_(k) phi_k
        denom = gap + ai
        g_all = (aU - mj) / (bS - (mj - ai))
        num = ai
    surv = gap / denom
    cum = np.cumprod(np.concatenate([np.ones((len(P), 1)), surv[:, :-1]], axis=1), axis=1)
    W = piR[:, None] * num / denom * cum  # (n, J): weight of l = column + 1
    with np.errstate(invalid="ignore", divide="ignore"):
        h_all = np.where(1.0 - aU > 0, (1.0 - bS) / (1.0 - aU), 0.0)
    rows, cols = np.nonzero(W > 0)
    lvl = np.arange(J)
    gs = np.where(lvl[None, :] <= cols[:, None], g_all[rows], 0.0)
    hs = np.where(lvl[None, :] >= cols[:, None], h_all[rows], 0.0)
    prov = [(tuple(int(x) for x in P[r]), int(c) + 1) for r, c in zip(rows, cols)]
    return W[rows, cols], gs, hs, (J - 1 - cols).astype(np.int64), prov


def link_length_distribution(ev: StationaryEvaluator, s_j: int, c_i: int | None = None, variant: str = "derived"):
    """Stationary law of the link length of a type-``s_j`` server.

    With ``c_i`` the law is conditional on the partner being of type ``c_i``;
    the mixture mass is then r[c_i, s_j] / beta_j.  ``variant`` selects how
    the conditional law is built: ``"derived"`` keeps the geometric ratios
    of the unconditional search and only restricts the terminal event;
    ``"renormalized"`` renormalizes every search step by the probability of not
    meeting another compatible type (with beta - alpha in the product).
    """
    ev.require_crp()
    m = ev.model
    _check_cap(m.J, ev.cap, "server type")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if not 0 <= s_j < m.J:
        raise ValueError(f"server index {s_j} out of range")
    if c_i is not None and not m.compatible(c_i, s_j):
        raise ValueError(
            f"({m.customer_types[c_i]}, {m.server_types[s_j]}) is not an edge; the conditional law is undefined"
        )
    parts = _map_chunks(lambda P: _link_chunk(ev, P, s_j, c_i, variant), m.J, ev.threads)
    weights = np.concatenate([p[0] for p in parts])
    g = np.concatenate([p[1] for p in parts])
    h = np.concatenate([p[2] for p in parts])
    shift = np.concatenate([p[3] for p in parts])
    prov = [x for p in parts for x in p[4]]
    label = m.server_types[s_j] if c_i is None else f"{m.server_types[s_j]}|{m.customer_types[c_i]}"
    return SignedGeometricMixture(weights, g, h, shift, prov, label)


def _search_terms(ctx, f, l, z, conditional, variant):
    """Weight, level step and G factors of level ``l`` for one ordering."""
    phi, psi, chi = f[l]
    a, b = ctx.a[l], ctx.b[l]
    if not conditional:
        return a * (phi + psi) / (b - a * chi), (b - a) / (b - a * chi)
    if variant == "derived":
        return a * phi / (b - a * chi), (b - a) / (b - a * chi)
    return a * phi / (b - a * (psi + chi)), (b - a) / (b - a * (psi + chi))


def _g_factor(ctx, f, k, z, conditional, variant):
    """(pgf factor, ratio) of G_k."""
    phi, psi, chi = f[k]
    a, b = ctx.a[k], ctx.b[k]
    if conditional and variant == "renormalized":
        return (b - a * (psi + chi)) / (b - a * psi - a * chi * z), a * chi / (b - a * psi)
    return (b - a * chi) / (b - a * chi * z), a * chi / b


def pgf_eval(ev: StationaryEvaluator, s_j: int, z, c_i: int | None = None, variant: str = "derived",
             strict: bool = True):
    """Generating function of the link length, summed ordering by ordering.

    This walks the orderings with :class:`PermutationContext` and evaluates
    the closed-form factors directly, independently of the mixture arrays.
    With ``strict`` the argument must lie in the annulus where the series
    converges; otherwise the rational expression is returned as is.
    """
    ev.require_crp()
    m = ev.model
    J = m.J
    conditional = c_i is not None
    if conditional and not m.compatible(c_i, s_j):
        raise ValueError("conditional pgf needs an edge")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    focal_i = c_i if conditional else next(iter(bits(m.serv_adj[s_j])))
    total = 0.0
    mass = 0.0
    hmax = gmax = 0.0
    for ctx in permutation_contexts(m):
        pr = ctx.pi_r(ev.Bs)
        f = ctx.focal(m, focal_i, s_j)
        surv = 1.0
        for l in range(J):
            w, step = _search_terms(ctx, f, l, z, conditional, variant)
            weight = w * surv
            surv *= step
            if weight <= 0:
                continue
            gf = 1.0
            for k in range(l + 1):
                fac, ratio = _g_factor(ctx, f, k, z, conditional, variant)
                if not math.isfinite(fac) or abs(1.0 - ratio * z) < POLE_TOL:
                    raise ValueError(f"z={z} is a pole of the generating function")
                gf *= fac
                gmax = max(gmax, ratio)
            hf = 1.0
            for k in range(l, J):
                ak, bk = ctx.a[k], ctx.b[k]
                if 1.0 - ak <= 0:
                    continue  # 0/0: no exchanged servers after the last level
                hmax = max(hmax, (1.0 - bk) / (1.0 - ak))
                den = 1.0 - ak - (1.0 - bk) / z
                if abs(den) < POLE_TOL * (1.0 - ak):
                    raise ValueError(f"z={z} is a pole of the generating function")
                hf *= (bk - ak) / den
            total += pr * weight * gf * hf / z ** (J - 1 - l)
            mass += pr * weight
    if strict and not (hmax < abs(z) and abs(z) * gmax < 1.0):
        outer = 1.0 / gmax if gmax else math.inf
        raise ValueError(f"|z|={abs(z)} outside the convergence annulus ({hmax}, {outer})")
    return total / mass if conditional else total


# -- export -------------------------------------------------------------------

def rates_to_csv(model: MatchingModel, R: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["customer", *model.server_types])
    for i, name in enumerate(model.customer_types):
        w.writerow([name, *(repr(float(x)) for x in R[i])])
    return buf.getvalue()


def enumerate_pi(ev: StationaryEvaluator, kind: str, max_len: int):
    """(state, probability) for every enumerated state of a chain kind."""
    states = chains.enumerate_states(ev.model, kind, max_len)
    if kind in ("Zs", "Zc", "D", "E"):
        return [(s, pi_detailed(ev, kind, s)) for s in states]
    return [(s, pi_natural(ev, kind, s)) for s in states]
