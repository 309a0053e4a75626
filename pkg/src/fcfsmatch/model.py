"""Bipartite matching model: compatibility graph plus customer/server type laws.

Types are addressed by dense indices in declaration order; labels are opaque
strings kept for I/O only.  Subsets of types are integer bitmasks.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

PROB_TOL = 1e-12
MAX_TYPES = 64


class ModelError(ValueError):
    """Raised when a model description is invalid."""


def bits(mask: int) -> list[int]:
    """Indices of the set bits of ``mask`` in increasing order."""
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


@dataclass(frozen=True)
class TypeSubset:
    side: str  # "customer" or "server"
    members: frozenset

    def __post_init__(self):
        if self.side not in ("customer", "server"):
            raise ValueError(f"unknown side {self.side!r}")


@dataclass(frozen=True)
class CrpReport:
    holds: bool
    violations: list  # (TypeSubset of servers, beta_S, alpha_U(S))
    margin: float  # min over proper S of beta_S - alpha_U(S)
    tightest: TypeSubset | None
    forms_agree: bool = True

    def __str__(self):
        lines = [f"complete resource pooling: {'holds' if self.holds else 'FAILS'}"]
        if self.tightest is not None:
            lines.append(f"tightest subset {sorted(self.tightest.members)} margin {self.margin:.6g}")
        for sub, lhs, rhs in self.violations:
            lines.append(f"  violated at {sorted(sub.members)}: beta={lhs:.6g} <= alpha_U={rhs:.6g}")
        return "\n".join(lines)


@dataclass(frozen=True, eq=False)
class MatchingModel:
    customer_types: tuple
    server_types: tuple
    edges: frozenset  # (i, j) index pairs
    alpha: tuple
    beta: tuple
    # derived adjacency masks; filled in __post_init__
    cust_adj: tuple = field(init=False, repr=False)
    serv_adj: tuple = field(init=False, repr=False)

    def __post_init__(self):
        ca = [0] * len(self.customer_types)
        sa = [0] * len(self.server_types)
        for i, j in self.edges:
            ca[i] |= 1 << j
            sa[j] |= 1 << i
        object.__setattr__(self, "cust_adj", tuple(ca))
        object.__setattr__(self, "serv_adj", tuple(sa))

    @property
    def I(self) -> int:
        return len(self.customer_types)

    @property
    def J(self) -> int:
        return len(self.server_types)

    @property
    def all_customers(self) -> int:
        return (1 << self.I) - 1

    @property
    def all_servers(self) -> int:
        return (1 << self.J) - 1

    def compatible(self, i: int, j: int) -> bool:
        return bool(self.cust_adj[i] >> j & 1)

    # -- set operators on bitmasks -------------------------------------
    def servers_of(self, cmask: int) -> int:
        """S(C): server types compatible with some customer type in C."""
        out = 0
        for i in bits(cmask):
            out |= self.cust_adj[i]
        return out

    def customers_of(self, smask: int) -> int:
        """C(S): customer types compatible with some server type in S."""
        out = 0
        for j in bits(smask):
            out |= self.serv_adj[j]
        return out

    def unique_customers(self, smask: int) -> int:
        """U(S): customer types that can only be served by servers in S."""
        return self.all_customers & ~self.customers_of(self.all_servers & ~smask)

    def unique_servers(self, cmask: int) -> int:
        """Mirror of U: server types that can only serve customers in C."""
        return self.all_servers & ~self.servers_of(self.all_customers & ~cmask)

    def alpha_of(self, cmask: int) -> float:
        return math.fsum(self.alpha[i] for i in bits(cmask))

    def beta_of(self, smask: int) -> float:
        return math.fsum(self.beta[j] for j in bits(smask))

    # -- label helpers -------------------------------------------------
    def customer_index(self, label: str) -> int:
        try:
            return self.customer_types.index(label)
        except ValueError:
            raise ModelError(f"unknown customer type {label!r}") from None

    def server_index(self, label: str) -> int:
        try:
            return self.server_types.index(label)
        except ValueError:
            raise ModelError(f"unknown server type {label!r}") from None

    def mask(self, subset: TypeSubset) -> int:
        idx = self.customer_index if subset.side == "customer" else self.server_index
        m = 0
        for lab in subset.members:
            m |= 1 << idx(lab)
        return m

    def subset(self, side: str, mask: int) -> TypeSubset:
        labels = self.customer_types if side == "customer" else self.server_types
        return TypeSubset(side, frozenset(labels[k] for k in bits(mask)))

    @cached_property
    def mirrored(self) -> "MatchingModel":
        return self.mirror()

    def mirror(self) -> "MatchingModel":
        """Same model with the roles of customers and servers swapped."""
        return MatchingModel(
            customer_types=self.server_types,
            server_types=self.customer_types,
            edges=frozenset((j, i) for i, j in self.edges),
            alpha=self.beta,
            beta=self.alpha,
        )

    def to_dict(self) -> dict:
        return {
            "customers": [{"name": n, "prob": p} for n, p in zip(self.customer_types, self.alpha)],
            "servers": [{"name": n, "prob": p} for n, p in zip(self.server_types, self.beta)],
            "edges": [[self.customer_types[i], self.server_types[j]] for i, j in sorted(self.edges)],
        }


def _connected(I: int, J: int, edges: Iterable[tuple[int, int]]) -> bool:
    # union-find over I + J nodes
    parent = list(range(I + J))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, j in edges:
        a, b = find(i), find(I + j)
        if a != b:
            parent[a] = b
    return len({find(k) for k in range(I + J)}) == 1


def validate_model(
    customers: Sequence[tuple[str, float]],
    servers: Sequence[tuple[str, float]],
    edges: Iterable[tuple[str, str]],
) -> MatchingModel:
    """Build a validated :class:`MatchingModel` from labelled parts.

    ``customers`` and ``servers`` are ``(label, probability)`` pairs and
    ``edges`` are ``(customer label, server label)`` pairs.  Probabilities are
    checked, never renormalized.
    """
    clabels = [str(c) for c, _ in customers]
    slabels = [str(s) for s, _ in servers]
    if not clabels or not slabels:
        raise ModelError("model needs at least one customer type and one server type")
    for side, labels in (("customer", clabels), ("server", slabels)):
        if len(set(labels)) != len(labels):
            raise ModelError(f"duplicate {side} label")
        if len(labels) > MAX_TYPES:
            raise ModelError(f"more than {MAX_TYPES} {side} types")
    alpha = tuple(float(p) for _, p in customers)
    beta = tuple(float(p) for _, p in servers)
    for side, probs, labels in (("customer", alpha, clabels), ("server", beta, slabels)):
        for lab, p in zip(labels, probs):
            if not math.isfinite(p) or p <= 0.0:
                raise ModelError(f"{side} type {lab!r} has non-positive probability {p}")
        total = math.fsum(probs)
        if abs(total - 1.0) > PROB_TOL:
            raise ModelError(f"{side} probabilities sum to {total!r}, not 1")

    cidx = {c: k for k, c in enumerate(clabels)}
    sidx = {s: k for k, s in enumerate(slabels)}
    pairs = set()
    for e in edges:
        if len(e) != 2:
            raise ModelError(f"malformed edge {e!r}")
        c, s = str(e[0]), str(e[1])
        if c not in cidx:
            raise ModelError(f"edge references unknown customer type {c!r}")
        if s not in sidx:
            raise ModelError(f"edge references unknown server type {s!r}")
        p = (cidx[c], sidx[s])
        if p in pairs:
            raise ModelError(f"duplicate edge {c}-{s}")
        pairs.add(p)

    I, J = len(clabels), len(slabels)
    touched_c = {i for i, _ in pairs}
    touched_s = {j for _, j in pairs}
    for i in range(I):
        if i not in touched_c:
            raise ModelError(f"customer type {clabels[i]!r} is isolated")
    for j in range(J):
        if j not in touched_s:
            raise ModelError(f"server type {slabels[j]!r} is isolated")
    if not _connected(I, J, pairs):
        raise ModelError("compatibility graph is disconnected")
    return MatchingModel(tuple(clabels), tuple(slabels), frozenset(pairs), alpha, beta)


_MODEL_KEYS = {"customers", "servers", "edges"}
_TYPE_KEYS = {"name", "prob"}


def model_from_dict(doc: dict) -> MatchingModel:
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")
    extra = set(doc) - _MODEL_KEYS
    if extra:
        raise ModelError(f"unknown field(s): {sorted(extra)}")
    missing = _MODEL_KEYS - set(doc)
    if missing:
        raise ModelError(f"missing field(s): {sorted(missing)}")

    def parse_types(key):
        out = []
        if not isinstance(doc[key], list):
            raise ModelError(f"field {key!r} must be a list")
        for k, entry in enumerate(doc[key]):
            if not isinstance(entry, dict):
                raise ModelError(f"{key}[{k}] must be an object")
            bad = set(entry) ^ _TYPE_KEYS
            if bad:
                raise ModelError(f"{key}[{k}]: expected fields name, prob (got {sorted(entry)})")
            if not isinstance(entry["prob"], (int, float)) or isinstance(entry["prob"], bool):
                raise ModelError(f"{key}[{k}].prob must be a number")
            out.append((entry["name"], entry["prob"]))
        return out

    if not isinstance(doc["edges"], list):
        raise ModelError("field 'edges' must be a list")
    return validate_model(parse_types("customers"), parse_types("servers"), doc["edges"])


def load_model(path) -> MatchingModel:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return model_from_dict(doc)


def neighbor_sets(model: MatchingModel, subset: TypeSubset, op: str) -> TypeSubset:
    """Apply a set operator to ``subset``.

    ``op`` is ``"S"`` (servers compatible with a customer subset), ``"C"``
    (customers compatible with a server subset) or ``"U"`` (customers served
    only by the server subset).
    """
    if op == "S":
        if subset.side != "customer":
            raise ModelError("S() takes a customer subset")
        return model.subset("server", model.servers_of(model.mask(subset)))
    if op in ("C", "U"):
        if subset.side != "server":
            raise ModelError(f"{op}() takes a server subset")
        m = model.mask(subset)
        res = model.customers_of(m) if op == "C" else model.unique_customers(m)
        return model.subset("customer", res)
    raise ValueError(f"unknown operator {op!r}")


def subset_weight(model: MatchingModel, subset: TypeSubset) -> float:
    """alpha_C for a customer subset, beta_S for a server subset."""
    m = model.mask(subset)
    return model.alpha_of(m) if subset.side == "customer" else model.beta_of(m)


def check_crp(model: MatchingModel) -> CrpReport:
    """Exhaustively check complete resource pooling over proper subsets.

    The verdict uses ``beta_S > alpha_U(S)``; the two other equivalent forms
    are evaluated as well and ``forms_agree`` records whether all three gave
    the same verdict.
    """
    full_s, full_c = model.all_servers, model.all_customers
    violations = []
    margin = math.inf
    tightest = None
    for S in range(1, full_s):
        lhs = model.beta_of(S)
        rhs = model.alpha_of(model.unique_customers(S))
        gap = lhs - rhs
        if gap < margin:
            margin, tightest = gap, S
        if not lhs > rhs:
            violations.append((model.subset("server", S), lhs, rhs))
    holds3 = not violations
    holds2 = all(model.beta_of(S) < model.alpha_of(model.customers_of(S)) for S in range(1, full_s))
    holds1 = all(model.alpha_of(C) < model.beta_of(model.servers_of(C)) for C in range(1, full_c))
    if tightest is None:  # J == 1: no proper nonempty subset
        margin = math.inf
    return CrpReport(
        holds=holds3,
        violations=violations,
        margin=margin,
        tightest=None if tightest is None else model.subset("server", tightest),
        forms_agree=holds1 == holds2 == holds3,
    )


def nn_model(alpha=(0.5, 0.3, 0.2), beta=(0.4, 0.4, 0.2)) -> MatchingModel:
    """The three-by-three "NN" system used throughout the docs and tests."""
    return validate_model(
        [("c1", alpha[0]), ("c2", alpha[1]), ("c3", alpha[2])],
        [("s1", beta[0]), ("s2", beta[1]), ("s3", beta[2])],
        [("c1", "s2"), ("c1", "s3"), ("c2", "s1"), ("c2", "s2"), ("c3", "s1")],
    )


def random_model(rng, I: int, J: int, edge_prob: float = 0.4, require_crp: bool = False, max_tries: int = 1000):
    """Random connected model with Dirichlet type laws.

    A random spanning tree guarantees connectivity; further edges are added
    independently with probability ``edge_prob``.  With ``require_crp`` the
    draw is repeated until complete resource pooling holds.
    """
    for _ in range(max_tries):
        nodes = [("c", i) for i in range(I)] + [("s", j) for j in range(J)]
        order = list(rng.permutation(len(nodes)))
        edges = set()
        placed_c = [nodes[order[0]]] if nodes[order[0]][0] == "c" else []
        placed_s = [nodes[order[0]]] if nodes[order[0]][0] == "s" else []
        pending = [nodes[k] for k in order[1:]]
        # attach each node to an already placed node of the other side
        while pending:
            for k, (side, t) in enumerate(pending):
                other = placed_s if side == "c" else placed_c
                if other:
                    u = other[int(rng.integers(len(other)))][1]
                    edges.add((t, u) if side == "c" else (u, t))
                    (placed_c if side == "c" else placed_s).append((side, t))
                    del pending[k]
                    break
            else:
                raise AssertionError("unreachable: both sides have nodes")
        for i in range(I):
            for j in range(J):
                if rng.random() < edge_prob:
                    edges.add((i, j))
        a = rng.dirichlet(np.ones(I))
        b = rng.dirichlet(np.ones(J))
        model = validate_model(
            [(f"c{i + 1}", float(p)) for i, p in enumerate(a)],
            [(f"s{j + 1}", float(p)) for j, p in enumerate(b)],
            [(f"c{i + 1}", f"s{j + 1}") for i, j in sorted(edges)],
        )
        if not require_crp or check_crp(model).holds:
            return model
    raise ModelError(f"no CRP model found in {max_tries} draws")
