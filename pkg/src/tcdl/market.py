"""Finite scenario trees and bid-ask market data.

A scenario tree is a rooted tree whose nodes carry integer trading dates;
all leaves sit at the terminal date T.  Probabilities can be given either
per leaf or as conditional transition probabilities; the two encodings are
derived from each other and cross-checked.  A market adds a strictly
positive ask price per node, a proportional cost level ``lam`` (selling at
the bid ``(1 - lam) * S``), and a terminal endowment per leaf.

Both ``ScenarioTree`` and ``MarketModel`` are frozen after construction and
safe to share between workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MarketError

# Tolerances for probability bookkeeping: sums to one, and leaf probabilities
# versus chained conditionals.
PROB_SUM_TOL = 1e-12
CHAIN_TOL = 1e-10


@dataclass(frozen=True)
class ScenarioTree:
    """Validated event tree.

    Nodes are indexed 0..n-1 in (time, id) order, so index 0 is the root and
    children always have larger indices than their parent.
    """

    node_ids: tuple[str, ...]
    parent: tuple[int, ...]          # -1 for the root
    time: tuple[int, ...]
    children: tuple[tuple[int, ...], ...]
    cond_prob: tuple[tuple[float, ...], ...]   # aligned with children
    leaves: tuple[int, ...]
    prob: tuple[float, ...]          # aligned with leaves
    node_prob: tuple[float, ...]     # unconditional probability of each node

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def horizon(self) -> int:
        return self.time[self.leaves[0]]

    @property
    def root(self) -> int:
        return 0

    def index_of(self, node_id: str) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise MarketError(f"unknown node id {node_id!r}") from None

    def is_leaf(self, node: int) -> bool:
        return not self.children[node]

    def path(self, node: int) -> list[int]:
        """Indices from the root down to ``node`` (inclusive)."""
        out = [node]
        while self.parent[out[-1]] >= 0:
            out.append(self.parent[out[-1]])
        return out[::-1]

    def leaf_prob(self) -> np.ndarray:
        return np.array(self.prob)


def build_tree(spec: Mapping) -> ScenarioTree:
    """Build and validate a scenario tree from a plain-dict description.

    ``spec["nodes"]`` lists ``{"id", "parent", "time"}`` records (parent absent
    or None for the root).  Probabilities come either as ``spec["probabilities"]``
    (leaf id -> p) or ``spec["cond_prob"]`` (node id -> {child id: p}); when both
    are present they must agree.
    """
    raw_nodes = spec.get("nodes")
    if not raw_nodes:
        raise MarketError("tree spec has no nodes")

    ids: list[str] = []
    parent_of: dict[str, str | None] = {}
    time_of: dict[str, int] = {}
    for rec in raw_nodes:
        nid = str(rec["id"])
        if nid in parent_of:
            raise MarketError(f"duplicate node id {nid!r}")
        ids.append(nid)
        par = rec.get("parent")
        parent_of[nid] = None if par is None else str(par)
        t = int(rec["time"])
        if t < 0:
            raise MarketError(f"node {nid!r} has negative time index")
        time_of[nid] = t

    roots = [nid for nid in ids if parent_of[nid] is None]
    if len(roots) != 1:
        raise MarketError(f"expected exactly one root, found {len(roots)}")
    for nid in ids:
        par = parent_of[nid]
        if par is None:
            continue
        if par not in parent_of:
            raise MarketError(f"orphan node {nid!r}: parent {par!r} does not exist")
        if par == nid:
            raise MarketError(f"cycle detected at node {nid!r}")
        if time_of[nid] != time_of[par] + 1:
            raise MarketError(
                f"node {nid!r} has time {time_of[nid]}, parent has {time_of[par]};"
                " children must be one step after their parent"
            )

    # Time strictly increases along parent links, so reachability from the
    # root is the only remaining connectivity concern.
    order = sorted(ids, key=lambda nid: (time_of[nid], nid))
    index = {nid: k for k, nid in enumerate(order)}
    reachable = {roots[0]}
    for nid in order:
        par = parent_of[nid]
        if par is not None:
            if par not in reachable:
                raise MarketError(f"node {nid!r} is not connected to the root")
            reachable.add(nid)

    n = len(order)
    parent = [-1] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for nid in order:
        par = parent_of[nid]
        if par is not None:
            parent[index[nid]] = index[par]
            children[index[par]].append(index[nid])
    for ch in children:
        ch.sort()

    leaves = [k for k in range(n) if not children[k]]
    t_max = max(time_of[nid] for nid in ids)
    for k in leaves:
        if time_of[order[k]] != t_max:
            raise MarketError(
                f"leaf {order[k]!r} at time {time_of[order[k]]} but terminal date is {t_max}"
            )

    leaf_probs = spec.get("probabilities")
    cond = spec.get("cond_prob")
    if leaf_probs is None and cond is None:
        raise MarketError("tree spec needs 'probabilities' or 'cond_prob'")

    node_prob = np.zeros(n)
    cond_out: list[list[float]] = [[] for _ in range(n)]

    if leaf_probs is not None:
        probs = {str(k): float(v) for k, v in leaf_probs.items()}
        missing = [order[k] for k in leaves if order[k] not in probs]
        if missing:
            raise MarketError(f"missing leaf probabilities for {missing}")
        for k in leaves:
            p = probs[order[k]]
            if not p > 0:
                raise MarketError(f"nonpositive probability at leaf {order[k]!r}")
            node_prob[k] = p
        total = node_prob[leaves].sum()
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise MarketError(f"leaf probabilities sum to {total!r}, not 1")
        # Aggregate upward, then read off conditionals.
        for k in reversed(range(n)):
            if children[k]:
                node_prob[k] = sum(node_prob[c] for c in children[k])
        for k in range(n):
            if children[k]:
                cond_out[k] = [node_prob[c] / node_prob[k] for c in children[k]]
    else:
        cond_in = {str(a): {str(b): float(p) for b, p in row.items()} for a, row in cond.items()}
        node_prob[0] = 1.0
        for k in range(n):
            if not children[k]:
                continue
            row = cond_in.get(order[k])
            if row is None:
                raise MarketError(f"missing conditional probabilities at node {order[k]!r}")
            ps = []
            for c in children[k]:
                if order[c] not in row:
                    raise MarketError(f"missing conditional probability {order[k]!r}->{order[c]!r}")
                p = row[order[c]]
                if not p > 0:
                    raise MarketError(f"nonpositive probability {order[k]!r}->{order[c]!r}")
                ps.append(p)
            if abs(sum(ps) - 1.0) > PROB_SUM_TOL:
                raise MarketError(f"conditional probabilities at {order[k]!r} sum to {sum(ps)!r}")
            cond_out[k] = ps
            for c, p in zip(children[k], ps):
                node_prob[c] = node_prob[k] * p

    if leaf_probs is not None and cond is not None:
        cond_in = {str(a): {str(b): float(p) for b, p in row.items()} for a, row in cond.items()}
        for k in range(n):
            for c, p in zip(children[k], cond_out[k]):
                given = cond_in.get(order[k], {}).get(order[c])
                if given is not None and abs(given - p) > CHAIN_TOL:
                    raise MarketError(
                        f"conditional probability {order[k]!r}->{order[c]!r} inconsistent with leaf probabilities"
                    )

    tree = ScenarioTree(
        node_ids=tuple(order),
        parent=tuple(parent),
        time=tuple(time_of[nid] for nid in order),
        children=tuple(tuple(ch) for ch in children),
        cond_prob=tuple(tuple(cs) for cs in cond_out),
        leaves=tuple(leaves),
        prob=tuple(float(node_prob[k]) for k in leaves),
        node_prob=tuple(float(p) for p in node_prob),
    )
    _check_chain_consistency(tree)
    return tree


def _check_chain_consistency(tree: ScenarioTree) -> None:
    for k, leaf in enumerate(tree.leaves):
        chained = 1.0
        for node in tree.path(leaf):
            par = tree.parent[node]
            if par >= 0:
                pos = tree.children[par].index(node)
                chained *= tree.cond_prob[par][pos]
        if abs(chained - tree.prob[k]) > CHAIN_TOL:
            raise MarketError(
                f"leaf {tree.node_ids[leaf]!r}: chained conditionals {chained}"
                f" disagree with leaf probability {tree.prob[k]}"
            )


def tree_to_spec(tree: ScenarioTree) -> dict:
    """Inverse of :func:`build_tree` (round-trips on validated trees)."""
    nodes = []
    for k, nid in enumerate(tree.node_ids):
        par = tree.parent[k]
        nodes.append({
            "id": nid,
            "parent": None if par < 0 else tree.node_ids[par],
            "time": tree.time[k],
        })
    probs = {tree.node_ids[leaf]: tree.prob[k] for k, leaf in enumerate(tree.leaves)}
    return {"nodes": nodes, "probabilities": probs}


@dataclass(frozen=True)
class MarketModel:
    """Scenario tree with ask prices, proportional cost level, and endowment.

    ``lam = 0`` is allowed as a frictionless baseline.  ``rho`` is the sup
    norm of the terminal endowment.
    """

    tree: ScenarioTree
    ask_price: tuple[float, ...]     # per node
    lam: float
    endowment: tuple[float, ...]     # per leaf, aligned with tree.leaves
    rho: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "rho", float(max(abs(e) for e in self.endowment)))

    def ask(self) -> np.ndarray:
        return np.array(self.ask_price)

    def bid(self) -> np.ndarray:
        return (1.0 - self.lam) * self.ask()

    def endowment_vector(self) -> np.ndarray:
        return np.array(self.endowment)


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...]
    rho: float


def build_market(spec: Mapping) -> MarketModel:
    """Assemble a market from the JSON schema (nodes/prices/lambda/endowment/probabilities)."""
    tree = build_tree(spec)
    prices = {str(k): float(v) for k, v in spec.get("prices", {}).items()}
    missing = [nid for nid in tree.node_ids if nid not in prices]
    if missing:
        raise MarketError(f"missing prices for nodes {missing}")
    try:
        lam = float(spec["lambda"])
    except KeyError:
        raise MarketError("market spec missing 'lambda'") from None
    endow_raw = {str(k): float(v) for k, v in spec.get("endowment", {}).items()}
    endow = tuple(endow_raw.get(tree.node_ids[leaf], 0.0) for leaf in tree.leaves)
    model = MarketModel(
        tree=tree,
        ask_price=tuple(prices[nid] for nid in tree.node_ids),
        lam=lam,
        endowment=endow,
    )
    report = validate_market(model)
    if not report.ok:
        raise MarketError("invalid market: " + "; ".join(report.violations))
    return model


def validate_market(model: MarketModel) -> ValidationReport:
    """Check positivity of prices and the admissible cost range.

    Returns the full list of violations instead of stopping at the first.
    """
    violations: list[str] = []
    for k, s in enumerate(model.ask_price):
        if not s > 0:
            violations.append(f"nonpositive price {s} at node {model.tree.node_ids[k]!r}")
    if not (0.0 <= model.lam < 1.0):
        violations.append(f"lambda {model.lam} outside [0, 1)")
    if len(model.endowment) != len(model.tree.leaves):
        violations.append("endowment not aligned with leaves")
    for e in model.endowment:
        if not np.isfinite(e):
            violations.append(f"non-finite endowment value {e}")
    return ValidationReport(ok=not violations, violations=tuple(violations), rho=model.rho)


def market_to_dict(model: MarketModel) -> dict:
    spec = tree_to_spec(model.tree)
    spec["prices"] = {nid: model.ask_price[k] for k, nid in enumerate(model.tree.node_ids)}
    spec["lambda"] = model.lam
    spec["endowment"] = {
        model.tree.node_ids[leaf]: model.endowment[k]
        for k, leaf in enumerate(model.tree.leaves)
    }
    return spec


def load_market(path: str) -> MarketModel:
    with open(path) as fh:
        return build_market(json.load(fh))


def save_market(model: MarketModel, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(market_to_dict(model), fh, indent=2, sort_keys=True)


def binomial_market(s0: float, s_up: float, s_down: float, lam: float,
                    p_up: float = 0.5,
                    endowment: Sequence[float] = (0.0, 0.0)) -> MarketModel:
    """One-period two-state market, the workhorse of hand-checkable cases."""
    return build_market({
        "nodes": [
            {"id": "root", "parent": None, "time": 0},
            {"id": "up", "parent": "root", "time": 1},
            {"id": "down", "parent": "root", "time": 1},
        ],
        "probabilities": {"up": p_up, "down": 1.0 - p_up},
        "prices": {"root": s0, "up": s_up, "down": s_down},
        "lambda": lam,
        "endowment": {"up": endowment[0], "down": endowment[1]},
    })


def single_node_market(price: float = 1.0, lam: float = 0.0,
                       endowment: float = 0.0) -> MarketModel:
    """Degenerate T = 0 market: the root is the only (leaf) node."""
    return build_market({
        "nodes": [{"id": "root", "parent": None, "time": 0}],
        "probabilities": {"root": 1.0},
        "prices": {"root": price},
        "lambda": lam,
        "endowment": {"root": endowment},
    })
