"""Finite event trees, stopping times, and cumulative cash-balance processes.

A tree models a filtration on a finite sample space: nodes are events, the
root is time 0, and every leaf sits at the same terminal time T >= 1.  Node
order is the input order everywhere (children lists included), so all
iteration over a tree is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class NodeRecord:
    """One node of the input: unique id, parent id (None for the root), and
    an optional strictly positive probability mass."""

    id: str
    parent: str | None = None
    weight: float | None = None


class Tree:
    """Validated rooted event tree with equal-depth leaves.

    Nodes are indexed 0..n-1 in input order.  The depth-first preorder makes
    every subtree a contiguous slice, which the valuation sweeps rely on.
    Instances are immutable after construction and safe to share across
    threads.
    """

    def __init__(self, records: Sequence[NodeRecord]):
        records = list(records)
        if not records:
            raise ValidationError("tree needs at least one node")

        ids = [r.id for r in records]
        index: dict[str, int] = {}
        for i, node_id in enumerate(ids):
            if not isinstance(node_id, str) or not node_id:
                raise ValidationError(f"node id must be a nonempty string, got {node_id!r}")
            if node_id in index:
                raise ValidationError(f"duplicate node id {node_id!r}")
            index[node_id] = i

        parent = np.full(len(records), -1, dtype=np.int64)
        roots = []
        for i, rec in enumerate(records):
            if rec.parent is None:
                roots.append(i)
            else:
                j = index.get(rec.parent)
                if j is None:
                    raise ValidationError(f"node {rec.id!r} references missing parent {rec.parent!r}")
                if j == i:
                    raise ValidationError(f"node {rec.id!r} is its own parent")
                parent[i] = j
        if not roots:
            raise ValidationError("tree has no root (every node has a parent)")
        if len(roots) > 1:
            raise ValidationError(
                "tree has multiple roots: " + ", ".join(repr(ids[i]) for i in roots)
            )
        root = roots[0]

        children: list[list[int]] = [[] for _ in records]
        for i in range(len(records)):
            if parent[i] >= 0:
                children[parent[i]].append(i)

        # Times via BFS from the root; anything unreached sits on a parent cycle.
        time = np.full(len(records), -1, dtype=np.int64)
        time[root] = 0
        frontier = [root]
        preorder: list[int] = []
        stack = [root]
        while stack:
            u = stack.pop()
            preorder.append(u)
            for v in reversed(children[u]):
                time[v] = time[u] + 1
                stack.append(v)
        if len(preorder) != len(records):
            missing = [ids[i] for i in range(len(records)) if time[i] < 0]
            raise ValidationError(f"nodes unreachable from root (parent cycle?): {missing}")

        leaf = np.array([not children[i] for i in range(len(records))], dtype=bool)
        leaf_times = time[leaf]
        depth = int(leaf_times.max())
        if int(leaf_times.min()) != depth:
            raise ValidationError("all leaves must sit at the same depth")
        if depth < 1:
            raise ValidationError("tree must have depth >= 1 (a lone root is degenerate)")

        weights = [r.weight for r in records]
        has_weight = [w is not None for w in weights]
        if any(has_weight) and not all(has_weight):
            raise ValidationError(
                "weights must be given on every node or on none (leaf-only weights are rejected)"
            )
        weight_arr = None
        subtree_weight = None
        if all(has_weight):
            weight_arr = np.array(weights, dtype=float)
            if np.any(weight_arr <= 0.0) or not np.all(np.isfinite(weight_arr)):
                bad = ids[int(np.argmin(weight_arr))]
                raise ValidationError(f"node weights must be strictly positive; offending node {bad!r}")
            subtree_weight = weight_arr.copy()
            for u in reversed(preorder):
                p = parent[u]
                if p >= 0:
                    subtree_weight[p] += subtree_weight[u]

        pre_position = np.empty(len(records), dtype=np.int64)
        pre_position[preorder] = np.arange(len(records))
        subtree_size = np.ones(len(records), dtype=np.int64)
        for u in reversed(preorder):
            p = parent[u]
            if p >= 0:
                subtree_size[p] += subtree_size[u]

        self.ids: tuple[str, ...] = tuple(ids)
        self.index: dict[str, int] = index
        self.parent_index = parent
        self.children_index: tuple[tuple[int, ...], ...] = tuple(tuple(c) for c in children)
        self.root_index = root
        self.time = time
        self.depth = depth
        self.is_leaf = leaf
        self.leaf_indices: tuple[int, ...] = tuple(int(i) for i in np.flatnonzero(leaf))
        self.preorder = np.array(preorder, dtype=np.int64)
        self.pre_position = pre_position
        self.subtree_size = subtree_size
        self.weights = weight_arr
        self.subtree_weight = subtree_weight
        for arr in (self.parent_index, self.time, self.is_leaf, self.preorder,
                    self.pre_position, self.subtree_size):
            arr.flags.writeable = False
        if weight_arr is not None:
            weight_arr.flags.writeable = False
            subtree_weight.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return len(self.ids)

    @property
    def root(self) -> str:
        return self.ids[self.root_index]

    def node_index(self, node_id: str) -> int:
        try:
            return self.index[node_id]
        except KeyError:
            raise ValidationError(f"unknown node id {node_id!r}") from None

    def descendant_indices(self, i: int) -> np.ndarray:
        """Indices of the subtree rooted at node i (i included), preorder."""
        pos = self.pre_position[i]
        return self.preorder[pos : pos + self.subtree_size[i]]

    def internal_indices(self) -> Iterable[int]:
        return (i for i in range(self.n_nodes) if not self.is_leaf[i])

    def __repr__(self) -> str:
        return f"Tree(n_nodes={self.n_nodes}, depth={self.depth}, root={self.root!r})"


def build_tree(records: Sequence[NodeRecord]) -> Tree:
    """Validate records and build the tree with children lists, times and
    leaf set precomputed."""
    return Tree(records)


def children(tree: Tree, x: str) -> tuple[str, ...]:
    """Immediate descendants of x, in input order."""
    return tuple(tree.ids[c] for c in tree.children_index[tree.node_index(x)])


def descendants(tree: Tree, x: str) -> set[str]:
    """All descendants of x, x itself included."""
    return {tree.ids[i] for i in tree.descendant_indices(tree.node_index(x))}


def subtree_mass(tree: Tree, x: str) -> float:
    """Total node weight of the subtree at x (the whole tree sums to 1)."""
    if tree.subtree_weight is None:
        raise ValidationError("tree has no node weights attached")
    return float(tree.subtree_weight[tree.node_index(x)])


@dataclass(frozen=True)
class StoppingTime:
    """Antichain of nodes meeting every root-to-leaf path exactly once."""

    graph: frozenset[str]


def stopping_time(tree: Tree, nodes: Iterable[str]) -> StoppingTime:
    """Validated stopping time from its graph."""
    graph = frozenset(nodes)
    members = np.zeros(tree.n_nodes, dtype=bool)
    for node_id in graph:
        members[tree.node_index(node_id)] = True
    hits = np.zeros(tree.n_nodes, dtype=np.int64)
    for u in tree.preorder:
        p = tree.parent_index[u]
        hits[u] = (hits[p] if p >= 0 else 0) + (1 if members[u] else 0)
    leaf_hits = hits[list(tree.leaf_indices)]
    if np.any(leaf_hits != 1):
        k = int(np.argmax(leaf_hits != 1))
        bad = tree.ids[tree.leaf_indices[k]]
        raise ValidationError(
            f"not a stopping time: path to leaf {bad!r} meets the graph {int(leaf_hits[k])} times"
        )
    return StoppingTime(graph)


def hitting_stop(tree: Tree, x: str) -> StoppingTime:
    """First time the path enters x; terminal time on paths that miss x.

    Graph is {x} together with every leaf not descending from x.
    """
    xi = tree.node_index(x)
    under = set(int(i) for i in tree.descendant_indices(xi))
    graph = {x}
    graph.update(tree.ids[i] for i in tree.leaf_indices if i not in under)
    return stopping_time(tree, graph)


class CashBalance:
    """Cumulative cash per node, aligned with the tree's node order.

    Values are a read-only float array of length ``tree.n_nodes``; increments
    are derived, never stored.
    """

    __slots__ = ("tree", "values")

    def __init__(self, tree: Tree, values):
        arr = np.array(values, dtype=float)
        if arr.shape != (tree.n_nodes,):
            raise ValidationError(
                f"cash balance must give one value per node ({tree.n_nodes}), got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValidationError("cash balance values must be finite")
        arr.flags.writeable = False
        self.tree = tree
        self.values = arr

    @classmethod
    def from_mapping(cls, tree: Tree, mapping: Mapping[str, float]) -> "CashBalance":
        unknown = set(mapping) - set(tree.ids)
        if unknown:
            raise ValidationError(f"cash balance names unknown nodes: {sorted(unknown)}")
        missing = set(tree.ids) - set(mapping)
        if missing:
            raise ValidationError(f"cash balance must cover every node; missing: {sorted(missing)}")
        return cls(tree, [float(mapping[node_id]) for node_id in tree.ids])

    @classmethod
    def constant(cls, tree: Tree, value: float) -> "CashBalance":
        return cls(tree, np.full(tree.n_nodes, float(value)))

    def as_mapping(self) -> dict[str, float]:
        return {node_id: float(v) for node_id, v in zip(self.tree.ids, self.values)}

    def value_at(self, node_id: str) -> float:
        return float(self.values[self.tree.node_index(node_id)])

    def __repr__(self) -> str:
        return f"CashBalance({self.as_mapping()!r})"


def replace_after(balance: CashBalance, stop: StoppingTime, replacement: Mapping[str, float]) -> CashBalance:
    """Paste a stopped continuation onto a cash balance.

    The result agrees with the original strictly before the stopping time and
    is constant, equal to the replacement value of the stop node z, at every
    node at-or-after z on that path.
    """
    tree = balance.tree
    extra = set(replacement) - set(stop.graph)
    if extra:
        raise ValidationError(f"replacement values given off the stopping graph: {sorted(extra)}")
    missing = set(stop.graph) - set(replacement)
    if missing:
        raise ValidationError(f"replacement value missing for stop nodes: {sorted(missing)}")
    members = np.zeros(tree.n_nodes, dtype=bool)
    repl = np.zeros(tree.n_nodes, dtype=float)
    for node_id, v in replacement.items():
        i = tree.node_index(node_id)
        members[i] = True
        repl[i] = float(v)
    out = np.empty(tree.n_nodes, dtype=float)
    active = np.full(tree.n_nodes, -1, dtype=np.int64)
    for u in tree.preorder:
        p = tree.parent_index[u]
        act = active[p] if p >= 0 else -1
        if members[u]:
            act = u
        active[u] = act
        out[u] = repl[act] if act >= 0 else balance.values[u]
    return CashBalance(tree, out)
