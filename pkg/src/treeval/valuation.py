"""One-step valuation operators, their backward-induction assembly into
per-node operators, stopping-time valuations, and the executable axiom suite.

The assembled operator at a node reads the cash balance only on that node's
subtree; at a leaf it is the identity on the leaf's cash.  One-step operators
receive child values in the tree's deterministic child order, and their
``evaluate`` must broadcast over a leading batch axis (scalars in, scalar
out; ``(B,)`` and ``(B, m)`` in, ``(B,)`` out) -- every closed form shipped
here does, and the batched sweep is what makes the fuzzing suites cheap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ValidationError
from .tree import CashBalance, StoppingTime, Tree, stopping_time

DEFAULT_AXIOM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class OneStepValuation:
    """Concave operator on a node's own cash and its children's values.

    ``evaluate(k_x, k_children)`` maps the current cash and the vector of
    child values to one number.  ``dual`` is the optional closed-form convex
    conjugate on probability vectors over (node, children), used to verify
    the dual recursion without an inner optimization.
    """

    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    descriptor: str = ""
    dual: Callable[[float, np.ndarray], float] | None = None
    smooth: bool = True


def linear_one_step(child_weights) -> OneStepValuation:
    """Expectation over the children with the given probability weights."""
    w = np.asarray(child_weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError("child weights must be a probability vector")

    def evaluate(k_x, k_children):
        return np.asarray(k_children, dtype=float) @ w

    return OneStepValuation(evaluate, descriptor=f"linear({w.tolist()})")


class ValuationFamily:
    """Per-node valuation operators assembled by backward induction."""

    def __init__(self, tree: Tree, one_steps: Mapping[str, OneStepValuation], *,
                 descriptor: str = "", dual_closed=None, dual_smooth: bool = True):
        steps: list[OneStepValuation | None] = [None] * tree.n_nodes
        for node_id, op in one_steps.items():
            i = tree.node_index(node_id)
            if tree.is_leaf[i]:
                raise ValidationError(f"one-step operator given for leaf {node_id!r}")
            steps[i] = op
        for i in tree.internal_indices():
            if steps[i] is None:
                raise ValidationError(f"missing one-step operator for node {tree.ids[i]!r}")
        self.tree = tree
        self.one_steps = tuple(steps)
        self.descriptor = descriptor
        # Optional closed-form dual: callable (node_id, density mapping) -> float.
        self.dual_closed = dual_closed
        self.dual_smooth = dual_smooth

    def node_values(self, values: np.ndarray) -> np.ndarray:
        """Valuation of every node for cash values of shape (..., n_nodes)."""
        values = np.asarray(values, dtype=float)
        tree = self.tree
        out = np.empty_like(values)
        for u in tree.preorder[::-1]:
            kids = tree.children_index[u]
            if not kids:
                out[..., u] = values[..., u]
            else:
                out[..., u] = self.one_steps[u].evaluate(values[..., u], out[..., kids])
        return out

    def value(self, x: str, balance: CashBalance) -> float:
        if balance.tree is not self.tree:
            raise ValidationError("cash balance built on a different tree")
        return float(self.node_values(balance.values)[self.tree.node_index(x)])

    def __repr__(self) -> str:
        return f"ValuationFamily({self.descriptor or 'custom'}, n_nodes={self.tree.n_nodes})"


def assemble(tree: Tree, one_steps: Mapping[str, OneStepValuation], **kwargs) -> ValuationFamily:
    """Build the family of per-node operators from one-step operators
    (total on internal nodes)."""
    return ValuationFamily(tree, one_steps, **kwargs)


def value_at(family, stop: StoppingTime, balance: CashBalance) -> dict[str, float]:
    """Valuation along a stopping time: the node operator of each graph node."""
    tree = family.tree
    for node_id in stop.graph:
        tree.node_index(node_id)
    vals = family.node_values(balance.values)
    return {node_id: float(vals[tree.node_index(node_id)]) for node_id in sorted(stop.graph)}


def sample_stopping_time(tree: Tree, rng: np.random.Generator, *, start: str | None = None,
                         stop_probability: float = 0.35) -> StoppingTime:
    """Random stopping time of the subtree at start: each internal node stops
    with the given probability, leaves always stop."""
    start_idx = tree.node_index(start) if start is not None else tree.root_index
    graph: list[str] = []
    stack = [start_idx]
    while stack:
        u = stack.pop()
        if tree.is_leaf[u] or rng.uniform() < stop_probability:
            graph.append(tree.ids[u])
        else:
            stack.extend(reversed(tree.children_index[u]))
    return stopping_time(tree, graph)


@dataclass
class AxiomCheck:
    name: str
    passed: bool
    worst_residual: float
    witness: dict | None = None

    def as_dict(self) -> dict:
        out = {"passed": self.passed, "worst_residual": self.worst_residual}
        if self.witness is not None:
            out["witness"] = self.witness
        return out


@dataclass
class AxiomReport:
    checks: list[AxiomCheck]
    trials: int
    seed: int
    tolerance: float

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst_residual(self) -> float:
        return max(c.worst_residual for c in self.checks)

    def check(self, name: str) -> AxiomCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "trials": self.trials,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "axioms": {c.name: c.as_dict() for c in self.checks},
        }


def _cash_witness(tree: Tree, row: np.ndarray) -> dict[str, float]:
    return {node_id: float(v) for node_id, v in zip(tree.ids, row)}


def _max_with_witness(residual: np.ndarray) -> tuple[float, tuple[int, ...]]:
    worst = float(residual.max())
    where = np.unravel_index(int(np.argmax(residual)), residual.shape)
    return worst, where


def check_axioms(family, trials: int, seed: int, *,
                 tolerance: float = DEFAULT_AXIOM_TOLERANCE,
                 cash_range: tuple[float, float] = (-5.0, 5.0)) -> AxiomReport:
    """Fuzz the valuation axioms on seeded random cash balances and stopping
    times.  Failures are reported with witnesses, never raised.

    Checked per node: concavity at midpoints, monotonicity, translation
    invariance, zero at zero, locality (off-subtree edits are invisible), and
    the pasting identity for sampled stopping times.  The stopping-time
    dispatch identity is structural (valuations along a stopping time call
    the node operators) and is asserted as such.
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    tree = family.tree
    n = tree.n_nodes
    rng = np.random.default_rng(seed)
    low, high = cash_range

    cash_a = rng.uniform(low, high, (trials, n))
    cash_b = rng.uniform(low, high, (trials, n))
    drop = rng.uniform(0.0, 2.0, (trials, n))
    shift = rng.uniform(-3.0, 3.0, (trials, 1))
    sigmas = [sample_stopping_time(tree, rng) for _ in range(trials)]
    local_nodes = rng.integers(0, n, trials)
    local_noise = rng.uniform(-1.0, 1.0, (trials, n))

    pi_a = family.node_values(cash_a)
    pi_b = family.node_values(cash_b)
    pi_mid = family.node_values(0.5 * (cash_a + cash_b))
    pi_drop = family.node_values(cash_a - drop)
    pi_shift = family.node_values(cash_a + shift)
    pi_zero = family.node_values(np.zeros(n))

    checks: list[AxiomCheck] = []

    def add(name, residual_matrix, witness_fn):
        worst, where = _max_with_witness(residual_matrix)
        passed = worst <= tolerance
        witness = witness_fn(where) if not passed else None
        checks.append(AxiomCheck(name, passed, worst, witness))

    # concavity at midpoints
    conc = np.maximum(0.5 * (pi_a + pi_b) - pi_mid, 0.0)
    add("C", conc, lambda w: {
        "node": tree.ids[w[1]],
        "cash": _cash_witness(tree, cash_a[w[0]]),
        "cash_other": _cash_witness(tree, cash_b[w[0]]),
    })

    # monotonicity: cash_a dominates cash_a - drop nodewise
    mono = np.maximum(pi_drop - pi_a, 0.0)
    add("M", mono, lambda w: {
        "node": tree.ids[w[1]],
        "cash": _cash_witness(tree, cash_a[w[0]]),
        "cash_lower": _cash_witness(tree, (cash_a - drop)[w[0]]),
    })

    # translation invariance for a constant added on the whole subtree
    trans = np.abs(pi_shift - pi_a - shift)
    add("TI", trans, lambda w: {
        "node": tree.ids[w[1]],
        "shift": float(shift[w[0], 0]),
        "cash": _cash_witness(tree, cash_a[w[0]]),
    })

    add("Z", np.abs(pi_zero)[None, :], lambda w: {"node": tree.ids[w[1]]})

    # pasting: exchanging the continuation after sigma for its valuation is
    # invisible at every node with no strict ancestor in sigma
    parent = tree.parent_index
    dc_res = np.zeros((trials, n))
    for t, sigma in enumerate(sigmas):
        members = np.zeros(n, dtype=bool)
        for node_id in sigma.graph:
            members[tree.node_index(node_id)] = True
        pasted = np.empty(n)
        active = np.full(n, -1, dtype=np.int64)
        valid = np.zeros(n, dtype=bool)
        for u in tree.preorder:
            p = parent[u]
            act = active[p] if p >= 0 else -1
            valid[u] = act < 0
            if members[u]:
                act = u
            active[u] = act
            pasted[u] = pi_a[t, act] if act >= 0 else cash_a[t, u]
        pi_pasted = family.node_values(pasted)
        dc_res[t, valid] = np.abs(pi_pasted - pi_a[t])[valid]
    add("DC", dc_res, lambda w: {
        "node": tree.ids[w[1]],
        "sigma": sorted(sigmas[w[0]].graph),
        "cash": _cash_witness(tree, cash_a[w[0]]),
    })

    # locality: perturbing the balance off a node's subtree leaves the
    # whole subtree's valuations untouched
    loc_res = np.zeros((trials, n))
    for t in range(trials):
        xi = int(local_nodes[t])
        sub = tree.descendant_indices(xi)
        perturbed = cash_a[t] + local_noise[t]
        perturbed[sub] = cash_a[t, sub]
        pi_pert = family.node_values(perturbed)
        loc_res[t, sub] = np.abs(pi_pert - pi_a[t])[sub]
    add("L", loc_res, lambda w: {
        "node": tree.ids[w[1]],
        "cash": _cash_witness(tree, cash_a[w[0]]),
    })

    # consistent localisation is the construction identity: valuations along
    # a stopping time dispatch to the node operators
    dispatch = value_at(family, sigmas[0], CashBalance(tree, cash_a[0]))
    cl_worst = max(abs(dispatch[z] - pi_a[0, tree.node_index(z)]) for z in dispatch)
    checks.append(AxiomCheck("CL", cl_worst <= tolerance, cl_worst, None))

    return AxiomReport(checks=checks, trials=trials, seed=seed, tolerance=tolerance)
