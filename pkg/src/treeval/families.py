"""Concrete valuation families: exponential certainty equivalents with a
relative-entropy dual, worst-case stop-or-continue operators, and
utility-indifference one-step valuations (with the CRRA dual closed form,
the pasting counterexample on the two-period trinomial lattice, and the
translation-invariance witness that singles out exponential utility).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, ValidationError
from .tree import CashBalance, NodeRecord, Tree, build_tree
from .valuation import OneStepValuation, ValuationFamily

_PROB_TOL = 1e-9


def _stack_outcomes(k_x, k_children) -> np.ndarray:
    """Join own cash and child values along the last axis, broadcasting a
    leading batch axis if present."""
    k_x = np.asarray(k_x, dtype=float)
    k_children = np.asarray(k_children, dtype=float)
    return np.concatenate([k_x[..., None], k_children], axis=-1)


def _logsumexp(a: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _density_items(lam) -> Mapping[str, float]:
    if isinstance(lam, Mapping):
        return lam
    values = getattr(lam, "values", None)
    if isinstance(values, Mapping):
        return values
    raise ValidationError(f"expected a density mapping, got {type(lam).__name__}")


# ---------------------------------------------------------------------------
# utilities


@dataclass(frozen=True)
class ExponentialUtility:
    """u(w) = -exp(-gamma w), defined on the whole line."""

    gamma: float = 1.0

    def __post_init__(self):
        if not (self.gamma > 0 and np.isfinite(self.gamma)):
            raise ValidationError("exponential utility needs gamma > 0")

    def value(self, w):
        return -np.exp(-self.gamma * np.asarray(w, dtype=float))

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        if np.any(v >= 0):
            raise DomainError("exponential utility takes values in (-inf, 0)")
        return -np.log(-v) / self.gamma


@dataclass(frozen=True)
class CRRAUtility:
    """u(w) = w^(1-R) / (1-R) for wealth w > 0, with R > 0 and R != 1."""

    R: float

    def __post_init__(self):
        if not (self.R > 0 and np.isfinite(self.R)) or self.R == 1.0:
            raise ValidationError("CRRA exponent must be positive and != 1 (log utility unsupported)")

    def value(self, w):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0):
            raise DomainError("CRRA utility needs strictly positive wealth")
        return w ** (1.0 - self.R) / (1.0 - self.R)

    def inverse(self, v):
        v = np.asarray(v, dtype=float)
        scaled = (1.0 - self.R) * v
        if np.any(scaled <= 0):
            raise DomainError("value outside the range of the CRRA utility")
        return scaled ** (1.0 / (1.0 - self.R))


# ---------------------------------------------------------------------------
# entropic family


@dataclass(frozen=True)
class EntropicParams:
    """Exponential certainty-equivalent family: risk aversion gamma and a
    strictly positive reference distribution over all tree nodes."""

    tree: Tree
    gamma: float
    reference: np.ndarray
    subtree_reference: np.ndarray

    def node_reference(self, node_id: str) -> float:
        return float(self.reference[self.tree.node_index(node_id)])


def entropic_params(tree: Tree, gamma: float, reference=None) -> EntropicParams:
    if not (gamma > 0 and np.isfinite(gamma)):
        raise ValidationError("gamma must be a positive real")
    if reference is None:
        if tree.weights is None:
            raise ValidationError("tree carries no weights; pass an explicit reference")
        ref = np.array(tree.weights, dtype=float)
    elif isinstance(reference, Mapping):
        missing = set(tree.ids) - set(reference)
        if missing:
            raise ValidationError(f"reference missing nodes: {sorted(missing)}")
        ref = np.array([float(reference[node_id]) for node_id in tree.ids])
    else:
        ref = np.array(reference, dtype=float)
        if ref.shape != (tree.n_nodes,):
            raise ValidationError("reference must give one mass per node")
    if np.any(ref <= 0):
        raise ValidationError("reference distribution must be strictly positive on every node")
    if abs(ref.sum() - 1.0) > _PROB_TOL:
        raise ValidationError(f"reference must sum to 1 over the tree (got {ref.sum()!r})")
    bar = ref.copy()
    for u in tree.preorder[::-1]:
        p = tree.parent_index[u]
        if p >= 0:
            bar[p] += bar[u]
    ref.flags.writeable = False
    bar.flags.writeable = False
    return EntropicParams(tree=tree, gamma=float(gamma), reference=ref, subtree_reference=bar)


def _entropic_node_value(params: EntropicParams, xi: int, values: np.ndarray) -> np.ndarray:
    """Closed form at node index xi for cash values of shape (..., n)."""
    tree = params.tree
    sub = tree.descendant_indices(xi)
    log_ref = np.log(params.reference[sub] / params.subtree_reference[xi])
    a = log_ref - params.gamma * np.asarray(values, dtype=float)[..., sub]
    return -_logsumexp(a, axis=-1) / params.gamma


def entropic_value(params: EntropicParams, x: str, balance: CashBalance) -> float:
    """-(1/gamma) log sum_{y in subtree} (p_y / pbar_x) exp(-gamma K_y),
    evaluated with max-subtracted exponents."""
    return float(_entropic_node_value(params, params.tree.node_index(x), balance.values))


def _density_vector(params_tree: Tree, xi: int, lam) -> np.ndarray:
    """Validated probability vector over the subtree at xi, in subtree order."""
    items = _density_items(lam)
    tree = params_tree
    sub = tree.descendant_indices(xi)
    allowed = {int(i) for i in sub}
    vec = np.zeros(len(sub))
    pos = {int(i): k for k, i in enumerate(sub)}
    for node_id, v in items.items():
        i = tree.node_index(node_id)
        v = float(v)
        if v < 0:
            raise DomainError(f"density has a negative mass at {node_id!r}")
        if i not in allowed:
            if v > 0:
                raise DomainError(f"density puts mass on {node_id!r}, outside the subtree")
            continue
        vec[pos[i]] = v
    if abs(vec.sum() - 1.0) > _PROB_TOL:
        raise DomainError(f"density must sum to 1 on the subtree (got {vec.sum()!r})")
    return vec


def entropic_dual(params: EntropicParams, x: str, lam) -> float:
    """Relative entropy of the density against the renormalized reference on
    the subtree, divided by gamma; zero masses contribute zero."""
    tree = params.tree
    xi = tree.node_index(x)
    vec = _density_vector(tree, xi, lam)
    sub = tree.descendant_indices(xi)
    ref = params.reference[sub] / params.subtree_reference[xi]
    pos = vec > 0
    return float(np.sum(vec[pos] * np.log(vec[pos] / ref[pos])) / params.gamma)


def entropic_one_step(params: EntropicParams, x: str) -> OneStepValuation:
    """One-step exponential certainty equivalent splitting the subtree mass
    as (own weight, child subtree weights); assembling these reproduces the
    closed-form node values."""
    tree = params.tree
    xi = tree.node_index(x)
    kids = tree.children_index[xi]
    if not kids:
        raise ValidationError(f"{x!r} is a leaf; one-step operators live on internal nodes")
    gamma = params.gamma
    w = np.concatenate([[params.reference[xi]], params.subtree_reference[list(kids)]])
    w = w / params.subtree_reference[xi]
    log_w = np.log(w)

    def evaluate(k_x, k_children):
        a = log_w - gamma * _stack_outcomes(k_x, k_children)
        return -_logsumexp(a, axis=-1) / gamma

    def one_step_dual(theta, psi):
        q = np.concatenate([[float(theta)], np.asarray(psi, dtype=float)])
        if np.any(q < 0) or abs(q.sum() - 1.0) > _PROB_TOL:
            raise DomainError("one-step dual argument must be a probability over (node, children)")
        pos = q > 0
        return float(np.sum(q[pos] * np.log(q[pos] / w[pos])) / gamma)

    return OneStepValuation(evaluate, descriptor=f"entropic(gamma={gamma})", dual=one_step_dual)


def entropic_family(params: EntropicParams) -> ValuationFamily:
    one_steps = {params.tree.ids[i]: entropic_one_step(params, params.tree.ids[i])
                 for i in params.tree.internal_indices()}
    return ValuationFamily(
        params.tree, one_steps,
        descriptor=f"entropic(gamma={params.gamma})",
        dual_closed=lambda x, lam: entropic_dual(params, x, lam),
    )


# ---------------------------------------------------------------------------
# worst-case / optimal stopping family


@dataclass(frozen=True)
class WorstCaseParams:
    """Per-node finite sets of child distributions, with an optional stop
    branch that locks in the node's own cash."""

    tree: Tree
    alphas: Mapping[str, tuple]
    stopping: bool = True


def worst_case_params(tree: Tree, alphas: Mapping[str, Sequence[Sequence[float]]],
                      stopping: bool = True) -> WorstCaseParams:
    cleaned: dict[str, tuple] = {}
    for i in tree.internal_indices():
        node_id = tree.ids[i]
        if node_id not in alphas:
            raise ValidationError(f"missing child distributions for node {node_id!r}")
        mats = []
        for a in alphas[node_id]:
            v = np.asarray(a, dtype=float)
            if v.shape != (len(tree.children_index[i]),):
                raise ValidationError(f"distribution at {node_id!r} has wrong length")
            if np.any(v < 0) or abs(v.sum() - 1.0) > _PROB_TOL:
                raise ValidationError(f"distribution at {node_id!r} is not a probability vector")
            v.flags.writeable = False
            mats.append(v)
        if not mats:
            raise ValidationError(f"need at least one distribution at {node_id!r}")
        cleaned[node_id] = tuple(mats)
    return WorstCaseParams(tree=tree, alphas=cleaned, stopping=stopping)


def worst_case_one_step(params: WorstCaseParams, x: str) -> OneStepValuation:
    """Minimum over the stop value (when stopping is enabled) and every
    child expectation; ties resolve to the first candidate in input order."""
    mats = np.stack(params.alphas[x])
    stopping = params.stopping

    def evaluate(k_x, k_children):
        cand = np.asarray(k_children, dtype=float) @ mats.T
        worst = cand.min(axis=-1)
        if stopping:
            worst = np.minimum(np.asarray(k_x, dtype=float), worst)
        return worst

    tag = "worst_stopping" if stopping else "worst_case"
    return OneStepValuation(evaluate, descriptor=f"{tag}(m={len(params.alphas[x])})", smooth=False)


def worst_case_family(params: WorstCaseParams) -> ValuationFamily:
    one_steps = {params.tree.ids[i]: worst_case_one_step(params, params.tree.ids[i])
                 for i in params.tree.internal_indices()}
    tag = "worst_stopping" if params.stopping else "worst_case"
    return ValuationFamily(params.tree, one_steps, descriptor=tag, dual_smooth=False)


# ---------------------------------------------------------------------------
# utility-indifference family


def indifference_price(utility, x0: float, probs, outcomes) -> np.ndarray:
    """The sure payment making the agent indifferent to the outcome vector:
    the b solving  u(x0) = sum_y p_y u(x0 + k_y - b).

    Solved by bisection to 1e-12 on [min k, max k], intersected for
    bounded-wealth utilities with the wealth wall b < x0 + min k (the root
    always lies between the extreme outcomes, and for R > 1 the utility side
    drops to -inf at the wall, so a root always exists there; for R < 1 a
    root can fail to exist and that raises a domain error naming the
    outcomes).  The price is monotone in each outcome and shifts one-for-one
    with constants.  Broadcasts over a leading batch axis of ``outcomes``.
    """
    p = np.asarray(probs, dtype=float)
    if np.any(p <= 0) or abs(p.sum() - 1.0) > _PROB_TOL:
        raise ValidationError("outcome probabilities must be strictly positive and sum to 1")
    k = np.asarray(outcomes, dtype=float)
    if k.shape[-1] != p.shape[0]:
        raise ValidationError("outcomes and probabilities differ in length")
    lo = np.array(k.min(axis=-1), dtype=float)
    hi = np.array(k.max(axis=-1), dtype=float)
    target = float(utility.value(x0))
    crra = isinstance(utility, CRRAUtility)
    if crra:
        hi = np.minimum(hi, x0 + lo)
        if utility.R < 1.0:
            # u(0+) = 0 here, so the utility side stays bounded at the wall
            # and indifference can be unachievable with nonnegative wealth
            wall_wealth = k - lo[..., None]
            g_wall = np.sum(p * np.where(wall_wealth > 0,
                                         utility.value(np.maximum(wall_wealth, 1e-300)), 0.0),
                            axis=-1)
            if np.any(g_wall > target):
                flat = k.reshape(-1, k.shape[-1])
                bad = flat[int(np.argmax(np.asarray(g_wall > target).reshape(-1)))]
                raise DomainError(
                    f"no indifference price with positive wealth at x0={x0}: {bad.tolist()}")

    for _ in range(220):
        if np.all(hi - lo <= 1e-12):
            break
        mid = 0.5 * (lo + hi)
        wealth = x0 + k - mid[..., None]
        if crra:
            valid = np.all(wealth > 0, axis=-1)
            g = np.where(valid,
                         np.sum(p * utility.value(np.where(wealth > 0, wealth, 1.0)), axis=-1),
                         -np.inf)
        else:
            g = np.sum(p * utility.value(wealth), axis=-1)
        go_up = g >= target
        lo = np.where(go_up, mid, lo)
        hi = np.where(go_up, hi, mid)
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class UIParams:
    """Single-period indifference pricing at each node: utility, reference
    wealth, and strictly positive outcome probabilities over the node and
    its children."""

    tree: Tree
    utility: object
    x0: float
    probs: Mapping[str, np.ndarray]


def ui_params(tree: Tree, utility, x0: float, probs: Mapping[str, Sequence[float]] | None = None) -> UIParams:
    if not np.isfinite(x0):
        raise ValidationError("reference wealth must be finite")
    if isinstance(utility, CRRAUtility) and x0 <= 0:
        raise ValidationError("reference wealth must lie in the CRRA domain (x0 > 0)")
    table: dict[str, np.ndarray] = {}
    for i in tree.internal_indices():
        node_id = tree.ids[i]
        m = len(tree.children_index[i]) + 1
        if probs is None:
            if tree.weights is None:
                raise ValidationError("tree carries no weights; pass explicit outcome probabilities")
            kids = list(tree.children_index[i])
            vec = np.concatenate([[tree.weights[i]], tree.subtree_weight[kids]])
            vec = vec / tree.subtree_weight[i]
        else:
            if node_id not in probs:
                raise ValidationError(f"missing outcome probabilities for node {node_id!r}")
            vec = np.asarray(probs[node_id], dtype=float)
        if vec.shape != (m,):
            raise ValidationError(f"outcome probabilities at {node_id!r} must cover the node and its children")
        if np.any(vec <= 0) or abs(vec.sum() - 1.0) > _PROB_TOL:
            raise ValidationError(f"outcome probabilities at {node_id!r} must be strictly positive and sum to 1")
        vec.flags.writeable = False
        table[node_id] = vec
    return UIParams(tree=tree, utility=utility, x0=float(x0), probs=table)


def ui_one_step(params: UIParams, x: str) -> OneStepValuation:
    """Indifference price of the (node, children) outcome vector.  Exactly
    translation invariant and monotone by construction; concave for concave
    utilities."""
    p = params.probs[x]
    utility = params.utility
    x0 = params.x0

    def evaluate(k_x, k_children):
        return indifference_price(utility, x0, p, _stack_outcomes(k_x, k_children))

    dual = None
    if isinstance(utility, CRRAUtility):
        R = utility.R

        def dual(theta, psi, _p=p, _R=R, _x0=x0):
            q = np.concatenate([[float(theta)], np.asarray(psi, dtype=float)])
            return crra_one_period_dual(_R, _x0, _p, q)

    elif isinstance(utility, ExponentialUtility):
        g = utility.gamma

        def dual(theta, psi, _p=p, _g=g):
            q = np.concatenate([[float(theta)], np.asarray(psi, dtype=float)])
            if np.any(q < 0) or abs(q.sum() - 1.0) > _PROB_TOL:
                raise DomainError("one-step dual argument must be a probability")
            pos = q > 0
            return float(np.sum(q[pos] * np.log(q[pos] / _p[pos])) / _g)

    return OneStepValuation(evaluate, descriptor=f"ui({type(utility).__name__}, x0={x0})", dual=dual)


def ui_family(params: UIParams) -> ValuationFamily:
    one_steps = {params.tree.ids[i]: ui_one_step(params, params.tree.ids[i])
                 for i in params.tree.internal_indices()}
    return ValuationFamily(params.tree, one_steps,
                           descriptor=f"ui({type(params.utility).__name__})")


def crra_one_period_dual(R: float, x0: float, probs, lam) -> float:
    """Closed-form conjugate of the CRRA indifference price:
    x0 (1 - S^(R/(R-1))) with S = sum_y p_y^(1/R) lam_y^(1-1/R).

    Requires a strictly positive probability vector; R = 1 is unsupported.
    """
    if R == 1.0:
        raise ValidationError("R = 1 (log utility) has no supported closed form")
    p = np.asarray(probs, dtype=float)
    q = np.asarray(lam, dtype=float)
    if q.shape != p.shape:
        raise ValidationError("density and probabilities differ in length")
    if np.any(q <= 0) or abs(q.sum() - 1.0) > _PROB_TOL:
        raise DomainError("density must be strictly positive and sum to 1")
    s = float(np.sum(p ** (1.0 / R) * q ** (1.0 - 1.0 / R)))
    return x0 * (1.0 - s ** (R / (R - 1.0)))


def crra_ui_dual(params: UIParams, x: str, lam) -> float:
    """One-period dual of the CRRA indifference valuation at a node, with the
    density ordered as (node, children)."""
    if not isinstance(params.utility, CRRAUtility):
        raise ValidationError("closed-form dual available for CRRA utilities only")
    return crra_one_period_dual(params.utility.R, params.x0, params.probs[x], lam)


# ---------------------------------------------------------------------------
# counterexamples and witnesses


def _equal_probability_trinomial() -> Tree:
    """Two-period ternary lattice whose nine leaves are equally likely; the
    indifference-price computations put no mass on interior nodes."""
    records = [NodeRecord("r", None)]
    for a in "abc":
        records.append(NodeRecord(a, "r"))
        for b in "abc":
            records.append(NodeRecord(a + b, a))
    return build_tree(records)


@dataclass
class PastingCounterexample:
    found: bool
    gap: float
    claim: dict[str, float] | None
    matched_claim: dict[str, float] | None
    time1_prices: tuple[float, float, float] | None
    time0_prices: tuple[float, float] | None
    samples_used: int


def ui_dc_counterexample(R: float, x0: float, *, budget: int = 10_000, seed: int = 0,
                         utility=None, scale: float | None = None) -> PastingCounterexample:
    """Search for two terminal claims on the equal-probability trinomial
    lattice with identical time-1 indifference prices but different time-0
    prices.

    Candidates are seeded random draws processed in batches; the partner
    claim keeps two fresh outcomes per time-1 node and solves the third by a
    one-dimensional inversion so the time-1 prices match exactly, and a local
    refinement pass perturbs the best pair found.  With exponential utility
    the time-0 gap collapses to solver noise, which is the control case.
    """
    _equal_probability_trinomial()  # the lattice the claims live on; validation only
    u = utility if utility is not None else CRRAUtility(R)
    if scale is None:
        scale = 0.45 * x0 if isinstance(u, CRRAUtility) else 1.0
    rng = np.random.default_rng(seed)
    leaf_ids = [a + b for a in "abc" for b in "abc"]
    p3 = np.full(3, 1.0 / 3.0)
    p9 = np.full(9, 1.0 / 9.0)
    u_x0 = float(u.value(x0))
    crra = isinstance(u, CRRAUtility)

    def time1_prices(y: np.ndarray) -> np.ndarray:
        # (B, 9) -> (B, 3)
        return indifference_price(u, x0, p3, y.reshape(-1, 3, 3)).reshape(y.shape[0], 3)

    def match_claims(y: np.ndarray, b1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Partner claims with the same time-1 prices, plus a validity mask."""
        fresh = rng.uniform(-scale, scale, (y.shape[0], 3, 2))
        rhs = 3.0 * u_x0 - u.value(x0 + fresh - b1[:, :, None]).sum(axis=-1)
        if crra:
            ok3 = (1.0 - u.R) * rhs > 0
        else:
            ok3 = rhs < 0
        safe = np.where(ok3, rhs, u_x0)
        third = np.asarray(u.inverse(safe)) - x0 + b1
        other = np.concatenate([fresh, third[:, :, None]], axis=-1).reshape(y.shape[0], 9)
        ok = ok3.all(axis=-1)
        if crra:
            ok &= x0 + other.min(axis=-1) - other.max(axis=-1) > 1e-9
        return other, ok

    best_gap = -np.inf
    best: tuple[np.ndarray, np.ndarray] | None = None
    samples = 0
    refine_budget = max(budget // 10, 1)
    main_budget = budget - refine_budget
    batch = 256

    def consider(y: np.ndarray) -> None:
        nonlocal best_gap, best
        other, ok = match_claims(y, time1_prices(y))
        if not ok.any():
            return
        other = np.where(ok[:, None], other, y)  # keep rejected rows domain-safe
        gaps = np.where(
            ok,
            np.abs(indifference_price(u, x0, p9, y) - indifference_price(u, x0, p9, other)),
            -np.inf,
        )
        i = int(np.argmax(gaps))
        if gaps[i] > best_gap:
            best_gap = float(gaps[i])
            best = (y[i].copy(), other[i].copy())

    while samples < main_budget:
        take = min(batch, main_budget - samples)
        consider(rng.uniform(-scale, scale, (take, 9)))
        samples += take
    while samples < budget and best is not None:
        take = min(batch, budget - samples)
        radius = scale * 0.5 ** (1 + 4 * (samples - main_budget) / refine_budget)
        y = np.clip(best[0] + rng.uniform(-radius, radius, (take, 9)), -scale, scale)
        consider(y)
        samples += take

    if best is None:
        return PastingCounterexample(False, 0.0, None, None, None, None, samples)
    y, other = best
    b1 = time1_prices(y[None, :])[0]
    t0 = (float(indifference_price(u, x0, p9, y)), float(indifference_price(u, x0, p9, other)))
    return PastingCounterexample(
        found=True,
        gap=best_gap,
        claim=dict(zip(leaf_ids, map(float, y))),
        matched_claim=dict(zip(leaf_ids, map(float, other))),
        time1_prices=tuple(map(float, b1)),
        time0_prices=t0,
        samples_used=samples,
    )


def exponential_uniqueness_witness(utility, *, trials: int = 200, seed: int = 0) -> float:
    """Largest translation-invariance defect of the certainty-equivalent
    recipe  u(pi(K)) = sum_y p_y u(K_y)  over sampled positive cash vectors
    and shifts.  Exponential utility gives an exact zero; any CRRA utility
    leaves a strictly positive defect because its marginal-utility ratios
    depend on the wealth level.
    """
    p = np.array([0.2, 0.4, 0.4])
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        k = rng.uniform(1.0, 3.0, 3)
        a = float(rng.uniform(0.5, 1.5))
        pi_k = float(utility.inverse(np.sum(p * utility.value(k))))
        pi_shifted = float(utility.inverse(np.sum(p * utility.value(k + a))))
        worst = max(worst, abs(pi_shifted - pi_k - a))
    return worst
