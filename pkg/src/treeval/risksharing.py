"""Optimal risk pooling across subsidiaries: the sup-convolution of their
valuations, its normalization, closed forms for exponential
certainty-equivalent subsidiaries, allocation recovery, the
gradient-proportionality stability certificate, and the axiom suite for the
pooled family.

Duals simply add under pooling, so the value is found by simplex descent on
the summed duals whenever every subsidiary has a smooth dual (the
exponential family does, in closed form).  Mixed or polyhedral subsidiaries
go through direct concave maximization over allocations instead, since their
summed dual takes the value +inf on most of the simplex.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dual import DEFAULT_OPTIONS, DualDensity, DualSolverOptions
from .errors import ValidationError
from .families import EntropicParams, entropic_family, entropic_params
from .optim import eg_minimize, maximize
from .tree import CashBalance, Tree
from .valuation import AxiomReport, ValuationFamily, check_axioms


def _common_tree(subs: Sequence) -> Tree:
    if len(subs) < 1:
        raise ValidationError("need at least one subsidiary")
    trees = []
    for sub in subs:
        if isinstance(sub, EntropicParams):
            trees.append(sub.tree)
        elif isinstance(sub, ValuationFamily) or hasattr(sub, "node_values"):
            trees.append(sub.tree)
        else:
            raise ValidationError(f"unsupported subsidiary type {type(sub).__name__}")
    first = trees[0]
    if any(t is not first for t in trees[1:]):
        raise ValidationError("subsidiaries must share one tree instance")
    return first


def _sub_node_value(sub, tree: Tree, xi: int, values: np.ndarray) -> np.ndarray:
    """Valuation of subsidiary `sub` at node xi for values (..., n)."""
    if isinstance(sub, EntropicParams):
        from .families import _entropic_node_value
        return _entropic_node_value(sub, xi, values)
    return sub.node_values(values)[..., xi]


def share_dual(duals: Sequence, lam) -> float:
    """Pooled dual: the pointwise sum of the subsidiaries' duals."""
    if not duals:
        raise ValidationError("need at least one dual function")
    return float(sum(fn(lam) for fn in duals))


@dataclass(frozen=True)
class EntropicSharePlan:
    """Closed-form aggregate of exponential-family subsidiaries at a node:
    pooled risk aversion, pooled reference density on the subtree, its
    normalizer, and the sure gain from pooling."""

    big_gamma: float
    density: dict[str, float]
    scale: float
    value_of_sharing: float


def entropic_share_params(subs: Sequence[EntropicParams], x: str) -> EntropicSharePlan:
    tree = _common_tree(subs)
    if not all(isinstance(s, EntropicParams) for s in subs):
        raise ValidationError("closed-form aggregation needs exponential-family subsidiaries")
    xi = tree.node_index(x)
    sub_idx = tree.descendant_indices(xi)
    big_gamma = 1.0 / sum(1.0 / s.gamma for s in subs)
    logits = np.zeros(len(sub_idx))
    for s in subs:
        tilde = s.reference[sub_idx] / s.subtree_reference[xi]
        logits += (big_gamma / s.gamma) * np.log(tilde)
    m = logits.max()
    log_total = m + np.log(np.exp(logits - m).sum())
    log_scale = -log_total
    density = np.exp(logits + log_scale)
    return EntropicSharePlan(
        big_gamma=big_gamma,
        density={tree.ids[i]: float(w) for i, w in zip(sub_idx, density)},
        scale=float(np.exp(log_scale)),
        value_of_sharing=float(log_scale / big_gamma),
    )


def entropic_sharing_family(subs: Sequence[EntropicParams]) -> ValuationFamily:
    """The normalized pooled family of exponential subsidiaries, which is
    itself an exponential family with the aggregated risk aversion and
    reference."""
    tree = _common_tree(subs)
    plan = entropic_share_params(subs, tree.root)
    reference = np.array([plan.density[node_id] for node_id in tree.ids])
    return entropic_family(entropic_params(tree, plan.big_gamma, reference))


def entropic_allocation(subs: Sequence[EntropicParams], x: str, balance: CashBalance) -> list[CashBalance]:
    """Closed-form optimal split of the cash balance on the subtree at x:
    a share of the cash proportional to the reciprocal risk aversion, a
    belief-disagreement transfer, and a share of the pooling gain.  Sums to
    the pooled balance exactly; zero off the subtree."""
    tree = _common_tree(subs)
    xi = tree.node_index(x)
    sub_idx = tree.descendant_indices(xi)
    plan = entropic_share_params(subs, x)
    p_pool = np.array([plan.density[tree.ids[i]] for i in sub_idx])
    k_sub = balance.values[sub_idx]
    out = []
    for s in subs:
        tilde = s.reference[sub_idx] / s.subtree_reference[xi]
        ratio = plan.big_gamma / s.gamma
        piece = ratio * k_sub + np.log(tilde / p_pool) / s.gamma + ratio * plan.value_of_sharing
        full = np.zeros(tree.n_nodes)
        full[sub_idx] = piece
        out.append(CashBalance(tree, full))
    return out


@dataclass
class SharingResult:
    value: float                 # pooled valuation of the balance
    normalized: float            # value minus the value of pooling zero
    value_of_sharing: float      # pooled valuation of the zero balance
    allocation: list[CashBalance]
    argmin_density: DualDensity | None
    achieved_value: float        # sum of subsidiary valuations at the allocation
    feasibility_gap: float       # sup-norm of (sum of allocations - balance) on the subtree
    method: str
    converged: bool


def _entropic_dual_model(sub: EntropicParams, tree: Tree, xi: int):
    sub_idx = tree.descendant_indices(xi)
    tilde = sub.reference[sub_idx] / sub.subtree_reference[xi]
    gamma = sub.gamma

    def value(lam: np.ndarray) -> float:
        pos = lam > 0
        return float(np.sum(lam[pos] * np.log(lam[pos] / tilde[pos])) / gamma)

    def grad(lam: np.ndarray) -> np.ndarray:
        return (np.log(lam / tilde) + 1.0) / gamma

    def argmax(lam: np.ndarray) -> np.ndarray:
        # inner maximizer of (valuation - pairing), fixed to mean zero
        base = -np.log(lam / tilde) / gamma
        return base

    return value, grad, argmax


def _share_dual_route(subs, tree, xi, k_sub, opts) -> tuple[float, np.ndarray, list[np.ndarray], bool]:
    models = [_entropic_dual_model(s, tree, xi) for s in subs]

    def grad(lam):
        return k_sub + sum(m[1](lam) for m in models)

    def value(lam):
        return float(lam @ k_sub) + sum(m[0](lam) for m in models)

    res = eg_minimize(grad, k_sub.size, value_fn=value,
                      step_constant=opts.step_constant,
                      tolerance=opts.tolerance,
                      max_iterations=opts.max_iterations)
    lam = res.weights
    bases = [m[2](lam) for m in models]
    residual = k_sub - sum(bases)
    weights = np.array([1.0 / s.gamma for s in subs])
    weights /= weights.sum()
    pieces = [base + w * residual for base, w in zip(bases, weights)]
    return res.value, lam, pieces, res.converged


def _is_smooth(sub) -> bool:
    if isinstance(sub, EntropicParams):
        return True
    return bool(getattr(sub, "dual_smooth", True))


def _share_direct_route(subs, tree, xi, k_sub, opts) -> tuple[float, np.ndarray | None, list[np.ndarray], bool]:
    n_sub = k_sub.size
    j = len(subs)
    sub_idx = tree.descendant_indices(xi)

    def split(batch: np.ndarray) -> list[np.ndarray]:
        pieces = [batch[:, i * n_sub:(i + 1) * n_sub] for i in range(j - 1)]
        pieces.append(k_sub[None, :] - sum(pieces) if pieces else k_sub[None, :] + np.zeros_like(batch[:, :n_sub]))
        return pieces

    def objective(batch: np.ndarray) -> np.ndarray:
        total = np.zeros(batch.shape[0])
        for sub, piece in zip(subs, split(batch)):
            full = np.zeros((batch.shape[0], tree.n_nodes))
            full[:, sub_idx] = piece
            total += _sub_node_value(sub, tree, xi, full)
        return total

    if j == 1:
        full = np.zeros((1, tree.n_nodes))
        full[0, sub_idx] = k_sub
        value = float(_sub_node_value(subs[0], tree, xi, full)[0])
        return value, None, [k_sub.copy()], True

    x0 = np.tile(k_sub / j, j - 1)
    if all(_is_smooth(s) for s in subs):
        res = maximize(objective, x0,
                       gradient_tolerance=opts.gradient_tolerance,
                       max_iterations=min(opts.max_iterations, 20_000),
                       divergence_bound=opts.divergence_bound,
                       fd_step=opts.fd_step,
                       value_tolerance=1e-12)
        theta, value, converged = res.x, res.value, res.converged
    else:
        # piecewise-linear subsidiaries put kinks where steepest ascent
        # stalls off-optimum; restarted simplex search (re-inflating the
        # simplex at the previous endpoint) is reliable at this dimension
        from scipy.optimize import minimize as _scipy_minimize

        theta, value, converged = x0, -np.inf, False
        for _ in range(3):
            res = _scipy_minimize(lambda v: -float(objective(v[None, :])[0]), theta,
                                  method="Nelder-Mead",
                                  options={"xatol": 1e-10, "fatol": 1e-12,
                                           "maxiter": 2000 * x0.size, "maxfev": 2000 * x0.size})
            theta, converged = res.x, bool(res.success)
            if -float(res.fun) <= value + 1e-13 * (1.0 + abs(value)):
                value = max(value, -float(res.fun))
                break
            value = -float(res.fun)
    pieces = [p[0] for p in split(theta[None, :])]
    return value, None, pieces, converged


def share_value(subs: Sequence, x: str, balance: CashBalance,
                opts: DualSolverOptions | None = None, *, method: str = "auto") -> SharingResult:
    """Best pooled valuation of the balance at a node over all splits among
    the subsidiaries, with the achieving allocation.

    ``method='dual'`` runs simplex descent on the summed duals (exponential
    subsidiaries only) and recovers the allocation from the inner
    maximizers; ``method='direct'`` maximizes the summed valuations over
    allocations.  ``'auto'`` picks the dual route when available.  The
    allocation always sums to the balance exactly on the subtree; the value
    achieved by it is reported for verification.
    """
    opts = opts or DEFAULT_OPTIONS
    tree = _common_tree(subs)
    xi = tree.node_index(x)
    sub_idx = tree.descendant_indices(xi)
    k_sub = balance.values[sub_idx]
    all_entropic = all(isinstance(s, EntropicParams) for s in subs)
    if method == "auto":
        method = "dual" if all_entropic and len(subs) > 1 else "direct"
    if method == "dual" and not all_entropic:
        raise ValidationError("the dual route needs exponential-family subsidiaries; use method='direct'")

    def run(values_sub: np.ndarray):
        if method == "dual":
            return _share_dual_route(subs, tree, xi, values_sub, opts)
        return _share_direct_route(subs, tree, xi, values_sub, opts)

    value, lam, pieces, converged = run(k_sub)
    value0, _, _, converged0 = run(np.zeros_like(k_sub))

    allocation = []
    achieved = 0.0
    for sub, piece in zip(subs, pieces):
        full = np.zeros(tree.n_nodes)
        full[sub_idx] = piece
        allocation.append(CashBalance(tree, full))
        achieved += float(_sub_node_value(sub, tree, xi, full[None, :])[0])
    feasibility = float(np.max(np.abs(sum(p for p in pieces) - k_sub)))

    density = None
    if lam is not None:
        density = DualDensity(support=x, values={
            tree.ids[i]: float(w) for i, w in zip(sub_idx, lam)})
    return SharingResult(
        value=float(value),
        normalized=float(value - value0),
        value_of_sharing=float(value0),
        allocation=allocation,
        argmin_density=density,
        achieved_value=achieved,
        feasibility_gap=feasibility,
        method=method,
        converged=converged and converged0,
    )


def _sub_gradient(sub, tree: Tree, xi: int, full_values: np.ndarray, opts) -> np.ndarray:
    """Gradient of the subsidiary's node-xi valuation in the subtree
    coordinates; closed form for exponential subsidiaries, central
    differences otherwise."""
    sub_idx = tree.descendant_indices(xi)
    if isinstance(sub, EntropicParams):
        expo = np.log(sub.reference[sub_idx]) - sub.gamma * full_values[sub_idx]
        expo -= expo.max()
        w = np.exp(expo)
        return w / w.sum()
    base = full_values.copy()

    def f(batch):
        rows = np.repeat(base[None, :], batch.shape[0], axis=0)
        rows[:, sub_idx] = batch
        return sub.node_values(rows)[:, xi]

    from .optim import fd_gradient
    return fd_gradient(f, base[sub_idx], opts.fd_step)


def stability_check(subs: Sequence, allocation: Sequence[CashBalance], x: str,
                    opts: DualSolverOptions | None = None, *,
                    shadow: np.ndarray | None = None) -> float:
    """Sup-norm defect of gradient proportionality at a node: every
    subsidiary's marginal valuation of its allocated balance must be a
    scalar multiple of the root shadow density, or some pair could still
    trade profitably there.  Small residuals certify that the time-0
    allocation stays optimal at the node."""
    opts = opts or DEFAULT_OPTIONS
    tree = _common_tree(subs)
    if len(allocation) != len(subs):
        raise ValidationError("one allocated balance per subsidiary")
    xi = tree.node_index(x)
    sub_idx = tree.descendant_indices(xi)
    if shadow is None:
        root_grad = _sub_gradient(subs[0], tree, tree.root_index, allocation[0].values, opts)
        full = np.zeros(tree.n_nodes)
        full[tree.descendant_indices(tree.root_index)] = root_grad
        shadow = full[sub_idx]
    else:
        shadow = np.asarray(shadow, dtype=float)[sub_idx] if shadow.size == tree.n_nodes else np.asarray(shadow, dtype=float)
    denom = float(shadow @ shadow)
    if denom <= 0:
        raise ValidationError("shadow density vanishes on the subtree")
    worst = 0.0
    for sub, piece in zip(subs, allocation):
        g = _sub_gradient(sub, tree, xi, piece.values, opts)
        b = float(g @ shadow) / denom
        worst = max(worst, float(np.max(np.abs(g - b * shadow))))
    return worst


class SharingFamily:
    """Normalized pooled valuations evaluated node-by-node through the
    direct sup-convolution route; the slow but fully general path."""

    def __init__(self, subs: Sequence, opts: DualSolverOptions | None = None):
        self.tree = _common_tree(subs)
        self.subs = list(subs)
        self.opts = opts or DualSolverOptions(gradient_tolerance=1e-7)
        self._zero_value = {}
        for xi in range(self.tree.n_nodes):
            if self.tree.is_leaf[xi]:
                continue
            k = np.zeros(len(self.tree.descendant_indices(xi)))
            v, _, _, _ = _share_direct_route(self.subs, self.tree, xi, k, self.opts)
            self._zero_value[xi] = v

    def node_values(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        flat = values.reshape(-1, self.tree.n_nodes)
        out = np.empty_like(flat)
        for xi in range(self.tree.n_nodes):
            sub_idx = self.tree.descendant_indices(xi)
            if self.tree.is_leaf[xi]:
                out[:, xi] = flat[:, xi]
                continue
            for row in range(flat.shape[0]):
                v, _, _, _ = _share_direct_route(self.subs, self.tree, xi, flat[row, sub_idx], self.opts)
                out[row, xi] = v - self._zero_value[xi]
        return out.reshape(values.shape)


class CommittedFamily:
    """Valuations re-based at a prior commitment: value of (balance +
    commitment) minus value of the commitment.  Satisfies the same axioms as
    the underlying family."""

    def __init__(self, family, commitment: CashBalance):
        if commitment.tree is not family.tree:
            raise ValidationError("commitment built on a different tree")
        self.tree = family.tree
        self._family = family
        self._commitment = commitment.values
        self._base = family.node_values(commitment.values)
        self.descriptor = f"committed({getattr(family, 'descriptor', 'custom')})"

    def node_values(self, values: np.ndarray) -> np.ndarray:
        return self._family.node_values(np.asarray(values, dtype=float) + self._commitment) - self._base


def committed_family(family, commitment: CashBalance) -> CommittedFamily:
    return CommittedFamily(family, commitment)


def check_sharing_axioms(subs: Sequence, trials: int, seed: int, *,
                         tolerance: float | None = None,
                         opts: DualSolverOptions | None = None,
                         cash_range: tuple[float, float] = (-5.0, 5.0)) -> AxiomReport:
    """Axiom suite for the normalized pooled family: the closed-form
    aggregate for exponential subsidiaries, the node-by-node numeric path
    otherwise (smaller default tolerance reflects the nested optimization)."""
    if all(isinstance(s, EntropicParams) for s in subs):
        family = entropic_sharing_family(subs)
        tol = 1e-8 if tolerance is None else tolerance
    else:
        family = SharingFamily(subs, opts)
        tol = 1e-5 if tolerance is None else tolerance
    return check_axioms(family, trials, seed, tolerance=tol, cash_range=cash_range)
