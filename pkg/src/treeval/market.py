"""Market access: self-financing trading gains on the tree, optimal hedging
of a cash balance against the market, the axiom suite for the hedged
valuations, and state-price-density extraction from one-step linear pricing
weights.

Gains are realized concretely as linear trading gains: a strategy holds a
position vector over the edges leaving each internal node, prices are
adapted, interest is zero, and positions are unconstrained reals.  The
convexity, localization and stop-restart properties of the gains sets are
then exact linear-algebra identities, verified by ``check_gains_axioms``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dual import DEFAULT_OPTIONS, DualSolverOptions
from .errors import DivergenceError, ValidationError
from .optim import maximize
from .tree import CashBalance, Tree
from .valuation import AxiomReport, check_axioms


@dataclass(frozen=True)
class Market:
    """Adapted asset price processes on a tree."""

    tree: Tree
    asset_names: tuple[str, ...]
    prices: np.ndarray  # (n_assets, n_nodes)


def market(tree: Tree, assets: Mapping[str, Mapping[str, float]]) -> Market:
    """Validated market: every asset priced on every node."""
    if not assets:
        raise ValidationError("need at least one asset")
    names = tuple(assets)
    table = np.empty((len(names), tree.n_nodes))
    for row, name in enumerate(names):
        series = assets[name]
        missing = set(tree.ids) - set(series)
        if missing:
            raise ValidationError(f"asset {name!r} missing prices at: {sorted(missing)}")
        unknown = set(series) - set(tree.ids)
        if unknown:
            raise ValidationError(f"asset {name!r} prices unknown nodes: {sorted(unknown)}")
        table[row] = [float(series[node_id]) for node_id in tree.ids]
    if not np.all(np.isfinite(table)):
        raise ValidationError("asset prices must be finite")
    table.flags.writeable = False
    return Market(tree=tree, asset_names=names, prices=table)


@dataclass(frozen=True)
class Strategy:
    """Position vector per internal node, held over the edges leaving it."""

    holdings: Mapping[str, np.ndarray]


def _decision_nodes(tree: Tree, xi: int) -> list[int]:
    return [int(i) for i in tree.descendant_indices(xi) if not tree.is_leaf[i]]


def _gains_matrix(mkt: Market, xi: int) -> tuple[np.ndarray, list[int]]:
    """Linear map from stacked positions (node-major, asset-minor) to the
    cumulative gains process; zero off the subtree."""
    tree = mkt.tree
    decisions = _decision_nodes(tree, xi)
    col = {u: k for k, u in enumerate(decisions)}
    n_assets = len(mkt.asset_names)
    mat = np.zeros((tree.n_nodes, len(decisions) * n_assets))
    for u in tree.descendant_indices(xi):
        if tree.is_leaf[u]:
            continue
        base = col[int(u)] * n_assets
        for c in tree.children_index[u]:
            mat[c] = mat[u]
            mat[c, base:base + n_assets] += mkt.prices[:, c] - mkt.prices[:, u]
    return mat, decisions


def _strategy_vector(mkt: Market, xi: int, strategy: Strategy) -> tuple[np.ndarray, list[int]]:
    tree = mkt.tree
    decisions = _decision_nodes(tree, xi)
    n_assets = len(mkt.asset_names)
    theta = np.zeros(len(decisions) * n_assets)
    seen = set()
    for node_id, pos in strategy.holdings.items():
        i = tree.node_index(node_id)
        if i not in decisions:
            continue
        v = np.asarray(pos, dtype=float)
        if v.shape != (n_assets,):
            raise ValidationError(f"holding at {node_id!r} must give one position per asset")
        k = decisions.index(i)
        theta[k * n_assets:(k + 1) * n_assets] = v
        seen.add(i)
    missing = [tree.ids[i] for i in decisions if i not in seen]
    if missing:
        raise ValidationError(f"strategy missing holdings at: {missing}")
    return theta, decisions


def _strategy_of(mkt: Market, decisions: Sequence[int], theta: np.ndarray) -> Strategy:
    n_assets = len(mkt.asset_names)
    holdings = {mkt.tree.ids[u]: theta[k * n_assets:(k + 1) * n_assets].copy()
                for k, u in enumerate(decisions)}
    return Strategy(holdings=holdings)


def gains(mkt: Market, x: str, strategy: Strategy) -> CashBalance:
    """Cumulative gains from trading along each path out of x, starting from
    zero wealth at x; zero off the subtree."""
    tree = mkt.tree
    xi = tree.node_index(x)
    mat, decisions = _gains_matrix(mkt, xi)
    theta, _ = _strategy_vector(mkt, xi, strategy)
    return CashBalance(tree, mat @ theta)


@dataclass
class GainsAxiomReport:
    convexity_residual: float
    localization_residual: float
    decomposition_residual: float
    tolerance: float
    trials: int
    seed: int

    @property
    def all_passed(self) -> bool:
        return max(self.convexity_residual, self.localization_residual,
                   self.decomposition_residual) <= self.tolerance

    def as_dict(self) -> dict:
        return {
            "all_passed": self.all_passed,
            "convexity_residual": self.convexity_residual,
            "localization_residual": self.localization_residual,
            "decomposition_residual": self.decomposition_residual,
            "tolerance": self.tolerance,
            "trials": self.trials,
            "seed": self.seed,
        }


def check_gains_axioms(mkt: Market, x: str, trials: int, seed: int, *,
                       tolerance: float = 1e-12) -> GainsAxiomReport:
    """Verify on sampled strategies that the gains set is closed under convex
    combination, masks to the gains set of each later start node, and splits
    into a stopped part plus an independent restart.  All three are linear
    identities of the realization and must hold to roundoff."""
    from .valuation import sample_stopping_time

    tree = mkt.tree
    xi = tree.node_index(x)
    mat, decisions = _gains_matrix(mkt, xi)
    rng = np.random.default_rng(seed)
    d = mat.shape[1]
    conv = loc = dec = 0.0
    for _ in range(trials):
        theta_a = rng.normal(size=d)
        theta_b = rng.normal(size=d)
        w = float(rng.uniform())
        mix = mat @ (w * theta_a + (1 - w) * theta_b)
        conv = max(conv, float(np.max(np.abs(mix - (w * (mat @ theta_a) + (1 - w) * (mat @ theta_b))))))

        # localization: a gains process from a stopping time, masked to the
        # subtree of one of its graph nodes, is exactly that node's own
        # gains process (the pieces on the other branches vanish there)
        g_full = mat @ theta_a
        sigma_loc = sample_stopping_time(tree, rng, start=tree.ids[xi])
        pooled = np.zeros(tree.n_nodes)
        piece_of = {}
        for node_id in sigma_loc.graph:
            zi = tree.node_index(node_id)
            mat_z, decisions_z = _gains_matrix(mkt, zi)
            theta_z = rng.normal(size=mat_z.shape[1])
            piece_of[zi] = mat_z @ theta_z
            pooled += piece_of[zi]
        z = tree.node_index(sorted(sigma_loc.graph)[int(rng.integers(len(sigma_loc.graph)))])
        masked = np.zeros(tree.n_nodes)
        masked[tree.descendant_indices(z)] = pooled[tree.descendant_indices(z)]
        loc = max(loc, float(np.max(np.abs(masked - piece_of[z]))))

        # stop at sigma, then restart below it with the same positions
        sigma = sample_stopping_time(tree, rng, start=tree.ids[xi])
        stopped = g_full.copy()
        restart = np.zeros(tree.n_nodes)
        for node_id in sigma.graph:
            zi = tree.node_index(node_id)
            for i in tree.descendant_indices(zi):
                stopped[i] = g_full[zi]
                restart[i] = g_full[i] - g_full[zi]
        dec = max(dec, float(np.max(np.abs(stopped + restart - g_full))))
    return GainsAxiomReport(conv, loc, dec, tolerance, trials, seed)


@dataclass
class MarketValueResult:
    value: float          # best hedged valuation of the balance
    normalized: float     # value minus the access value
    access_value: float   # best hedged valuation of the zero balance
    strategy: Strategy
    converged: bool


def _hedge_at(family, mkt: Market, xi: int, values_full: np.ndarray,
              opts: DualSolverOptions, mat: np.ndarray):
    def objective(batch: np.ndarray) -> np.ndarray:
        return family.node_values(values_full[None, :] + batch @ mat.T)[:, xi]

    res = maximize(objective, np.zeros(mat.shape[1]),
                   gradient_tolerance=opts.gradient_tolerance,
                   max_iterations=min(opts.max_iterations, 50_000),
                   divergence_bound=opts.divergence_bound,
                   fd_step=opts.fd_step,
                   value_tolerance=1e-12)
    if res.diverged:
        raise DivergenceError(
            "hedging optimum is unbounded: the market admits arbitrage relative to this family",
            direction=res.direction)
    return res


def market_value(family, mkt: Market, x: str, balance: CashBalance,
                 opts: DualSolverOptions | None = None) -> MarketValueResult:
    """Best valuation of the balance over all trading overlays from x, its
    normalization, the access value (the same optimization at zero cash),
    and the optimal strategy.  Unbounded hedging raises a divergence error
    whose direction certifies the arbitrage."""
    opts = opts or DEFAULT_OPTIONS
    if balance.tree is not mkt.tree or family.tree is not mkt.tree:
        raise ValidationError("family, market and balance must share one tree instance")
    xi = mkt.tree.node_index(x)
    mat, decisions = _gains_matrix(mkt, xi)
    res = _hedge_at(family, mkt, xi, balance.values, opts, mat)
    res0 = _hedge_at(family, mkt, xi, np.zeros(mkt.tree.n_nodes), opts, mat)
    return MarketValueResult(
        value=res.value,
        normalized=res.value - res0.value,
        access_value=res0.value,
        strategy=_strategy_of(mkt, decisions, res.x),
        converged=res.converged and res0.converged,
    )


class MarketFamily:
    """Normalized market-access valuations evaluated node-by-node; each
    evaluation runs a hedging optimization, so keep the trees small."""

    def __init__(self, family, mkt: Market, opts: DualSolverOptions | None = None):
        if family.tree is not mkt.tree:
            raise ValidationError("family and market must share one tree instance")
        self.tree = mkt.tree
        self.family = family
        self.market = mkt
        self.opts = opts or DualSolverOptions(gradient_tolerance=1e-7)
        self._mats = {}
        self._access = {}
        for xi in range(self.tree.n_nodes):
            if self.tree.is_leaf[xi]:
                continue
            mat, _ = _gains_matrix(mkt, xi)
            self._mats[xi] = mat
            self._access[xi] = _hedge_at(family, mkt, xi, np.zeros(self.tree.n_nodes),
                                         self.opts, mat).value

    def node_values(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        flat = values.reshape(-1, self.tree.n_nodes)
        out = np.empty_like(flat)
        for xi in range(self.tree.n_nodes):
            if self.tree.is_leaf[xi]:
                out[:, xi] = flat[:, xi]
                continue
            for row in range(flat.shape[0]):
                res = _hedge_at(self.family, self.market, xi, flat[row], self.opts, self._mats[xi])
                out[row, xi] = res.value - self._access[xi]
        return out.reshape(values.shape)


def check_market_axioms(family, mkt: Market, trials: int, seed: int, *,
                        tolerance: float = 1e-5,
                        opts: DualSolverOptions | None = None,
                        cash_range: tuple[float, float] = (-5.0, 5.0)) -> AxiomReport:
    """Axiom suite for the normalized hedged family.  The default tolerance
    reflects the nested optimization; widen it for non-smooth base families."""
    return check_axioms(MarketFamily(family, mkt, opts), trials, seed,
                        tolerance=tolerance, cash_range=cash_range)


@dataclass(frozen=True)
class StatePriceDensity:
    """Strictly positive node process representing consistent linear pricing
    as weighted conditional expectations; normalized to 1 at the root."""

    zeta: Mapping[str, float]


def _conditional_reference(tree: Tree) -> np.ndarray:
    """Transition probabilities q(child | node) from the node weights,
    normalized over each node's children."""
    if tree.subtree_weight is None:
        raise ValidationError("tree carries no weights; a reference distribution is required")
    q = np.zeros(tree.n_nodes)
    for u in range(tree.n_nodes):
        kids = tree.children_index[u]
        if not kids:
            continue
        total = tree.subtree_weight[list(kids)].sum()
        for c in kids:
            q[c] = tree.subtree_weight[c] / total
    return q


def extract_state_price_density(tree: Tree, one_step_prices: Mapping[str, Sequence[float]]) -> StatePriceDensity:
    """Recover the state-price density from one-step pricing weights: the
    root starts at 1 and each child scales its parent by weight over
    reference transition probability.

    Nonpositive weights are rejected: they price some nonnegative claim at
    zero without it being negligible, an arbitrage."""
    q = _conditional_reference(tree)
    zeta = np.zeros(tree.n_nodes)
    zeta[tree.root_index] = 1.0
    for u in tree.preorder:
        kids = tree.children_index[u]
        if not kids:
            continue
        node_id = tree.ids[u]
        if node_id not in one_step_prices:
            raise ValidationError(f"missing one-step prices at internal node {node_id!r}")
        w = np.asarray(one_step_prices[node_id], dtype=float)
        if w.shape != (len(kids),):
            raise ValidationError(f"one-step prices at {node_id!r} must give one weight per child")
        if np.any(w <= 0):
            raise ValidationError(
                f"nonpositive pricing weight at {node_id!r} violates no-arbitrage "
                "(a nonnegative claim priced at zero must be negligible)")
        for weight, c in zip(w, kids):
            zeta[c] = zeta[u] * weight / q[c]
    return StatePriceDensity(zeta={node_id: float(z) for node_id, z in zip(tree.ids, zeta)})


def synthesize_one_step_prices(tree: Tree, zeta: Mapping[str, float]) -> dict[str, list[float]]:
    """One-step pricing weights induced by a strictly positive density via
    weighted conditional one-step expectations; the round trip through
    ``extract_state_price_density`` is the identity."""
    q = _conditional_reference(tree)
    z = np.array([float(zeta[node_id]) for node_id in tree.ids])
    if np.any(z <= 0):
        raise ValidationError("state-price density must be strictly positive")
    out: dict[str, list[float]] = {}
    for u in range(tree.n_nodes):
        kids = tree.children_index[u]
        if kids:
            out[tree.ids[u]] = [float(q[c] * z[c] / z[u]) for c in kids]
    return out
