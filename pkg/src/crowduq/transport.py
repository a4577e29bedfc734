"""Exact discrete optimal transport, nested distance, and the bound checks.

The Wasserstein solver is a transportation simplex with Bland's
anti-cycling rule (exact at desk scale, no entropic smoothing).  The
nested (process) distance runs the standard backward recursion over
matched scenario-tree stages: each interior node pair solves a small
transport problem whose costs are the recursive child values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .csvio import write_csv
from .errors import EmptyDistribution, InfeasibleWeights, NonConvergence, StageMismatch
from .stochastic import EmpiricalDistribution, ScenarioTree

_MARGINAL_TOL = 1e-10


# --------------------------------------------------------------------------
# transportation simplex


def _northwest_corner(supply: np.ndarray, demand: np.ndarray):
    """Initial basic feasible solution; always m + n - 1 basic cells."""
    m, n = len(supply), len(demand)
    s, d = supply.copy(), demand.copy()
    basis, flows = [], {}
    i = j = 0
    while True:
        q = min(s[i], d[j])
        basis.append((i, j))
        flows[(i, j)] = q
        s[i] -= q
        d[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if s[i] <= d[j] and i < m - 1:
            i += 1
        elif j < n - 1:
            j += 1
        else:
            i += 1
    return basis, flows


def _compute_duals(basis, cost, m, n):
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    by_row, by_col = {}, {}
    for (i, j) in basis:
        by_row.setdefault(i, []).append(j)
        by_col.setdefault(j, []).append(i)
    u[0] = 0.0
    stack = [("r", 0)]
    while stack:
        side, k = stack.pop()
        if side == "r":
            for j in by_row.get(k, []):
                if np.isnan(v[j]):
                    v[j] = cost[k, j] - u[k]
                    stack.append(("c", j))
        else:
            for i in by_col.get(k, []):
                if np.isnan(u[i]):
                    u[i] = cost[i, k] - v[k]
                    stack.append(("r", i))
    return u, v


def _find_cycle(basis, enter):
    """Alternating cycle created by the entering cell in the basis tree."""
    ei, ej = enter
    by_row, by_col = {}, {}
    for (i, j) in basis:
        by_row.setdefault(i, []).append(j)
        by_col.setdefault(j, []).append(i)
    # path from row ei to col ej through basis edges
    parent = {("r", ei): None}
    queue = [("r", ei)]
    while queue:
        node = queue.pop(0)
        side, k = node
        if node == ("c", ej):
            break
        neighbors = (
            [("c", j) for j in by_row.get(k, [])]
            if side == "r"
            else [("r", i) for i in by_col.get(k, [])]
        )
        for nb in neighbors:
            if nb not in parent:
                parent[nb] = node
                queue.append(nb)
    path_nodes = [("c", ej)]
    while parent[path_nodes[-1]] is not None:
        path_nodes.append(parent[path_nodes[-1]])
    path_nodes.reverse()  # r_ei, c_a, r_b, ..., c_ej
    cells = []
    for a, b in zip(path_nodes, path_nodes[1:]):
        (i, j) = (a[1], b[1]) if a[0] == "r" else (b[1], a[1])
        cells.append((i, j))
    minus = cells[0::2]
    plus = cells[1::2]
    return plus, minus


def _transportation_simplex(supply, demand, cost):
    """Exact optimal plan of the balanced transportation problem."""
    m, n = cost.shape
    scale = max(float(np.abs(cost).max()), 1.0)
    tol = 1e-12 * scale
    basis, flows = _northwest_corner(supply, demand)
    for _ in range(20000 * (m + n)):
        u, v = _compute_duals(basis, cost, m, n)
        reduced = cost - u[:, None] - v[None, :]
        for (i, j) in basis:
            reduced[i, j] = 0.0
        enter = None
        # Bland's rule: first improving cell in row-major order
        candidates = np.argwhere(reduced < -tol)
        if len(candidates):
            enter = tuple(int(x) for x in candidates[0])
        if enter is None:
            plan = np.zeros((m, n))
            for (i, j), q in flows.items():
                plan[i, j] = q
            return plan, float((plan * cost).sum())
        plus, minus = _find_cycle(basis, enter)
        theta = min(flows[c] for c in minus)
        leave = min(c for c in minus if flows[c] == theta)
        flows[enter] = theta
        for c in plus:
            flows[c] += theta
        for c in minus:
            flows[c] -= theta
        del flows[leave]
        basis.remove(leave)
        basis.append(enter)
    raise NonConvergence("transportation simplex exceeded its iteration budget")


# --------------------------------------------------------------------------
# public distances


@dataclass(frozen=True)
class TransportPlan:
    """Optimal coupling with marginal certificates."""

    coupling: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    cost: float

    def marginal_residuals(self):
        r = float(np.abs(self.coupling.sum(axis=1) - self.row_marginal).max())
        c = float(np.abs(self.coupling.sum(axis=0) - self.col_marginal).max())
        return r, c

    def to_csv(self, path) -> None:
        rows = (
            (i, j, self.coupling[i, j])
            for i in range(self.coupling.shape[0])
            for j in range(self.coupling.shape[1])
        )
        write_csv(path, ("row", "col", "mass"), rows)


def cost_matrix(p: EmpiricalDistribution, q: EmpiricalDistribution, r: float = 1,
                metric: Optional[Callable] = None) -> np.ndarray:
    """Pairwise ground costs d(x, y)^r between atom sets.

    Numeric atoms use |x - y|; object atoms (e.g. parameter paths) need an
    explicit ``metric`` callable.
    """
    if metric is None:
        x, y = p.numeric, q.numeric
        return np.abs(x[:, None] - y[None, :]) ** r
    return np.array([[metric(a, b) ** r for b in q.atoms] for a in p.atoms])


def wasserstein_discrete(p: EmpiricalDistribution, q: EmpiricalDistribution,
                         costs: np.ndarray, r: float = 1):
    """Exact order-r transport distance for a given ground-cost matrix.

    ``costs`` holds d(x_i, y_j)^r.  Returns ``(distance, plan)`` where
    ``distance = (optimal value)^(1/r)`` and the plan satisfies both
    marginals to 1e-10.
    """
    costs = np.asarray(costs, dtype=float)
    if costs.shape != (len(p.atoms), len(q.atoms)):
        raise ValueError("cost matrix shape does not match the atom counts")
    if np.any(costs < 0):
        raise ValueError("ground costs must be nonnegative")
    wp = np.asarray(p.weights, dtype=float)
    wq = np.asarray(q.weights, dtype=float)
    if abs(wp.sum() - wq.sum()) > _MARGINAL_TOL:
        raise InfeasibleWeights(f"weight totals differ: {wp.sum()!r} vs {wq.sum()!r}")
    wq = wq * (wp.sum() / wq.sum())  # exact balance for the simplex
    plan, value = _transportation_simplex(wp, wq, costs)
    tp = TransportPlan(coupling=plan, row_marginal=wp, col_marginal=wq, cost=value)
    res = tp.marginal_residuals()
    if max(res) > _MARGINAL_TOL:
        raise NonConvergence(f"transport plan marginal residuals {res} exceed tolerance")
    return float(max(value, 0.0) ** (1.0 / r)), tp


def wasserstein_1d(p: EmpiricalDistribution, q: EmpiricalDistribution, r: float = 1) -> float:
    """Order-r distance between real-valued empirical measures.

    Uses the sorted-quantile coupling, which is optimal in one dimension
    for convex costs; agrees with :func:`wasserstein_discrete` on the same
    inputs.
    """
    if not p.atoms or not q.atoms:
        raise EmptyDistribution("both distributions need atoms")
    if r < 1:
        raise ValueError("order r must be >= 1")
    x, y = p.numeric, q.numeric
    wx = np.asarray(p.weights, dtype=float)
    wy = np.asarray(q.weights, dtype=float)
    ox, oy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    x, wx = x[ox], wx[ox]
    y, wy = y[oy], wy[oy]
    cx, cy = np.cumsum(wx), np.cumsum(wy)
    qs = np.unique(np.concatenate([[0.0], cx, cy]))
    qs = np.clip(qs, 0.0, min(cx[-1], cy[-1]))
    seg = np.diff(qs)
    mids = (qs[:-1] + qs[1:]) / 2.0
    xi = x[np.searchsorted(cx, mids, side="right").clip(max=len(x) - 1)]
    yi = y[np.searchsorted(cy, mids, side="right").clip(max=len(y) - 1)]
    return float((seg * np.abs(xi - yi) ** r).sum() ** (1.0 / r))


# --------------------------------------------------------------------------
# expectation-gap checks


@dataclass(frozen=True)
class KRReport:
    """One Kantorovich-Rubinstein style bound check on QoI expectations."""

    mean_gap: float
    qoi_lipschitz: float
    solver_lipschitz: float
    param_distance: float
    bound: float
    slack: float
    holds: bool


def kr_check(phi_values_p: EmpiricalDistribution, phi_values_q: EmpiricalDistribution,
             qoi_lipschitz: float, solver_lipschitz: float = 1.0,
             param_distance: float = None) -> KRReport:
    """Check |E_P phi - E_Q phi| <= L_phi * L_S * d1 on empirical data.

    ``param_distance`` is the order-1 transport distance between the two
    empirical parameter measures (ground metric on parameter space) and
    ``solver_lipschitz`` the empirical constant from the stability harness.
    A violated inequality is reported, never raised: it falsifies the
    fitted constant.
    """
    if param_distance is None:
        param_distance = wasserstein_1d(phi_values_p, phi_values_q, r=1)
    lhs = abs(phi_values_p.mean() - phi_values_q.mean())
    bound = qoi_lipschitz * solver_lipschitz * param_distance
    return KRReport(
        mean_gap=lhs,
        qoi_lipschitz=qoi_lipschitz,
        solver_lipschitz=solver_lipschitz,
        param_distance=param_distance,
        bound=bound,
        slack=bound - lhs,
        holds=lhs <= bound + 1e-12 * max(1.0, bound),
    )


# --------------------------------------------------------------------------
# nested distance


def coefficient_stage_cost(r: float = 1, stage_weights: Optional[Sequence[float]] = None):
    """Default ground cost: per-stage |xi - eta|^r, optionally stage-weighted."""

    def cost_fn(stage: int, hist_a: tuple, hist_b: tuple) -> float:
        w = 1.0 if stage_weights is None else float(stage_weights[stage - 1])
        return w * abs(hist_a[-1] - hist_b[-1]) ** r

    return cost_fn


@dataclass(frozen=True)
class NestedResult:
    """Nested distance plus the flat (marginal-only) distance on the same leaves."""

    distance: float
    flat_wasserstein: float
    root_value: float
    stagewise_costs: dict  # (node_p, node_q) -> optimal subproblem value


def nested_distance(tree_p: ScenarioTree, tree_q: ScenarioTree, r: float = 1,
                    stage_cost: Optional[Callable] = None) -> NestedResult:
    """Backward-recursion nested distance between two scenario trees.

    ``stage_cost(stage, hist_p, hist_q)`` returns the r-th-power cost
    increment contributed by that stage given the revealed histories; the
    total path cost is the sum over stages.  At interior node pairs the
    recursion solves an exact transport problem between the children
    distributions with the recursive child values as costs, which realizes
    the conditional-marginal constraints stage by stage.  The flat distance
    relaxes those constraints to plain marginals on the leaf paths, so
    ``flat_wasserstein <= distance`` always.
    """
    if tree_p.n_stages != tree_q.n_stages:
        raise StageMismatch(f"{tree_p.n_stages} vs {tree_q.n_stages} stages")
    if len(tree_p.stage_boundaries) == len(tree_q.stage_boundaries):
        if np.max(np.abs(np.asarray(tree_p.stage_boundaries) - np.asarray(tree_q.stage_boundaries))) > 1e-12:
            raise StageMismatch("stage boundaries differ")
    cost_fn = stage_cost or coefficient_stage_cost(r)
    offset = tree_p.stage_offset
    memo = {}

    def value(node_p, node_q, hist_p, hist_q) -> float:
        key = (node_p.id, node_q.id)
        if key in memo:
            return memo[key]
        inc = cost_fn(offset + node_p.stage, hist_p, hist_q) if node_p.stage > 0 else 0.0
        leaf_p, leaf_q = tree_p.is_leaf(node_p.id), tree_q.is_leaf(node_q.id)
        if leaf_p != leaf_q:
            raise StageMismatch("trees have leaves at different stages")
        if leaf_p:
            memo[key] = inc
            return inc
        kids_p = tree_p.children(node_p.id)
        kids_q = tree_q.children(node_q.id)
        sub = np.array(
            [
                [
                    value(a, b, hist_p + (a.value,), hist_q + (b.value,))
                    for b in kids_q
                ]
                for a in kids_p
            ]
        )
        wp = np.array([a.prob for a in kids_p])
        wq = np.array([b.prob for b in kids_q])
        _, ot_value = _transportation_simplex(wp, wq * (wp.sum() / wq.sum()), sub)
        v = inc + ot_value
        memo[key] = v
        return v

    root_value = value(tree_p.root, tree_q.root, (), ())

    paths_p, probs_p = tree_p.leaf_distribution()
    paths_q, probs_q = tree_q.leaf_distribution()
    flat_cost = np.array(
        [
            [
                sum(cost_fn(offset + k, pa[:k], pb[:k]) for k in range(1, len(pa) + 1))
                for pb in paths_q
            ]
            for pa in paths_p
        ]
    )
    flat, _ = wasserstein_discrete(
        EmpiricalDistribution(tuple(paths_p), tuple(probs_p)),
        EmpiricalDistribution(tuple(paths_q), tuple(probs_q)),
        flat_cost,
        r=r,
    )
    return NestedResult(
        distance=float(max(root_value, 0.0) ** (1.0 / r)),
        flat_wasserstein=flat,
        root_value=float(root_value),
        stagewise_costs=memo,
    )
