"""Parameter-space metrics, discrete solution norms, and the stability harness.

The solution operators of both models are Lipschitz from parameter space
(with the metrics below) into the space-time H1 norm, with a constant of
the form C exp(Ctilde T / 2).  Neither constant is known a priori; the
harness only measures ratios and fits the growth law.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .csvio import write_csv
from .errors import DegeneratePerturbation, GridMismatch
from .grid import Grid, TimeGrid
from .params import FlowthroughParams, ReactionParams, face_gradient
from .solver import SolutionField, solve


def _time_weights(time_grid: TimeGrid) -> np.ndarray:
    """Trapezoid weights over step times (they sum to T exactly)."""
    w = np.full(time_grid.num_steps + 1, time_grid.step_size)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def norm_l2h1(u, grid: Grid, time_grid: TimeGrid) -> float:
    """Discrete L2-in-time H1-in-space norm of a space-time field.

    sqrt( sum_k w_k [ sum_i vol u_ki^2 + sum_faces (du/dn)^2 area dist ] )
    with two-point face gradients; zero iff the field vanishes.
    Accepts a :class:`SolutionField` or a raw (num_steps + 1, n) array.
    """
    values = u.values if isinstance(u, SolutionField) else np.asarray(u, dtype=float)
    if values.shape != (time_grid.num_steps + 1, grid.n_cells):
        raise GridMismatch("field shape does not match grid / time grid")
    w = _time_weights(time_grid)
    l2 = (values**2).sum(axis=1) * grid.cell_volume
    jumps = (values[:, grid.face_right] - values[:, grid.face_left]) / grid.face_dist
    h1 = (jumps**2 * (grid.face_area * grid.face_dist)).sum(axis=1)
    return float(np.sqrt(np.dot(w, l2 + h1)))


def _w1inf(diff_slice: np.ndarray, grid: Grid) -> float:
    """Discrete W^{1,inf} magnitude of one time slice: max(sup |v|, sup |grad v|)."""
    sup = float(np.abs(diff_slice).max())
    if len(grid.face_left):
        sup = max(sup, float(np.abs(face_gradient(diff_slice, grid)).max()))
    return sup


def _l2_cells(diff: np.ndarray, grid: Grid) -> float:
    return float(np.sqrt(grid.cell_volume * np.sum(diff**2)))


def reaction_param_distance(p: ReactionParams, q: ReactionParams, grid: Grid,
                            time_grid: TimeGrid) -> float:
    """Metric on reaction parameter tuples.

    sup-norm distances of source and decay rates, the sup-in-time
    W^{1,inf}-in-space distance of the potentials, and the L2 distance of
    the initial densities, summed.
    """
    for a, b in ((p.source_rate, q.source_rate), (p.decay_rate, q.decay_rate),
                 (p.potential, q.potential), (p.initial_density, q.initial_density)):
        if a.shape != b.shape:
            raise GridMismatch("parameter fields live on different grids")
    d = float(np.abs(p.source_rate - q.source_rate).max())
    d += float(np.abs(p.decay_rate - q.decay_rate).max())
    dv = p.potential - q.potential
    d += max(_w1inf(dv[k], grid) for k in range(dv.shape[0]))
    d += _l2_cells(p.initial_density - q.initial_density, grid)
    return d


def flowthrough_param_distance(p: FlowthroughParams, q: FlowthroughParams, grid: Grid,
                               time_grid: TimeGrid) -> float:
    """Metric on flowthrough parameter tuples.

    sup-norm distances of entry and exit rates on their boundary faces,
    the L2-in-time W^{1,inf}-in-space distance of the potentials, and the
    L2 distance of the initial densities, summed.
    """
    for a, b in ((p.entry_rate, q.entry_rate), (p.exit_rate, q.exit_rate),
                 (p.potential, q.potential), (p.initial_density, q.initial_density)):
        if a.shape != b.shape:
            raise GridMismatch("parameter fields live on different grids")
    d = float(np.abs(p.entry_rate - q.entry_rate).max()) if p.entry_rate.size else 0.0
    d += float(np.abs(p.exit_rate - q.exit_rate).max()) if p.exit_rate.size else 0.0
    dv = p.potential - q.potential
    w = _time_weights(time_grid)
    per_step = np.array([_w1inf(dv[k], grid) for k in range(dv.shape[0])])
    d += float(np.sqrt(np.dot(w, per_step**2)))
    d += _l2_cells(p.initial_density - q.initial_density, grid)
    return d


def param_distance(p, q, grid, time_grid) -> float:
    if p.kind != q.kind:
        raise GridMismatch("cannot compare parameter sets of different kinds")
    if p.kind == "reaction":
        return reaction_param_distance(p, q, grid, time_grid)
    return flowthrough_param_distance(p, q, grid, time_grid)


# --------------------------------------------------------------------------
# perturbations and the stability experiment


@dataclass(frozen=True)
class Perturbation:
    """Additive parameter perturbation; component deltas broadcast like fields.

    Reaction targets: ``source``, ``decay``, ``potential``, ``initial``.
    Flowthrough targets: ``entry``, ``exit``, ``potential``, ``initial``.
    """

    source: object = None
    decay: object = None
    entry: object = None
    exit: object = None
    potential: object = None
    initial: object = None

    def apply(self, base, scale: float):
        def bump(arr, delta):
            return arr if delta is None else arr + scale * np.asarray(delta, dtype=float)

        if base.kind == "reaction":
            return base.with_fields(
                source_rate=bump(base.source_rate, self.source),
                decay_rate=bump(base.decay_rate, self.decay),
                potential=bump(base.potential, self.potential),
                initial_density=bump(base.initial_density, self.initial),
            )
        return base.with_fields(
            entry_rate=bump(base.entry_rate, self.entry),
            exit_rate=bump(base.exit_rate, self.exit),
            potential=bump(base.potential, self.potential),
            initial_density=bump(base.initial_density, self.initial),
        )


@dataclass(frozen=True)
class StabilityReport:
    """Empirical Lipschitz data for one base point and perturbation direction."""

    param_distance: float
    solution_distance: float
    ratio: float
    bound_constant: float
    perturbation_ladder: tuple  # ((scale, param_dist, sol_dist, ratio), ...)
    degenerate: bool = False

    def to_csv(self, path) -> None:
        rows = [(s, pd, sd, r) for (s, pd, sd, r) in self.perturbation_ladder]
        rows.append(("max", self.param_distance, self.solution_distance, self.bound_constant))
        write_csv(path, ("scale", "param_distance", "solution_distance", "ratio"), rows)


def stability_experiment(base_params, perturbation: Perturbation, grid: Grid,
                         time_grid: TimeGrid, *, scales: Sequence[float] = (1.0, 0.5, 0.25, 0.125),
                         mode: str = "strict", solver_options: Optional[dict] = None) -> StabilityReport:
    """Solve a perturbation ladder and report solution/parameter distance ratios.

    The max ratio over the ladder is the empirical Lipschitz constant of
    the solution operator in the tested direction.
    """
    opts = dict(solver_options or {})
    opts.setdefault("mode", mode)
    base_sol = solve(base_params, grid, time_grid, **opts)
    ladder = []
    for s in scales:
        pert = perturbation.apply(base_params, s)
        p_dist = param_distance(base_params, pert, grid, time_grid)
        if p_dist < 1e-14:
            raise DegeneratePerturbation(f"perturbation at scale {s} has zero parameter distance")
        sol = solve(pert, grid, time_grid, **opts)
        s_dist = norm_l2h1(sol.values - base_sol.values, grid, time_grid)
        ladder.append((float(s), p_dist, s_dist, s_dist / p_dist))
    ratios = [r for (_, _, _, r) in ladder]
    top = max(range(len(ladder)), key=lambda i: ratios[i])
    return StabilityReport(
        param_distance=ladder[top][1],
        solution_distance=ladder[top][2],
        ratio=ladder[top][3],
        bound_constant=max(ratios),
        perturbation_ladder=tuple(ladder),
    )


def fit_exponential_growth(horizons: Sequence[float], ratios: Sequence[float]):
    """Least-squares fit of ratio(T) = c1 * exp(c2 * T / 2); returns (c1, c2).

    Fitted in log space; c2 >= 0 indicates the expected growth of the
    empirical Lipschitz constant with the time horizon.
    """
    horizons = np.asarray(horizons, dtype=float)
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios <= 0):
        raise ValueError("ratios must be positive to fit the growth law")
    design = np.column_stack([np.ones_like(horizons), horizons / 2.0])
    coef, *_ = np.linalg.lstsq(design, np.log(ratios), rcond=None)
    return float(np.exp(coef[0])), float(coef[1])
