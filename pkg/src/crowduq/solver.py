"""Bound-preserving IMEX finite-volume time stepping for both density models.

Scheme: cell-centered finite volumes with two-point implicit diffusion.
Drift and reaction/entry terms are explicit; the outflow term is implicit
(it adds to the diagonal, so it can never undershoot).  The drift flux
across a face upwinds the mobility with a receiver gate (see
:meth:`MobilityFunction.face_flux_density`), which keeps every step inside
[0, 1] under the step restriction computed by :func:`max_time_step`.

Densities are never clamped: a violation of the box constraint raises
:class:`BoundViolation` instead of being repaired.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .csvio import write_csv
from .errors import (
    BoundViolation,
    NoContraction,
    NonConvergence,
    StepRestrictionViolated,
)
from .grid import BoundaryTag, Grid, TimeGrid
from .params import FlowthroughParams, ReactionParams, validate_params

_BOX_TOL = 1e-10
_LINEAR_TOL = 1e-10


# --------------------------------------------------------------------------
# assembly helpers


def _diffusion_matrix(grid: Grid) -> sparse.csr_matrix:
    """Two-point-flux diffusion operator; row i of A @ u is the net diffusive outflow of cell i."""
    c = grid.face_area / grid.face_dist
    i, j = grid.face_left, grid.face_right
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([i, j, j, i])
    vals = np.concatenate([c, c, -c, -c])
    n = grid.n_cells
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _drift_divergence(u: np.ndarray, potential_slice: np.ndarray, grid: Grid, mobility) -> np.ndarray:
    """Net drift outflow per cell for the flux f(u) grad V, upwinded by the sign of the potential jump."""
    dv = (potential_slice[grid.face_right] - potential_slice[grid.face_left]) / grid.face_dist
    if not np.any(dv):
        return np.zeros(grid.n_cells)
    s_pos = np.maximum(dv, 0.0)
    s_neg = np.maximum(-dv, 0.0)
    ul, ur = u[grid.face_left], u[grid.face_right]
    flux = np.zeros_like(dv)
    pos = s_pos > 0
    if np.any(pos):
        flux[pos] = s_pos[pos] * mobility.face_flux_density(ul[pos], ur[pos])
    neg = s_neg > 0
    if np.any(neg):
        flux[neg] -= s_neg[neg] * mobility.face_flux_density(ur[neg], ul[neg])
    flux *= grid.face_area
    div = np.bincount(grid.face_left, weights=flux, minlength=grid.n_cells)
    div -= np.bincount(grid.face_right, weights=flux, minlength=grid.n_cells)
    return div


def _solve_checked(factor, lhs, rhs, step: int) -> np.ndarray:
    u = factor(rhs)
    norm_rhs = float(np.linalg.norm(rhs))
    resid = float(np.linalg.norm(lhs @ u - rhs))
    if resid > _LINEAR_TOL * max(norm_rhs, 1.0):
        raise NonConvergence(f"linear solve failed tolerance at step {step} (residual {resid:.3e})")
    return u


def _check_box(u: np.ndarray, step: int) -> None:
    lo, hi = float(u.min()), float(u.max())
    if lo < -_BOX_TOL or hi > 1.0 + _BOX_TOL:
        raise BoundViolation(f"density left [0, 1] at step {step}: min={lo:.3e}, max={hi:.3e}")


def _max_face_drift(potential: np.ndarray, grid: Grid) -> np.ndarray:
    """Per-face maximum of |grad V| across all step times."""
    if potential.shape[0] > 1 and np.all(potential == potential[0]):
        potential = potential[:1]
    worst = np.zeros(len(grid.face_left))
    for start in range(0, potential.shape[0], 64):
        chunk = potential[start:start + 64]
        dv = np.abs(chunk[:, grid.face_right] - chunk[:, grid.face_left]) / grid.face_dist
        worst = np.maximum(worst, dv.max(axis=0))
    return worst


def max_time_step(params, grid: Grid, time_grid: Optional[TimeGrid] = None) -> float:
    """Largest time step for which the explicit terms cannot overshoot [0, 1].

    The implicit diffusion solve maps [0, 1]-valued data into the convex
    hull of its input, so it suffices that the explicit update stays inside
    the box.  With L the mobility Lipschitz constant, the per-cell loss
    rate is bounded by ``decay + sum_f s_f L A_f / vol`` and the gain rate
    by ``L * source + 2 sum_f s_f L A_f / vol (+ gate entry rate)``, where
    ``s_f`` is the face drift speed |grad V|; the factor 2 covers the slope
    of the receiver gate.  A diffusion margin 2 sum_ax h_ax^-2 is added for
    headroom.
    """
    vol = grid.cell_volume
    diff_rate = 2.0 * sum(1.0 / h**2 for h in grid.spacing)
    s_face = _max_face_drift(params.potential, grid)
    per_cell = np.bincount(grid.face_left, weights=s_face * grid.face_area, minlength=grid.n_cells)
    per_cell += np.bincount(grid.face_right, weights=s_face * grid.face_area, minlength=grid.n_cells)
    drift_rate = params.mobility.lipschitz_constant * float(per_cell.max(initial=0.0)) / vol

    if params.kind == "reaction":
        loss = float(params.decay_rate.max()) + drift_rate
        gain = params.mobility.lipschitz_constant * float(params.source_rate.max()) + 2.0 * drift_rate
    else:
        in_cells, in_areas = grid.faces_with_tag(BoundaryTag.INFLOW)
        entry = 0.0
        if len(in_cells):
            worst_a = params.entry_rate.max(axis=0)
            per_cell_in = np.bincount(in_cells, weights=worst_a * in_areas, minlength=grid.n_cells)
            entry = params.gate.lipschitz_constant * float(per_cell_in.max()) / vol
        loss = drift_rate
        gain = 2.0 * drift_rate + entry
    return 1.0 / (diff_rate + max(loss, gain, 0.0))


# --------------------------------------------------------------------------
# solution container


@dataclass(frozen=True)
class SolutionField:
    """Discrete trajectory with per-step flux totals and solve diagnostics."""

    values: np.ndarray  # (num_steps + 1, n_cells)
    grid: Grid
    time_grid: TimeGrid
    inflow_totals: np.ndarray  # (num_steps,)
    outflow_totals: np.ndarray
    picard_counts: np.ndarray
    step_residuals: np.ndarray

    def mass(self) -> np.ndarray:
        """Total mass at each step time."""
        return self.values.sum(axis=1) * self.grid.cell_volume

    def value_at(self, t: float) -> np.ndarray:
        return self.values[self.time_grid.step_index(t)]

    def to_csv(self, path) -> None:
        times = self.time_grid.times
        rows = (
            (k, times[k], i, self.values[k, i])
            for k in range(self.values.shape[0])
            for i in range(self.values.shape[1])
        )
        write_csv(path, ("step", "time", "cell_index", "value"), rows)

    def flux_to_csv(self, path) -> None:
        times = self.time_grid.times
        mass = self.mass()
        rows = [(0, times[0], 0.0, 0.0, mass[0])]
        rows += [
            (k + 1, times[k + 1], self.inflow_totals[k], self.outflow_totals[k], mass[k + 1])
            for k in range(len(self.inflow_totals))
        ]
        write_csv(path, ("step", "time", "inflow_total", "outflow_total", "mass"), rows)


# --------------------------------------------------------------------------
# single IMEX steps (public single-step API)


def step_reaction(u: np.ndarray, params: ReactionParams, grid: Grid, dt: float,
                  step_index: int = 0) -> np.ndarray:
    """One IMEX step of the reaction model from the cell field ``u``.

    Diffusion is implicit; drift and the reaction terms
    ``source_rate * f(u) - decay_rate * u`` are explicit at the old step.
    """
    ops = _ReactionStepper(params, grid, dt)
    return ops.step(u, step_index)


def step_flowthrough(u: np.ndarray, params: FlowthroughParams, grid: Grid, dt: float,
                     step_index: int = 0) -> np.ndarray:
    """One IMEX step of the flowthrough model.

    The entry flux ``entry_rate * g(u)`` is explicit, the exit flux
    ``exit_rate * u`` implicit; the discrete mass balance
    ``sum_i vol (u' - u) = dt (inflow - outflow)`` holds to solver
    precision.
    """
    ops = _FlowthroughStepper(params, grid, dt)
    u_new, _, _ = ops.step(u, step_index)
    return u_new


class _ReactionStepper:
    def __init__(self, params, grid, dt):
        self.params, self.grid, self.dt = params, grid, dt
        n = grid.n_cells
        self.vol = grid.cell_volume
        lhs = (self.vol / dt) * sparse.identity(n, format="csr") + _diffusion_matrix(grid)
        self.lhs = lhs.tocsc()
        self.factor = spla.splu(self.lhs).solve

    def step(self, u, k):
        p, g = self.params, self.grid
        f = p.mobility(u)
        drift = _drift_divergence(u, p.potential[k], g, p.mobility)
        rhs = (self.vol / self.dt) * u - drift + self.vol * (p.source_rate[k] * f - p.decay_rate[k] * u)
        u_new = _solve_checked(self.factor, self.lhs, rhs, k)
        _check_box(u_new, k + 1)
        return u_new


class _FlowthroughStepper:
    def __init__(self, params, grid, dt):
        self.params, self.grid, self.dt = params, grid, dt
        n = grid.n_cells
        self.vol = grid.cell_volume
        self.base = (self.vol / dt) * sparse.identity(n, format="csr") + _diffusion_matrix(grid)
        self.in_cells, self.in_areas = grid.faces_with_tag(BoundaryTag.INFLOW)
        self.out_cells, self.out_areas = grid.faces_with_tag(BoundaryTag.OUTFLOW)
        self._cached_b = None
        self._factor = None
        self._lhs = None

    def _factor_for(self, b_slice):
        if self._factor is None or not np.array_equal(b_slice, self._cached_b):
            diag = np.zeros(self.grid.n_cells)
            if len(self.out_cells):
                np.add.at(diag, self.out_cells, b_slice * self.out_areas)
            lhs = self.base + sparse.diags(diag)
            self._lhs = lhs.tocsc()
            self._factor = spla.splu(self._lhs).solve
            self._cached_b = None if b_slice is None else b_slice.copy()
        return self._factor, self._lhs

    def step(self, u, k):
        p, g = self.params, self.grid
        drift = _drift_divergence(u, p.potential[k], g, p.mobility)
        rhs = (self.vol / self.dt) * u - drift
        inflow_total = 0.0
        if len(self.in_cells):
            entry = p.entry_rate[k] * p.gate(u[self.in_cells]) * self.in_areas
            np.add.at(rhs, self.in_cells, entry)
            inflow_total = float(entry.sum())
        b_slice = p.exit_rate[k + 1] if p.exit_rate.size else np.zeros(0)
        factor, lhs = self._factor_for(b_slice)
        u_new = _solve_checked(factor, lhs, rhs, k)
        _check_box(u_new, k + 1)
        outflow_total = 0.0
        if len(self.out_cells):
            outflow_total = float((b_slice * u_new[self.out_cells] * self.out_areas).sum())
        return u_new, inflow_total, outflow_total


# --------------------------------------------------------------------------
# inner fixed-point solve (linearized map with lagged mobility)


@dataclass
class FrozenStep:
    """One time step's coefficients, frozen for the inner fixed-point solve.

    The linearized map evaluates the mobility (and gate) at the previous
    iterate while keeping diffusion, decay and outflow implicit; its fixed
    point is the fully implicit step.
    """

    kind: str
    grid: Grid
    u_prev: np.ndarray
    potential_slice: np.ndarray
    mobility: object
    source_slice: Optional[np.ndarray] = None
    decay_slice: Optional[np.ndarray] = None
    gate: object = None
    entry_slice: Optional[np.ndarray] = None
    exit_slice: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict)

    def _factorize(self, dt):
        if dt not in self._cache:
            g = self.grid
            vol = g.cell_volume
            lhs = (vol / dt) * sparse.identity(g.n_cells, format="csr") + _diffusion_matrix(g)
            if self.kind == "reaction":
                lhs = lhs + sparse.diags(vol * self.decay_slice)
            else:
                diag = np.zeros(g.n_cells)
                out_cells, out_areas = g.faces_with_tag(BoundaryTag.OUTFLOW)
                if len(out_cells):
                    np.add.at(diag, out_cells, self.exit_slice * out_areas)
                lhs = lhs + sparse.diags(diag)
            lhs = lhs.tocsc()
            self._cache[dt] = (spla.splu(lhs).solve, lhs)
        return self._cache[dt]

    def apply(self, w: np.ndarray, dt: float) -> np.ndarray:
        """One application of the linearized map at lag iterate ``w``."""
        g = self.grid
        vol = g.cell_volume
        factor, lhs = self._factorize(dt)
        drift = _drift_divergence(w, self.potential_slice, g, self.mobility)
        rhs = (vol / dt) * self.u_prev - drift
        if self.kind == "reaction":
            rhs = rhs + vol * self.source_slice * self.mobility(w)
        else:
            in_cells, in_areas = g.faces_with_tag(BoundaryTag.INFLOW)
            if len(in_cells):
                np.add.at(rhs, in_cells, self.entry_slice * self.gate(w[in_cells]) * in_areas)
        return _solve_checked(factor, lhs, rhs, -1)

    @property
    def lag_independent(self) -> bool:
        lf = self.mobility.lipschitz_constant
        lg = self.gate.lipschitz_constant if self.gate is not None else 0.0
        return lf == 0.0 and (self.kind == "reaction" or lg == 0.0)


def freeze_step(params, grid: Grid, time_grid: TimeGrid, step_index: int,
                u_prev: np.ndarray) -> FrozenStep:
    """Freeze the coefficients of step ``step_index`` (implicit evaluation at t_{k+1})."""
    k1 = step_index + 1
    if params.kind == "reaction":
        return FrozenStep(
            kind="reaction", grid=grid, u_prev=np.asarray(u_prev, dtype=float),
            potential_slice=params.potential[k1], mobility=params.mobility,
            source_slice=params.source_rate[k1], decay_slice=params.decay_rate[k1],
        )
    return FrozenStep(
        kind="flowthrough", grid=grid, u_prev=np.asarray(u_prev, dtype=float),
        potential_slice=params.potential[k1], mobility=params.mobility,
        gate=params.gate,
        entry_slice=params.entry_rate[k1] if params.entry_rate.size else np.zeros(0),
        exit_slice=params.exit_rate[k1] if params.exit_rate.size else np.zeros(0),
    )


@dataclass(frozen=True)
class PicardResult:
    values: np.ndarray
    iterations: int
    residuals: tuple


def picard_inner_solve(u_guess: np.ndarray, frozen: FrozenStep, dt: float,
                       tol: float = 1e-10, max_iter: int = 50) -> PicardResult:
    """Iterate the linearized map to its fixed point.

    Convergence is declared when successive iterates differ by at most
    ``tol`` in the volume-weighted L2 norm.  When the map does not depend
    on the lag iterate (zero mobility/gate Lipschitz constants) a single
    application is exact.  Raises :class:`NoContraction` if the residual
    ratio is >= 1 for three consecutive iterations.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("need tol > 0 and max_iter >= 1")
    vol = frozen.grid.cell_volume
    w = np.asarray(u_guess, dtype=float)
    residuals = []
    rises = 0
    prev_r = None
    for it in range(1, max_iter + 1):
        u = frozen.apply(w, dt)
        if frozen.lag_independent:
            return PicardResult(u, it, (0.0,))
        r = float(np.sqrt(vol * np.sum((u - w) ** 2)))
        residuals.append(r)
        if r <= tol:
            return PicardResult(u, it, tuple(residuals))
        if prev_r is not None and prev_r > 0 and r / prev_r >= 1.0:
            rises += 1
            if rises >= 3:
                raise NoContraction(
                    f"fixed-point residual non-decreasing for 3 iterations (last {r:.3e})"
                )
        else:
            rises = 0
        prev_r = r
        w = u
    raise NonConvergence(f"fixed point not reached in {max_iter} iterations (residual {residuals[-1]:.3e})")


# --------------------------------------------------------------------------
# full trajectories


def _run(params, grid, time_grid, stepping, mode, enforce_restriction,
         picard_tol, picard_max_iter):
    validate_params(params, grid, time_grid, mode=mode)
    dt = time_grid.step_size
    if enforce_restriction:
        bound = max_time_step(params, grid, time_grid)
        if dt > bound * (1 + 1e-9):
            raise StepRestrictionViolated(
                f"dt = {dt:.6g} exceeds the bound-preservation limit {bound:.6g}"
            )
    K, n = time_grid.num_steps, grid.n_cells
    values = np.empty((K + 1, n))
    values[0] = params.initial_density
    _check_box(values[0], 0)
    inflow = np.zeros(K)
    outflow = np.zeros(K)
    counts = np.zeros(K, dtype=np.int64)
    resids = np.zeros(K)

    if params.kind == "reaction":
        stepper = _ReactionStepper(params, grid, dt)
    else:
        grid.require_outflow() if mode == "strict" else None
        stepper = _FlowthroughStepper(params, grid, dt)

    for k in range(K):
        try:
            if stepping == "picard":
                frozen = freeze_step(params, grid, time_grid, k, values[k])
                res = picard_inner_solve(values[k], frozen, dt, tol=picard_tol,
                                         max_iter=picard_max_iter)
                _check_box(res.values, k + 1)
                values[k + 1] = res.values
                counts[k] = res.iterations
                resids[k] = res.residuals[-1]
                if params.kind == "flowthrough":
                    in_cells, in_areas = stepper.in_cells, stepper.in_areas
                    if len(in_cells):
                        inflow[k] = float((params.entry_rate[k + 1]
                                           * params.gate(res.values[in_cells]) * in_areas).sum())
                    if len(stepper.out_cells):
                        outflow[k] = float((params.exit_rate[k + 1]
                                            * res.values[stepper.out_cells] * stepper.out_areas).sum())
            elif params.kind == "reaction":
                values[k + 1] = stepper.step(values[k], k)
                counts[k] = 1
            else:
                values[k + 1], inflow[k], outflow[k] = stepper.step(values[k], k)
                counts[k] = 1
        except (BoundViolation, NonConvergence, NoContraction) as exc:
            raise type(exc)(f"{exc} (while advancing step {k})") from exc
    values.setflags(write=False)
    return SolutionField(values=values, grid=grid, time_grid=time_grid,
                         inflow_totals=inflow, outflow_totals=outflow,
                         picard_counts=counts, step_residuals=resids)


def solve_reaction(params: ReactionParams, grid: Grid, time_grid: TimeGrid, *,
                   mode: str = "strict", stepping: str = "imex",
                   enforce_restriction: bool = True,
                   picard_tol: float = 1e-10, picard_max_iter: int = 50) -> SolutionField:
    """Integrate the reaction model over the full time grid.

    Deterministic: identical inputs produce bit-identical trajectories.
    ``stepping`` is ``"imex"`` (default, single linear solve per step) or
    ``"picard"`` (fixed point of the linearized map per step).
    """
    if params.kind != "reaction":
        raise TypeError("solve_reaction needs ReactionParams")
    return _run(params, grid, time_grid, stepping, mode, enforce_restriction,
                picard_tol, picard_max_iter)


def solve_flowthrough(params: FlowthroughParams, grid: Grid, time_grid: TimeGrid, *,
                      mode: str = "strict", stepping: str = "imex",
                      enforce_restriction: bool = True,
                      picard_tol: float = 1e-10, picard_max_iter: int = 50) -> SolutionField:
    """Integrate the flowthrough model, logging per-step boundary flux totals."""
    if params.kind != "flowthrough":
        raise TypeError("solve_flowthrough needs FlowthroughParams")
    return _run(params, grid, time_grid, stepping, mode, enforce_restriction,
                picard_tol, picard_max_iter)


def solve(params, grid, time_grid, **kwargs) -> SolutionField:
    """Dispatch on the parameter kind."""
    if params.kind == "reaction":
        return solve_reaction(params, grid, time_grid, **kwargs)
    return solve_flowthrough(params, grid, time_grid, **kwargs)
