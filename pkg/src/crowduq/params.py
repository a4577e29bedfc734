"""Coefficient sets for the two density models, with hypothesis validation.

The *reaction* model creates and removes mass in the bulk,

    du/dt + div(-grad u + f(u) grad V) = source_rate * f(u) - decay_rate * u,

with zero total flux through the boundary.  The *flowthrough* model keeps
the interior conservative and exchanges mass through tagged boundary faces:
``entry_rate * g(u)`` enters on inflow faces and ``exit_rate * u`` leaves on
outflow faces.

Space-time coefficients are sampled at every step time; validation checks
the admissibility hypotheses (labels H1-H4 for the reaction model, H1'-H5'
for flowthrough) either strictly or in a relaxed test mode.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import HypothesisViolation
from .grid import BoundaryTag, Grid, TimeGrid

_MOBILITY_SAMPLES = 257


@dataclass(frozen=True)
class MobilityFunction:
    """Nonlinear mobility f with certified Lipschitz constant.

    Volume-filling mobilities satisfy f(0) = f(1) = 0 and f >= 0 on (0, 1),
    which is what confines densities to [0, 1].
    """

    func: Callable[[np.ndarray], np.ndarray]
    lipschitz_constant: float
    name: str = "custom"

    def __call__(self, s):
        return self.func(np.asarray(s, dtype=float))

    @property
    def volume_filling(self) -> bool:
        return abs(float(self.func(np.float64(0.0)))) < 1e-14 and abs(
            float(self.func(np.float64(1.0)))
        ) < 1e-14

    def slope_at_zero(self) -> float:
        eps = 1e-8
        return float(self.func(np.float64(eps))) / eps

    def face_flux_density(self, donor, receiver):
        """Upwinded face mobility.

        For volume-filling f the flux density is ``donor * f(receiver) /
        receiver`` (continuously extended at receiver = 0).  It agrees with
        f on diagonal arguments, vanishes when the donor cell is empty and
        when the receiving cell is full; for the logistic mobility it
        reduces to the classical ``donor * (1 - receiver)``.  Plain donor
        upwinding f(donor) only keeps densities below 1 when the drift
        cannot push mass into saturated cells, so it is used solely for
        non-volume-filling test mobilities.
        """
        donor = np.asarray(donor, dtype=float)
        receiver = np.asarray(receiver, dtype=float)
        if not self.volume_filling:
            return self.func(donor)
        tiny = 1e-12
        safe = np.maximum(receiver, tiny)
        ratio = np.where(receiver > tiny, self.func(safe) / safe, self.slope_at_zero())
        return donor * ratio


@dataclass(frozen=True)
class GateFunction:
    """Entry gate g: monotonically decreasing with g(0) = 1, g(1) = 0."""

    func: Callable[[np.ndarray], np.ndarray]
    lipschitz_constant: float
    name: str = "custom"

    def __call__(self, s):
        return self.func(np.asarray(s, dtype=float))


def logistic_mobility() -> MobilityFunction:
    """f(s) = s (1 - s), the canonical volume-filling choice."""
    return MobilityFunction(lambda s: s * (1.0 - s), lipschitz_constant=1.0, name="logistic")


def zero_mobility() -> MobilityFunction:
    """f = 0: no drift and no density-gated creation (linear decay only)."""
    return MobilityFunction(lambda s: np.zeros_like(np.asarray(s, dtype=float)),
                            lipschitz_constant=0.0, name="zero")


def constant_mobility(value: float = 1.0) -> MobilityFunction:
    """f = const: test-mode mobility that turns the creation term into a free source."""
    return MobilityFunction(lambda s, v=float(value): np.full_like(np.asarray(s, dtype=float), v),
                            lipschitz_constant=0.0, name=f"constant({value})")


def linear_gate() -> GateFunction:
    """g(s) = 1 - s: entry proportional to available space."""
    return GateFunction(lambda s: 1.0 - s, lipschitz_constant=1.0, name="linear")


def _as_space_time(value, n_steps, n_points) -> np.ndarray:
    """Broadcast scalars / spatial fields / full arrays to shape (K+1, n)."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full((n_steps + 1, n_points), float(arr))
    elif arr.ndim == 1:
        if arr.shape[0] != n_points:
            raise ValueError(f"spatial field has {arr.shape[0]} entries, expected {n_points}")
        arr = np.broadcast_to(arr, (n_steps + 1, n_points)).copy()
    elif arr.shape != (n_steps + 1, n_points):
        raise ValueError(f"space-time field has shape {arr.shape}, expected {(n_steps + 1, n_points)}")
    else:
        arr = arr.copy()
    return arr


def sample_space_time(fn, grid: Grid, time_grid: TimeGrid) -> np.ndarray:
    """Sample a callable fn(t, x) on all step times and cell centers."""
    times = time_grid.times
    centers = grid.cell_centers()
    out = np.empty((len(times), grid.n_cells))
    for k, t in enumerate(times):
        out[k] = np.asarray([fn(t, tuple(x)) for x in centers], dtype=float)
    return out


@dataclass(frozen=True)
class ReactionParams:
    """Coefficients (source_rate, decay_rate, potential, mobility, initial_density).

    Arrays are shaped (num_steps + 1, n_cells); ``initial_density`` is a
    cell field in [0, 1].
    """

    source_rate: np.ndarray
    decay_rate: np.ndarray
    potential: np.ndarray
    mobility: MobilityFunction
    initial_density: np.ndarray

    kind = "reaction"

    def freeze(self):
        for arr in (self.source_rate, self.decay_rate, self.potential, self.initial_density):
            arr.setflags(write=False)
        return self

    def with_fields(self, **deltas) -> "ReactionParams":
        return replace(self, **deltas).freeze()


@dataclass(frozen=True)
class FlowthroughParams:
    """Coefficients (entry_rate, exit_rate, potential, mobility, gate, initial_density).

    ``entry_rate`` / ``exit_rate`` live on the inflow / outflow boundary
    faces, shaped (num_steps + 1, n_faces) in the grid's canonical face
    order.
    """

    entry_rate: np.ndarray
    exit_rate: np.ndarray
    potential: np.ndarray
    mobility: MobilityFunction
    gate: GateFunction
    initial_density: np.ndarray

    kind = "flowthrough"

    def freeze(self):
        for arr in (self.entry_rate, self.exit_rate, self.potential, self.initial_density):
            arr.setflags(write=False)
        return self

    def with_fields(self, **deltas) -> "FlowthroughParams":
        return replace(self, **deltas).freeze()


def make_reaction_params(grid, time_grid, source_rate, decay_rate, potential,
                         mobility, initial_density) -> ReactionParams:
    """Assemble reaction coefficients, broadcasting scalars and spatial fields."""
    k, n = time_grid.num_steps, grid.n_cells
    u0 = np.broadcast_to(np.asarray(initial_density, dtype=float), (n,)).copy()
    return ReactionParams(
        source_rate=_as_space_time(source_rate, k, n),
        decay_rate=_as_space_time(decay_rate, k, n),
        potential=_as_space_time(potential, k, n),
        mobility=mobility,
        initial_density=u0,
    ).freeze()


def make_flowthrough_params(grid, time_grid, entry_rate, exit_rate, potential,
                            mobility, gate, initial_density) -> FlowthroughParams:
    """Assemble flowthrough coefficients on the grid's tagged boundary faces."""
    k, n = time_grid.num_steps, grid.n_cells
    n_in = len(grid.faces_with_tag(BoundaryTag.INFLOW)[0])
    n_out = len(grid.faces_with_tag(BoundaryTag.OUTFLOW)[0])
    u0 = np.broadcast_to(np.asarray(initial_density, dtype=float), (n,)).copy()
    return FlowthroughParams(
        entry_rate=_as_space_time(entry_rate, k, max(n_in, 0)) if n_in else np.zeros((k + 1, 0)),
        exit_rate=_as_space_time(exit_rate, k, max(n_out, 0)) if n_out else np.zeros((k + 1, 0)),
        potential=_as_space_time(potential, k, n),
        mobility=mobility,
        gate=gate,
        initial_density=u0,
    ).freeze()


def face_gradient(field_slice: np.ndarray, grid: Grid) -> np.ndarray:
    """Two-point gradient across each interior face for one time slice."""
    return (field_slice[..., grid.face_right] - field_slice[..., grid.face_left]) / grid.face_dist


def discrete_laplacian(field_slice: np.ndarray, grid: Grid) -> np.ndarray:
    """Cell-wise finite-volume Laplacian with zero-flux closure at the boundary."""
    jump = (field_slice[grid.face_right] - field_slice[grid.face_left]) / grid.face_dist
    flux = jump * grid.face_area
    div = np.bincount(grid.face_left, weights=flux, minlength=grid.n_cells)
    div -= np.bincount(grid.face_right, weights=flux, minlength=grid.n_cells)
    return div / grid.cell_volume


def _check_mobility(mobility: MobilityFunction, strict: bool):
    s = np.linspace(0.0, 1.0, _MOBILITY_SAMPLES)
    vals = mobility(s)
    if strict:
        if abs(vals[0]) > 1e-12 or abs(vals[-1]) > 1e-12:
            raise HypothesisViolation("H4", "mobility must vanish at densities 0 and 1")
        if np.any(vals < -1e-12):
            raise HypothesisViolation("H4", "mobility must be nonnegative on [0, 1]")
    # Lipschitz spot check applies in both modes: the declared constant is
    # used by the step restriction and the stability bounds.
    rng = np.random.default_rng(0)
    x, y = rng.uniform(0, 1, (2, 64))
    lhs = np.abs(mobility(x) - mobility(y))
    if np.any(lhs > mobility.lipschitz_constant * np.abs(x - y) + 1e-9):
        raise HypothesisViolation("H4", "declared mobility Lipschitz constant is too small")


def _check_gate(gate: GateFunction, strict: bool):
    s = np.linspace(0.0, 1.0, _MOBILITY_SAMPLES)
    vals = gate(s)
    if strict:
        if abs(vals[0] - 1.0) > 1e-12 or abs(vals[-1]) > 1e-12:
            raise HypothesisViolation("H3'", "gate must satisfy g(0) = 1 and g(1) = 0")
        if np.any(np.diff(vals) > 1e-12):
            raise HypothesisViolation("H3'", "gate must be monotonically decreasing")
    rng = np.random.default_rng(1)
    x, y = rng.uniform(0, 1, (2, 64))
    if np.any(np.abs(gate(x) - gate(y)) > gate.lipschitz_constant * np.abs(x - y) + 1e-9):
        raise HypothesisViolation("H3'", "declared gate Lipschitz constant is too small")


def validate_params(params, grid: Grid, time_grid: TimeGrid, mode: str = "strict") -> None:
    """Check the admissibility hypotheses of a parameter set.

    ``mode`` is ``"strict"`` (all hypotheses enforced) or ``"relaxed"``
    (positivity floors, mobility/gate endpoint conditions and the harmonic
    potential constraint are skipped or downgraded to warnings, so that
    analytic edge-case oracles remain expressible).
    """
    if mode not in ("strict", "relaxed"):
        raise ValueError("mode must be 'strict' or 'relaxed'")
    strict = mode == "strict"
    u0 = params.initial_density
    if u0.shape != (grid.n_cells,):
        raise HypothesisViolation("H1", "initial density does not match the grid")
    label0 = "H1" if params.kind == "reaction" else "H1'"
    if np.any(u0 < -1e-12) or np.any(u0 > 1 + 1e-12):
        raise HypothesisViolation(label0, "initial density must lie in [0, 1]")
    if not np.all(np.isfinite(params.potential)):
        raise HypothesisViolation("H2", "potential must be bounded")

    if params.kind == "reaction":
        _check_mobility(params.mobility, strict)
        if strict:
            if params.source_rate.min() <= 0:
                raise HypothesisViolation("H3", "source rate must have a positive lower bound")
            if params.decay_rate.min() <= 0:
                raise HypothesisViolation("H3", "decay rate must have a positive lower bound")
        return

    # flowthrough
    _check_mobility(params.mobility, strict)
    _check_gate(params.gate, strict)
    a, b = params.entry_rate, params.exit_rate
    if strict:
        grid.require_outflow()
        if a.size and (a.min() <= 0 or a.max() > 1 + 1e-12):
            raise HypothesisViolation("H4'", "entry rate must satisfy 0 < a <= 1")
        if b.size and (b.min() <= 0 or b.max() > 1 + 1e-12):
            raise HypothesisViolation("H4'", "exit rate must satisfy 0 < b <= 1")
    # harmonic potential: exact for linear-in-x potentials, which the
    # strict mode is meant to certify
    lap = np.stack([discrete_laplacian(params.potential[k], grid)
                    for k in range(0, params.potential.shape[0], max(1, params.potential.shape[0] // 8))])
    scale = max(1.0, float(np.abs(params.potential).max()))
    worst = float(np.abs(lap).max()) if lap.size else 0.0
    if worst > 1e-8 * scale:
        if strict:
            raise HypothesisViolation("H5'", f"potential is not discretely harmonic (max |lap V| = {worst:.3e})")
        warnings.warn(f"potential is not discretely harmonic (max |lap V| = {worst:.3e}) [H5']",
                      stacklevel=2)
