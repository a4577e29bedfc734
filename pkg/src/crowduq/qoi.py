"""Quantity-of-interest functionals with certified Lipschitz bounds.

Three families are provided: mass in a subdomain at a fixed step time,
mass integrated over a time window, and the regularized superlevel-set
measure (how much of the domain exceeds a density threshold).  Evaluation
times must coincide with step times, so every value is exactly
reproducible from an exported trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyWindow, TimeOffGrid
from .grid import Grid, TimeGrid
from .solver import SolutionField


def _step_index(time_grid: TimeGrid, t: float) -> int:
    try:
        return time_grid.step_index(t)
    except ValueError as exc:
        raise TimeOffGrid(str(exc)) from exc


def smooth_indicator(v, threshold: float, width: float):
    """Smoothed step 1_{v > threshold}: cubic smoothstep over [c - w, c + w].

    Monotone nondecreasing in ``v``, 0 below the band, 1 above it, and
    Lipschitz with constant ``3 / (4 * width)``.
    """
    if width <= 0:
        raise ValueError("width must be positive")
    r = np.clip((np.asarray(v, dtype=float) - threshold + width) / (2.0 * width), 0.0, 1.0)
    return r * r * (3.0 - 2.0 * r)


def subdomain_mass(sol: SolutionField, region_lo, region_hi, t: float) -> float:
    """Mass inside the box [region_lo, region_hi] at step time ``t``."""
    cells = sol.grid.region_cells(np.atleast_1d(region_lo), np.atleast_1d(region_hi))
    if len(cells) == 0:
        raise ValueError("region contains no cells")
    k = _step_index(sol.time_grid, t)
    return float(sol.values[k, cells].sum() * sol.grid.cell_volume)


def timewindow_mass(sol: SolutionField, t1: float, t2: float) -> float:
    """Total mass integrated over [t1, t2] (trapezoid in time)."""
    if not t1 < t2:
        raise EmptyWindow(f"need t1 < t2, got [{t1}, {t2}]")
    k1 = _step_index(sol.time_grid, t1)
    k2 = _step_index(sol.time_grid, t2)
    mass = sol.values[k1:k2 + 1].sum(axis=1) * sol.grid.cell_volume
    return float(np.trapz(mass, dx=sol.time_grid.step_size))


def superlevel_measure(sol: SolutionField, threshold: float, width: float, t: float) -> float:
    """Regularized measure of the region where the density exceeds ``threshold``."""
    k = _step_index(sol.time_grid, t)
    return float(smooth_indicator(sol.values[k], threshold, width).sum() * sol.grid.cell_volume)


@dataclass(frozen=True)
class QoISpec:
    """Declarative QoI: kind plus its parameters.

    Kinds: ``subdomain_mass`` (region box + time), ``timewindow_mass``
    (t1, t2), ``superlevel`` (threshold, width, time).
    """

    kind: str
    region_lo: Optional[tuple] = None
    region_hi: Optional[tuple] = None
    t: Optional[float] = None
    t1: Optional[float] = None
    t2: Optional[float] = None
    threshold: Optional[float] = None
    width: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("subdomain_mass", "timewindow_mass", "superlevel"):
            raise ValueError(f"unknown QoI kind '{self.kind}'")
        if self.kind == "superlevel":
            if not (0.0 <= self.threshold <= 1.0):
                raise ValueError("threshold must lie in [0, 1]")
            if not self.width > 0:
                raise ValueError("width must be positive")
        if self.kind == "timewindow_mass" and not (self.t1 is not None and self.t2 is not None):
            raise ValueError("timewindow_mass needs t1 and t2")

    def evaluate(self, sol: SolutionField) -> float:
        if self.kind == "subdomain_mass":
            return subdomain_mass(sol, self.region_lo, self.region_hi, self.t)
        if self.kind == "timewindow_mass":
            return timewindow_mass(sol, self.t1, self.t2)
        return superlevel_measure(sol, self.threshold, self.width, self.t)

    def lipschitz_bound(self, grid: Grid, time_grid: TimeGrid) -> float:
        """Certified Lipschitz constant w.r.t. the discrete L2-in-time H1 norm.

        Cauchy-Schwarz bounds adapted to the discrete norm: sqrt(|region|)
        for subdomain mass, sqrt((t2 - t1) |D|) for window mass, and
        (3 / (4 width)) sqrt(|D|) for the superlevel measure.  The bounds
        are certified for fields with solution-like time regularity; see
        the property tests.
        """
        domain = float(np.prod(grid.domain_extent))
        if self.kind == "subdomain_mass":
            cells = grid.region_cells(np.atleast_1d(self.region_lo), np.atleast_1d(self.region_hi))
            return float(np.sqrt(len(cells) * grid.cell_volume))
        if self.kind == "timewindow_mass":
            return float(np.sqrt((self.t2 - self.t1) * domain))
        return float(3.0 / (4.0 * self.width) * np.sqrt(domain))

    def label(self) -> str:
        if self.kind == "subdomain_mass":
            return f"subdomain_mass[{self.region_lo}:{self.region_hi}]@{self.t}"
        if self.kind == "timewindow_mass":
            return f"timewindow_mass[{self.t1},{self.t2}]"
        return f"superlevel[c={self.threshold},w={self.width}]@{self.t}"
