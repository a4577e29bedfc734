"""Structured finite-volume grids (1-D intervals, 2-D rectangles) with tagged boundary faces.

Cells are axis-aligned and uniform per axis.  Boundary faces carry one of
three tags (inflow, outflow, wall); tags are assigned per whole edge or per
face-aligned sub-interval of an edge.  Grids are immutable after
construction and safe to share between concurrent solves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .errors import BoundarySpecError, EmptyOutflow, OverlappingBoundarySpec


class BoundaryTag(Enum):
    INFLOW = "inflow"
    OUTFLOW = "outflow"
    WALL = "wall"


_EDGES = {1: ("left", "right"), 2: ("left", "right", "bottom", "top")}

_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class BoundaryFace:
    """One boundary face: owning cell, surface measure, edge name, center."""

    cell: int
    area: float
    edge: str
    center: tuple
    tag: BoundaryTag


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid over a box domain.

    Interior faces are stored as parallel arrays ``face_left``/``face_right``
    (cell ids on either side, in canonical order: all x-normal faces, then
    y-normal), with per-face surface measure ``face_area`` and center
    distance ``face_dist``.
    """

    dim: int
    cells_per_axis: tuple
    domain_extent: tuple
    spacing: tuple
    cell_volume: float
    n_cells: int
    face_left: np.ndarray
    face_right: np.ndarray
    face_area: np.ndarray
    face_dist: np.ndarray
    boundary_faces: tuple
    _centers: np.ndarray = field(repr=False, default=None)

    # -- derived views ---------------------------------------------------

    def cell_centers(self) -> np.ndarray:
        """(n_cells, dim) array of cell center coordinates."""
        return self._centers

    def faces_with_tag(self, tag: BoundaryTag):
        """(cells, areas) arrays of the boundary faces carrying ``tag``."""
        sel = [f for f in self.boundary_faces if f.tag is tag]
        cells = np.array([f.cell for f in sel], dtype=np.int64)
        areas = np.array([f.area for f in sel], dtype=float)
        return cells, areas

    def boundary_measure(self, tag: BoundaryTag) -> float:
        """Total surface measure of the faces tagged ``tag``."""
        return float(sum(f.area for f in self.boundary_faces if f.tag is tag))

    @property
    def boundary_tags(self) -> tuple:
        """Tag of each boundary face, aligned with ``boundary_faces``."""
        return tuple(f.tag for f in self.boundary_faces)

    def require_outflow(self) -> None:
        """Raise :class:`EmptyOutflow` unless some face is tagged outflow.

        Flowthrough problems need a nonempty outflow boundary (H2'); the
        check is deferred to solve time so the same grid can serve
        reaction-type problems.
        """
        if not any(f.tag is BoundaryTag.OUTFLOW for f in self.boundary_faces):
            raise EmptyOutflow("grid has no outflow faces [H2']")

    def region_cells(self, lo: Sequence[float], hi: Sequence[float]) -> np.ndarray:
        """Ids of cells whose centers lie in the closed box [lo, hi]."""
        c = self._centers
        mask = np.ones(self.n_cells, dtype=bool)
        for ax in range(self.dim):
            mask &= (c[:, ax] >= lo[ax] - _ALIGN_TOL) & (c[:, ax] <= hi[ax] + _ALIGN_TOL)
        return np.nonzero(mask)[0]

    def neighbor(self, cell: int, face_index: int) -> int:
        """Cell on the other side of interior face ``face_index``."""
        if self.face_left[face_index] == cell:
            return int(self.face_right[face_index])
        if self.face_right[face_index] == cell:
            return int(self.face_left[face_index])
        raise ValueError(f"cell {cell} is not adjacent to face {face_index}")


def _parse_edge_spec(spec, edge, n_faces, h, extent):
    """Resolve one edge's spec into a per-face tag list.

    ``spec`` is either a tag name or a list of ``(tag, lo, hi)`` segments
    with endpoints aligned to face boundaries.  Returns a list of
    ``BoundaryTag`` or ``None`` (unassigned -> wall).
    """
    tags = [None] * n_faces
    if spec is None:
        return tags
    if isinstance(spec, (str, BoundaryTag)):
        t = BoundaryTag(spec) if isinstance(spec, str) else spec
        return [t] * n_faces
    for seg in spec:
        t, lo, hi = seg
        t = BoundaryTag(t) if isinstance(t, str) else t
        if not (0.0 - _ALIGN_TOL <= lo < hi <= extent + _ALIGN_TOL):
            raise BoundarySpecError(f"segment [{lo}, {hi}] outside edge '{edge}'")
        ilo, ihi = lo / h, hi / h
        if abs(ilo - round(ilo)) > _ALIGN_TOL or abs(ihi - round(ihi)) > _ALIGN_TOL:
            raise BoundarySpecError(
                f"segment [{lo}, {hi}] on edge '{edge}' is not aligned to cell faces"
            )
        for m in range(int(round(ilo)), int(round(ihi))):
            prev = tags[m]
            if prev is not None and prev is not t:
                if {prev, t} == {BoundaryTag.INFLOW, BoundaryTag.OUTFLOW}:
                    raise OverlappingBoundarySpec(
                        f"inflow and outflow overlap on edge '{edge}' [H2']"
                    )
                raise BoundarySpecError(f"conflicting tags on edge '{edge}' at face {m}")
            tags[m] = t
    return tags


def build_grid(dim, cells_per_axis, domain_extent, boundary_spec=None) -> Grid:
    """Build a uniform grid with tagged boundary faces.

    Parameters
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    cells_per_axis : int or sequence of int
        Number of cells per axis (>= 2 each).
    domain_extent : float or sequence of float
        Box side lengths (> 0 each); the domain is ``[0, L1] x [0, L2]``.
    boundary_spec : dict, optional
        Maps edge names (``left``/``right`` in 1-D, plus ``bottom``/``top``
        in 2-D) to a tag name or to a list of ``(tag, lo, hi)`` segments
        aligned to cell faces.  Unspecified faces are walls.

    The construction is deterministic: identical inputs yield bit-identical
    grids, with faces listed in a fixed canonical order.
    """
    if dim not in (1, 2):
        raise ValueError("only dim = 1 or 2 is supported")
    cells = tuple(int(c) for c in np.atleast_1d(cells_per_axis))
    extent = tuple(float(e) for e in np.atleast_1d(domain_extent))
    if len(cells) != dim or len(extent) != dim:
        raise ValueError("cells_per_axis / domain_extent must match dim")
    if any(c < 2 for c in cells):
        raise ValueError("need at least 2 cells per axis")
    if any(e <= 0 for e in extent):
        raise ValueError("domain extents must be positive")
    spacing = tuple(e / c for e, c in zip(extent, cells))
    cell_volume = float(np.prod(spacing))
    boundary_spec = dict(boundary_spec or {})
    unknown = set(boundary_spec) - set(_EDGES[dim])
    if unknown:
        raise BoundarySpecError(f"unknown edges in boundary spec: {sorted(unknown)}")

    if dim == 1:
        (nx,), (dx,) = cells, spacing
        n = nx
        centers = ((np.arange(nx) + 0.5) * dx)[:, None]
        fl = np.arange(nx - 1, dtype=np.int64)
        fr = fl + 1
        fa = np.ones(nx - 1)
        fd = np.full(nx - 1, dx)
        bfaces = []
        for edge, cell, x in (("left", 0, 0.0), ("right", nx - 1, extent[0])):
            tag = _parse_edge_spec(boundary_spec.get(edge), edge, 1, extent[0], extent[0])[0]
            bfaces.append(
                BoundaryFace(cell, 1.0, edge, (x,), tag or BoundaryTag.WALL)
            )
    else:
        (nx, ny), (dx, dy) = cells, spacing
        n = nx * ny
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        # canonical cell id: x varies fastest
        cid = (iy * nx + ix).ravel()
        order = np.argsort(cid)
        centers = np.column_stack(
            [((ix.ravel() + 0.5) * dx)[order], ((iy.ravel() + 0.5) * dy)[order]]
        )

        def cell_id(i, j):
            return j * nx + i

        fls, frs, fas, fds = [], [], [], []
        for j in range(ny):  # x-normal interior faces
            for i in range(nx - 1):
                fls.append(cell_id(i, j))
                frs.append(cell_id(i + 1, j))
                fas.append(dy)
                fds.append(dx)
        for j in range(ny - 1):  # y-normal interior faces
            for i in range(nx):
                fls.append(cell_id(i, j))
                frs.append(cell_id(i, j + 1))
                fas.append(dx)
                fds.append(dy)
        fl = np.array(fls, dtype=np.int64)
        fr = np.array(frs, dtype=np.int64)
        fa = np.array(fas, dtype=float)
        fd = np.array(fds, dtype=float)

        bfaces = []
        edge_geo = {
            "left": (ny, dy, extent[1], lambda m: (cell_id(0, m), (0.0, (m + 0.5) * dy))),
            "right": (ny, dy, extent[1], lambda m: (cell_id(nx - 1, m), (extent[0], (m + 0.5) * dy))),
            "bottom": (nx, dx, extent[0], lambda m: (cell_id(m, 0), ((m + 0.5) * dx, 0.0))),
            "top": (nx, dx, extent[0], lambda m: (cell_id(m, ny - 1), ((m + 0.5) * dx, extent[1]))),
        }
        for edge in _EDGES[2]:
            n_faces, h, ext, locate = edge_geo[edge]
            tags = _parse_edge_spec(boundary_spec.get(edge), edge, n_faces, h, ext)
            area = dy if edge in ("left", "right") else dx
            for m in range(n_faces):
                cell, center = locate(m)
                bfaces.append(
                    BoundaryFace(cell, area, edge, center, tags[m] or BoundaryTag.WALL)
                )

    total = cell_volume * n
    if abs(total - np.prod(extent)) > 1e-12 * np.prod(extent):
        raise ValueError("cell volumes do not tile the domain")

    for arr in (fl, fr, fa, fd, centers):
        arr.setflags(write=False)
    return Grid(
        dim=dim,
        cells_per_axis=cells,
        domain_extent=extent,
        spacing=spacing,
        cell_volume=cell_volume,
        n_cells=n,
        face_left=fl,
        face_right=fr,
        face_area=fa,
        face_dist=fd,
        boundary_faces=tuple(bfaces),
        _centers=centers,
    )


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time discretization of [0, T] with revelation stages.

    ``stage_boundaries`` partitions [0, T] into the intervals on which
    random coefficients are revealed; every stage boundary must coincide
    with a step time.
    """

    t_final: float
    num_steps: int
    step_size: float
    stage_boundaries: tuple

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.num_steps + 1) * self.step_size

    @property
    def n_stages(self) -> int:
        return len(self.stage_boundaries) - 1

    def step_index(self, t: float) -> int:
        """Index k with t_k == t, or raise ``ValueError``."""
        k = t / self.step_size
        if abs(k - round(k)) > 1e-9 or not (0 <= round(k) <= self.num_steps):
            raise ValueError(f"time {t} is not a step time")
        return int(round(k))

    def stage_of_times(self) -> np.ndarray:
        """Stage index of every step time (final time joins the last stage)."""
        idx = np.searchsorted(np.asarray(self.stage_boundaries), self.times, side="right") - 1
        return np.clip(idx, 0, self.n_stages - 1)


def build_time_grid(t_final, num_steps, stage_boundaries=None) -> TimeGrid:
    """Build a :class:`TimeGrid`; stages default to the single interval [0, T]."""
    t_final = float(t_final)
    num_steps = int(num_steps)
    if t_final <= 0 or num_steps < 1:
        raise ValueError("need t_final > 0 and num_steps >= 1")
    dt = t_final / num_steps
    if stage_boundaries is None:
        stage_boundaries = (0.0, t_final)
    sb = tuple(float(s) for s in stage_boundaries)
    if sb[0] != 0.0 or abs(sb[-1] - t_final) > 1e-12 * max(1.0, t_final):
        raise ValueError("stage boundaries must start at 0 and end at t_final")
    if any(b <= a for a, b in zip(sb, sb[1:])):
        raise ValueError("stage boundaries must be strictly increasing")
    for s in sb:
        k = s / dt
        if abs(k - round(k)) > 1e-9:
            raise ValueError(f"stage boundary {s} does not coincide with a step time")
    if abs(dt * num_steps - t_final) > 1e-12 * t_final:
        raise ValueError("inconsistent step size")
    return TimeGrid(t_final=t_final, num_steps=num_steps, step_size=dt, stage_boundaries=sb)
