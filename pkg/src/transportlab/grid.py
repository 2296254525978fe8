"""Cell-centered phase-space grid and boundary-facet machinery.

The computational domain is a product of a spatial box and a velocity box,
both discretized with uniform cell-centered cells.  Spatial boundary faces
combined with velocity cells form "facets"; each facet is classified as
outgoing (n.v > 0), incoming (n.v < 0) or glancing (n.v == 0 up to a
tolerance), and carries the surface-measure weight

    sigma = |n.v| * (face area) * (velocity cell volume)

used by all boundary trace norms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridError",
    "PhaseGrid",
    "BoundaryFacet",
    "FacetBundle",
    "BoundaryPartition",
    "build_grid",
    "classify_boundary",
    "surface_norm_sq",
    "phase_norm_sq",
    "kahan_sum",
]


class GridError(ValueError):
    """Raised for inconsistent grid configuration."""


def kahan_sum(values) -> float:
    """Compensated summation (Neumaier variant) in the given fixed order.

    Used for the outermost reductions of all norms so that results are
    bit-reproducible and independent of any worker decomposition.
    """
    total = 0.0
    comp = 0.0
    for v in np.asarray(values, dtype=float).ravel():
        v = float(v)
        t = total + v
        if abs(total) >= abs(v):
            comp += (total - t) + v
        else:
            comp += (v - t) + total
        total = t
    return total + comp


@dataclass(frozen=True)
class PhaseGrid:
    """Uniform cell-centered discretization of (spatial box) x (velocity box).

    Cell centers are at lo + (i + 1/2) * d.  For symmetric velocity extents
    and even counts no center falls on a zero-velocity axis, so facet
    classification needs no floating-point tie-breaking.
    """

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    vx_lo: float
    vx_hi: float
    vy_lo: float
    vy_hi: float
    nx: int
    ny: int
    nvx: int
    nvy: int
    dx: float = field(init=False)
    dy: float = field(init=False)
    dvx: float = field(init=False)
    dvy: float = field(init=False)

    def __post_init__(self):
        for name, n in (("nx", self.nx), ("ny", self.ny),
                        ("nvx", self.nvx), ("nvy", self.nvy)):
            if int(n) != n or n < 2:
                raise GridError(f"cell count {name}={n} must be an integer >= 2")
        for name, lo, hi in (("x", self.x_lo, self.x_hi),
                             ("y", self.y_lo, self.y_hi),
                             ("vx", self.vx_lo, self.vx_hi),
                             ("vy", self.vy_lo, self.vy_hi)):
            if not lo < hi:
                raise GridError(f"extent {name}: lo={lo} must be < hi={hi}")
        object.__setattr__(self, "dx", (self.x_hi - self.x_lo) / self.nx)
        object.__setattr__(self, "dy", (self.y_hi - self.y_lo) / self.ny)
        object.__setattr__(self, "dvx", (self.vx_hi - self.vx_lo) / self.nvx)
        object.__setattr__(self, "dvy", (self.vy_hi - self.vy_lo) / self.nvy)

    # -- center coordinates ------------------------------------------------
    def x_centers(self) -> np.ndarray:
        return self.x_lo + (np.arange(self.nx) + 0.5) * self.dx

    def y_centers(self) -> np.ndarray:
        return self.y_lo + (np.arange(self.ny) + 0.5) * self.dy

    def vx_centers(self) -> np.ndarray:
        return self.vx_lo + (np.arange(self.nvx) + 0.5) * self.dvx

    def vy_centers(self) -> np.ndarray:
        return self.vy_lo + (np.arange(self.nvy) + 0.5) * self.dvy

    @property
    def shape(self) -> tuple:
        return (self.nx, self.ny, self.nvx, self.nvy)

    @property
    def cell_volume(self) -> float:
        """Phase-space volume of a single cell."""
        return self.dx * self.dy * self.dvx * self.dvy

    @property
    def spatial_diameter(self) -> float:
        return float(np.hypot(self.x_hi - self.x_lo, self.y_hi - self.y_lo))

    @property
    def v_max(self) -> float:
        """Largest velocity-component magnitude of the box."""
        return max(abs(self.vx_lo), abs(self.vx_hi),
                   abs(self.vy_lo), abs(self.vy_hi))

    def meshgrid(self):
        """Broadcastable center arrays (X, Y, VX, VY) of the 4D cell lattice."""
        x = self.x_centers()[:, None, None, None]
        y = self.y_centers()[None, :, None, None]
        vx = self.vx_centers()[None, None, :, None]
        vy = self.vy_centers()[None, None, None, :]
        return x, y, vx, vy


def build_grid(x=(0.0, 1.0), y=(0.0, 1.0), v_x=(-6.0, 6.0), v_y=(-6.0, 6.0),
               nx=48, ny=48, nvx=24, nvy=24) -> PhaseGrid:
    """Construct a PhaseGrid, validating counts and extents."""
    return PhaseGrid(x_lo=float(x[0]), x_hi=float(x[1]),
                     y_lo=float(y[0]), y_hi=float(y[1]),
                     vx_lo=float(v_x[0]), vx_hi=float(v_x[1]),
                     vy_lo=float(v_y[0]), vy_hi=float(v_y[1]),
                     nx=int(nx), ny=int(ny), nvx=int(nvx), nvy=int(nvy))


@dataclass(frozen=True)
class BoundaryFacet:
    """One (spatial face, velocity cell) pair on the phase-space boundary."""

    axis: int            # 0: face normal along x, 1: along y
    side: int            # 0: low face, 1: high face
    tangential: int      # index along the face (j for x-faces, i for y-faces)
    iv: int              # velocity cell index along vx
    jv: int              # velocity cell index along vy
    normal: tuple        # outward unit normal (2,)
    v_center: tuple      # velocity cell center (2,)
    n_dot_v: float
    sigma_weight: float


class FacetBundle:
    """Vectorized view of one facet partition, in a fixed enumeration order.

    Enumeration: spatial faces in order (x-low, x-high, y-low, y-high), each
    tangential index ascending, then velocity cells row-major (iv, jv).
    """

    def __init__(self, grid: PhaseGrid, axis, side, tang, iv, jv):
        self.grid = grid
        self.axis = np.asarray(axis, dtype=np.intp)
        self.side = np.asarray(side, dtype=np.intp)
        self.tang = np.asarray(tang, dtype=np.intp)
        self.iv = np.asarray(iv, dtype=np.intp)
        self.jv = np.asarray(jv, dtype=np.intp)

        xc, yc = grid.x_centers(), grid.y_centers()
        vxc, vyc = grid.vx_centers(), grid.vy_centers()

        # facet center (on the spatial face) and velocity at the facet
        self.fx = np.where(self.axis == 0,
                           np.where(self.side == 0, grid.x_lo, grid.x_hi),
                           xc[np.minimum(self.tang, grid.nx - 1)])
        self.fy = np.where(self.axis == 0,
                           yc[np.minimum(self.tang, grid.ny - 1)],
                           np.where(self.side == 0, grid.y_lo, grid.y_hi))
        self.vx = vxc[self.iv]
        self.vy = vyc[self.jv]

        sign = np.where(self.side == 0, -1.0, 1.0)
        self.n1 = np.where(self.axis == 0, sign, 0.0)
        self.n2 = np.where(self.axis == 0, 0.0, sign)
        self.n_dot_v = self.n1 * self.vx + self.n2 * self.vy

        face_area = np.where(self.axis == 0, grid.dy, grid.dx)
        self.sigma = np.abs(self.n_dot_v) * face_area * grid.dvx * grid.dvy

        # flat indices of the interior cell adjacent to each facet, for
        # gathering boundary traces out of a (nx, ny, nvx, nvy) state array
        ci = np.where(self.axis == 0,
                      np.where(self.side == 0, 0, grid.nx - 1),
                      np.minimum(self.tang, grid.nx - 1))
        cj = np.where(self.axis == 0,
                      np.minimum(self.tang, grid.ny - 1),
                      np.where(self.side == 0, 0, grid.ny - 1))
        self.cell_index = np.ravel_multi_index(
            (ci, cj, self.iv, self.jv), grid.shape)

    def __len__(self) -> int:
        return self.axis.size

    @property
    def total_sigma(self) -> float:
        return kahan_sum(self.sigma)

    def facets(self):
        """Yield BoundaryFacet records (inspection/tests; slow path)."""
        for k in range(len(self)):
            yield BoundaryFacet(
                axis=int(self.axis[k]), side=int(self.side[k]),
                tangential=int(self.tang[k]), iv=int(self.iv[k]),
                jv=int(self.jv[k]),
                normal=(float(self.n1[k]), float(self.n2[k])),
                v_center=(float(self.vx[k]), float(self.vy[k])),
                n_dot_v=float(self.n_dot_v[k]),
                sigma_weight=float(self.sigma[k]))


@dataclass(frozen=True)
class BoundaryPartition:
    """Facets split into outgoing (n.v > tol), incoming (n.v < -tol) and
    glancing (|n.v| <= tol) sets."""

    outgoing: FacetBundle
    incoming: FacetBundle
    glancing: FacetBundle
    tol: float

    @property
    def n_total(self) -> int:
        return len(self.outgoing) + len(self.incoming) + len(self.glancing)


def classify_boundary(grid: PhaseGrid, tol: float = 0.0) -> BoundaryPartition:
    """Enumerate all (spatial face, velocity cell) pairs and classify them.

    Every pair lands in exactly one of the three partitions.  With a
    velocity box symmetric about zero the outgoing and incoming sets have
    equal cardinality and equal total sigma-measure.
    """
    vxc, vyc = grid.vx_centers(), grid.vy_centers()
    faces = []
    for j in range(grid.ny):
        faces.append((0, 0, j))
    for j in range(grid.ny):
        faces.append((0, 1, j))
    for i in range(grid.nx):
        faces.append((1, 0, i))
    for i in range(grid.nx):
        faces.append((1, 1, i))

    nv = grid.nvx * grid.nvy
    iv_cells, jv_cells = np.divmod(np.arange(nv), grid.nvy)

    parts = {"out": [[] for _ in range(5)],
             "in": [[] for _ in range(5)],
             "gl": [[] for _ in range(5)]}
    for axis, side, tang in faces:
        sign = -1.0 if side == 0 else 1.0
        nv_dot = sign * (vxc[iv_cells] if axis == 0 else vyc[jv_cells])
        key = np.where(nv_dot > tol, 0, np.where(nv_dot < -tol, 1, 2))
        for code, name in enumerate(("out", "in", "gl")):
            sel = np.nonzero(key == code)[0]
            if sel.size == 0:
                continue
            store = parts[name]
            store[0].append(np.full(sel.size, axis, dtype=np.intp))
            store[1].append(np.full(sel.size, side, dtype=np.intp))
            store[2].append(np.full(sel.size, tang, dtype=np.intp))
            store[3].append(iv_cells[sel])
            store[4].append(jv_cells[sel])

    def bundle(name):
        store = parts[name]
        if not store[0]:
            empty = np.empty(0, dtype=np.intp)
            return FacetBundle(grid, empty, empty, empty, empty, empty)
        return FacetBundle(grid, *[np.concatenate(c) for c in store])

    return BoundaryPartition(outgoing=bundle("out"), incoming=bundle("in"),
                             glancing=bundle("gl"), tol=tol)


def surface_norm_sq(trace: np.ndarray, facets: FacetBundle, dt) -> float:
    """Squared boundary-trace norm: sum_t sum_f |trace|^2 sigma_f dt_t.

    ``trace`` has shape (n_times, n_facets); ``dt`` is a scalar or an array
    of per-row time weights.  Facet reduction uses numpy's deterministic
    pairwise sum; the time reduction is compensated, so the result does not
    depend on any parallel decomposition.
    """
    trace = np.asarray(trace, dtype=float)
    if trace.ndim == 1:
        trace = trace[None, :]
    if trace.ndim != 2 or trace.shape[1] != len(facets):
        raise ValueError(
            f"trace shape {trace.shape} does not match facet count {len(facets)}")
    dt_arr = np.broadcast_to(np.asarray(dt, dtype=float), (trace.shape[0],))
    per_row = [dt_arr[k] * float(np.sum(trace[k] * trace[k] * facets.sigma))
               for k in range(trace.shape[0])]
    return kahan_sum(per_row)


def phase_norm_sq(values: np.ndarray, grid: PhaseGrid) -> float:
    """Squared phase-space L2 norm of cell values by the midpoint rule."""
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise ValueError(
            f"values shape {values.shape} does not match grid {grid.shape}")
    # fixed-order pairwise reduction per x-slab, compensated across slabs
    per_slab = [float(np.sum(values[i] * values[i])) for i in range(grid.nx)]
    return kahan_sum(per_slab) * grid.cell_volume
