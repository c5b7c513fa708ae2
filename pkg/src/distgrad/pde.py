"""Domain decomposition, Poisson assembly, observation loss, and the
acoustic wave propagator.

Grid convention: nx x ny interior nodes of the unit square with spacing
h = 1/(nx+1); homogeneous Dirichlet values sit just outside the grid.
Ranks form a px x py patch grid (row-major in the x patch index) and the
global DOF numbering is rank-contiguous so matrix stripes align with
patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .collectives import HaloSpec
from .graph import Op


def kappa_true(x, y):
    """Manufactured diffusivity used by the Poisson inversion driver."""
    return 1.5 + x + 2.0 * y * (1.0 - y)


def velocity_true(x, y):
    """Smooth background velocity with a low-velocity lens in the middle."""
    return 1.0 - 0.3 * np.exp(-((x - 0.5) ** 2 + (y - 0.5) ** 2) / 0.02)


@dataclass(frozen=True)
class GridPartition:
    nx: int
    ny: int
    px: int
    py: int
    h: float

    @property
    def mx(self):
        return self.nx // self.px

    @property
    def my(self):
        return self.ny // self.py

    @property
    def cells_per_rank(self):
        return self.mx * self.my

    @property
    def size(self):
        return self.px * self.py

    def rank_coords(self, rank):
        return rank // self.py, rank % self.py

    def rank_of_patch(self, pi, pj):
        return pi * self.py + pj

    def owned_origin(self, rank):
        pi, pj = self.rank_coords(rank)
        return pi * self.mx, pj * self.my

    def global_id(self, i, j):
        """Rank-contiguous DOF id of global cell (i, j)."""
        pi, li = divmod(i, self.mx)
        pj, lj = divmod(j, self.my)
        return self.rank_of_patch(pi, pj) * self.cells_per_rank + li * self.my + lj

    def dof_starts(self):
        return np.arange(self.size + 1, dtype=np.int64) * self.cells_per_rank

    def halo_spec(self, rank, depth=1):
        pi, pj = self.rank_coords(rank)
        nb = {}
        if pi > 0:
            nb["xlo"] = self.rank_of_patch(pi - 1, pj)
        if pi < self.px - 1:
            nb["xhi"] = self.rank_of_patch(pi + 1, pj)
        if pj > 0:
            nb["ylo"] = self.rank_of_patch(pi, pj - 1)
        if pj < self.py - 1:
            nb["yhi"] = self.rank_of_patch(pi, pj + 1)
        return HaloSpec(self.mx, self.my, depth, nb)

    def cell_coords(self, rank):
        """(mx*my) x 2 node coordinates in local row-major (x-fast) order."""
        ix0, iy0 = self.owned_origin(rank)
        i = np.arange(ix0, ix0 + self.mx)
        j = np.arange(iy0, iy0 + self.my)
        xx, yy = np.meshgrid((i + 1) * self.h, (j + 1) * self.h, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])


def partition_grid(nx, ny, px, py, h=None):
    if nx % px or ny % py:
        raise ValueError(
            f"grid {nx}x{ny} not divisible by rank grid {px}x{py}"
        )
    if h is None:
        h = 1.0 / (nx + 1)
    part = GridPartition(nx, ny, px, py, h)
    if min(part.mx, part.my) < 1:
        raise ValueError("empty patches")
    return part


# -- Poisson assembly ---------------------------------------------------

_DIRS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class PoissonStructure:
    """Fixed sparsity of the 5-point operator on one rank's stripe, plus
    the linear map from the ghosted coefficient field to the stored values.

    Row i carries diagonal sum(kappa_face)/h^2 and off-diagonals
    -kappa_face/h^2, kappa_face being the mean of the two adjacent cell
    values (the cell's own value at physical boundaries).
    """

    def __init__(self, part, rank):
        self.part = part
        self.rank = rank
        mx, my = part.mx, part.my
        m = mx * my
        h2 = part.h * part.h
        ix0, iy0 = part.owned_origin(rank)
        li, lj = np.meshgrid(np.arange(mx), np.arange(my), indexing="ij")
        li, lj = li.ravel(), lj.ravel()
        gi, gj = ix0 + li, iy0 + lj
        row_local = li * my + lj
        gyw = my + 2  # ghosted field row stride
        kc_idx = (li + 1) * gyw + (lj + 1)
        self_col = rank * m + row_local

        ent_rows = [row_local]
        ent_cols = [self_col]
        Mr, Mc, Mv = [], [], []
        next_eid = m
        for dx, dy in _DIRS:
            ni, nj = gi + dx, gj + dy
            ingrid = (ni >= 0) & (ni < part.nx) & (nj >= 0) & (nj < part.ny)
            kn_idx = (li + 1 + dx) * gyw + (lj + 1 + dy)
            # diagonal contributions
            w = np.where(ingrid, 0.5, 1.0) / h2
            Mr.append(row_local)
            Mc.append(kc_idx)
            Mv.append(w)
            Mr.append(row_local[ingrid])
            Mc.append(kn_idx[ingrid])
            Mv.append(np.full(ingrid.sum(), 0.5 / h2))
            # off-diagonal entries where the neighbor exists
            sel = np.flatnonzero(ingrid)
            eids = next_eid + np.arange(len(sel))
            next_eid += len(sel)
            ncols = np.array(
                [part.global_id(ni[s], nj[s]) for s in sel], dtype=np.int64
            )
            ent_rows.append(row_local[sel])
            ent_cols.append(ncols)
            Mr.append(eids)
            Mc.append(kc_idx[sel])
            Mv.append(np.full(len(sel), -0.5 / h2))
            Mr.append(eids)
            Mc.append(kn_idx[sel])
            Mv.append(np.full(len(sel), -0.5 / h2))

        rows = np.concatenate(ent_rows)
        cols = np.concatenate(ent_cols)
        perm = np.lexsort((cols, rows))
        newpos = np.empty(len(perm), dtype=np.int64)
        newpos[perm] = np.arange(len(perm))
        self.nnz = len(perm)
        self.Mr = newpos[np.concatenate(Mr)]
        self.Mc = np.concatenate(Mc)
        self.Mv = np.concatenate(Mv)
        indptr = np.zeros(m + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        self.indptr = np.cumsum(indptr)
        self.indices = cols[perm]
        self.kflat_len = (mx + 2) * gyw
        from .sparse import DistCSR

        self.csr = DistCSR(
            part.size * m,
            rank * m,
            (rank + 1) * m,
            self.indptr,
            self.indices,
            np.zeros(self.nnz),
            part.dof_starts(),
        )

    def values_from_kappa(self, kappa_ghosted):
        kflat = kappa_ghosted.ravel()
        return np.bincount(
            self.Mr, weights=self.Mv * kflat[self.Mc], minlength=self.nnz
        )

    def kappa_grad(self, grad_values):
        g = np.bincount(
            self.Mc,
            weights=self.Mv * grad_values[self.Mr],
            minlength=self.kflat_len,
        )
        return g.reshape(self.part.mx + 2, self.part.my + 2)


class AssembleOp(Op):
    """Ghosted coefficient field -> CSR stripe values (a fixed linear map)."""

    name = "assemble_poisson"

    def __init__(self, struct):
        self.struct = struct

    def forward(self, ctx, kappa_ghosted):
        if np.any(struct_interior(kappa_ghosted) <= 0.0):
            raise ValueError("nonpositive diffusivity")
        return self.struct.values_from_kappa(kappa_ghosted)

    def backward(self, ctx, grad):
        return (self.struct.kappa_grad(grad),)


def struct_interior(kappa_ghosted):
    return kappa_ghosted[1:-1, 1:-1]


class PadInteriorOp(Op):
    """Flat per-cell vector -> ghosted 2-D field with zero ghosts."""

    name = "pad_interior"

    def __init__(self, mx, my, depth=1):
        self.mx = mx
        self.my = my
        self.depth = depth

    def forward(self, ctx, v):
        d = self.depth
        out = np.zeros((self.mx + 2 * d, self.my + 2 * d))
        out[d:-d, d:-d] = v.reshape(self.mx, self.my)
        return out

    def backward(self, ctx, grad):
        d = self.depth
        return (grad[d:-d, d:-d].ravel().copy(),)


# -- observations -------------------------------------------------------


@dataclass
class ObservationSet:
    indices: np.ndarray  # local DOF indices, sorted, unique
    values: np.ndarray


def sample_observations(part, rank, fraction=0.8, seed=0):
    """Deterministic per-rank sample of owned DOF indices (values unset)."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    m = part.cells_per_rank
    k = int(math.floor(fraction * m))
    rng = np.random.default_rng(seed ^ rank)
    idx = np.sort(rng.choice(m, size=k, replace=False))
    return ObservationSet(idx, np.zeros(k))


def sample_observations_global(part, rank, fraction=0.8, seed=0):
    """Rank-count-invariant sample: cells drawn once on the global grid.

    The drawn set depends only on (grid, fraction, seed), so losses computed
    on different rank grids see identical observations (values unset).
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    total = part.nx * part.ny
    k = int(math.floor(fraction * total))
    rng = np.random.default_rng(seed)
    canon = rng.choice(total, size=k, replace=False)
    gi, gj = canon // part.ny, canon % part.ny
    ix0, iy0 = part.owned_origin(rank)
    mask = (
        (gi >= ix0)
        & (gi < ix0 + part.mx)
        & (gj >= iy0)
        & (gj < iy0 + part.my)
    )
    local = (gi[mask] - ix0) * part.my + (gj[mask] - iy0)
    local = np.sort(local)
    return ObservationSet(local, np.zeros(len(local)))


class ObservationLossOp(Op):
    """Local sum of squared residuals at the observed DOFs."""

    name = "observation_loss"

    def __init__(self, obs):
        self.obs = obs

    def forward(self, ctx, u):
        r = u[self.obs.indices] - self.obs.values
        ctx["r"] = r
        ctx["n"] = len(u)
        return np.array((r * r).sum())

    def backward(self, ctx, grad):
        g = np.zeros(ctx["n"])
        g[self.obs.indices] = 2.0 * float(grad) * ctx["r"]
        return (g,)


# -- acoustic wave ------------------------------------------------------


def ricker(t, peak_freq, delay=None):
    if delay is None:
        delay = 1.0 / peak_freq
    a = (np.pi * peak_freq * (t - delay)) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


@dataclass
class AcousticModel:
    """Leapfrog acoustic propagator settings; CFL checked at construction."""

    c_max: float
    dt: float
    steps: int
    h: float
    source_cell: tuple  # global (i, j)
    peak_freq: float = 10.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.c_max * self.dt / self.h > 1.0 / math.sqrt(2.0) + 1e-12:
            raise ValueError(
                f"CFL violated: c_max*dt/h = {self.c_max * self.dt / self.h:.3f} "
                f"> {1.0 / math.sqrt(2.0):.3f}"
            )

    def source_value(self, t):
        return self.amplitude * ricker(t, self.peak_freq)


class AcousticStepOp(Op):
    """One leapfrog update on a ghosted patch.

    Inputs: (u_prev, u_curr_exchanged, c_squared), all ghosted at depth 1.
    Output ghosts are zeroed; they are refilled by the next halo exchange.
    """

    name = "acoustic_step"

    def __init__(self, r, source_term=None):
        self.r = float(r)  # dt^2 / h^2
        self.source_term = source_term  # ghosted array (dt^2 * f) or None

    def forward(self, ctx, u_prev, u_curr, csq):
        ctx["u_curr"] = u_curr
        ctx["csq"] = csq
        out = kernels.wave_step(u_prev, u_curr, csq, self.r)
        if self.source_term is not None:
            out = out + self.source_term
        return out

    def backward(self, ctx, grad):
        r = self.r
        uc, csq = ctx["u_curr"], ctx["csq"]
        w = grad[1:-1, 1:-1]
        C = uc[1:-1, 1:-1]
        cc = csq[1:-1, 1:-1]
        g_up = np.zeros_like(grad)
        g_up[1:-1, 1:-1] = -w
        g_uc = np.zeros_like(grad)
        g_cs = np.zeros_like(grad)
        sum_cf = np.zeros_like(w)
        n0, n1 = uc.shape
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            sl = (slice(1 + di, n0 - 1 + di), slice(1 + dj, n1 - 1 + dj))
            cf = 0.5 * (cc + csq[sl])
            sum_cf += cf
            g_uc[sl] += r * cf * w
            diff_w = 0.5 * r * (uc[sl] - C) * w
            g_cs[1:-1, 1:-1] += diff_w
            g_cs[sl] += diff_w
        g_uc[1:-1, 1:-1] += (2.0 - r * sum_cf) * w
        return g_up, g_uc, g_cs


class SurfaceMisfitOp(Op):
    """Squared misfit of the top-row wavefield against an observed trace.

    Only ranks whose patch touches global row 0 contribute; others emit 0.
    """

    name = "surface_misfit"

    def __init__(self, owns_surface, obs_trace=None):
        self.owns_surface = owns_surface
        self.obs_trace = obs_trace

    def forward(self, ctx, u):
        if not self.owns_surface:
            ctx["skip"] = True
            return np.array(0.0)
        ctx["skip"] = False
        ctx["shape"] = u.shape
        trace = u[1, 1:-1]
        obs = self.obs_trace if self.obs_trace is not None else 0.0
        r = trace - obs
        ctx["r"] = r
        return np.array((r * r).sum())

    def backward(self, ctx, grad):
        if ctx["skip"]:
            return (None,)
        g = np.zeros(ctx["shape"])
        g[1, 1:-1] = 2.0 * float(grad) * ctx["r"]
        return (g,)


class SurfaceTraceOp(Op):
    """Extract the top-row wavefield (empty on non-surface ranks)."""

    name = "surface_trace"

    def __init__(self, owns_surface):
        self.owns_surface = owns_surface

    def forward(self, ctx, u):
        ctx["shape"] = u.shape
        if not self.owns_surface:
            return np.empty(0)
        return u[1, 1:-1].copy()

    def backward(self, ctx, grad):
        g = np.zeros(ctx["shape"])
        if self.owns_surface:
            g[1, 1:-1] = grad
        return (g,)
