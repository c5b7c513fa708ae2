"""End-to-end pipelines: Poisson inversion and acoustic wave simulation.

These wire the tape operators together; the CLI and test suites call them
with small desk-scale configurations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, nn, pde, sparse
from .collectives import BcastOp, HaloExchangeOp, SumOp
from .graph import Add, Square, Tape
from .pde import (
    AcousticModel,
    AcousticStepOp,
    AssembleOp,
    ObservationLossOp,
    PadInteriorOp,
    PoissonStructure,
    SurfaceMisfitOp,
    SurfaceTraceOp,
)


@dataclass
class PoissonSetup:
    """Per-rank cached pieces of the Poisson pipeline."""

    part: pde.GridPartition
    struct: PoissonStructure
    halo: object
    coords: np.ndarray
    nn_spec: nn.MLPParams
    cg_tol: float = 1e-10

    @classmethod
    def create(cls, comm, part, nn_spec=None, cg_tol=1e-10):
        if part.size != comm.size:
            raise ValueError("rank grid does not match communicator size")
        if nn_spec is None:
            nn_spec = nn.MLPParams(nn.DEFAULT_LAYERS)
        return cls(
            part,
            PoissonStructure(part, comm.rank),
            part.halo_spec(comm.rank, depth=1),
            part.cell_coords(comm.rank),
            nn_spec,
            cg_tol,
        )


def poisson_solve_true(comm, setup):
    """Forward solve with the manufactured diffusivity (raw ops, no tape)."""
    from .collectives import halo_exchange_forward

    part = setup.part
    kappa = pde.kappa_true(setup.coords[:, 0], setup.coords[:, 1])
    pad = PadInteriorOp(part.mx, part.my, 1)
    kg = pad.forward({}, kappa)
    kg = halo_exchange_forward(comm, kg, setup.halo, tag_base=0)
    values = setup.struct.values_from_kappa(kg)
    A = setup.struct.csr.with_values(values)
    f = np.ones(part.cells_per_rank)
    return sparse.dist_solve(comm, A, f, tol=setup.cg_tol)


def make_poisson_observations(comm, setup, fraction=0.8, seed=0):
    """Observation set valued by a truth solve.

    Cells are drawn on the global grid so the set is identical regardless
    of the rank grid (needed for serial/parallel equivalence checks).
    """
    u = poisson_solve_true(comm, setup)
    obs = pde.sample_observations_global(setup.part, comm.rank, fraction, seed)
    obs.values = u[obs.indices].copy()
    return obs


def build_poisson_tape(comm, setup, obs, root=0):
    """Tape: theta -> bcast -> MLP kappa -> halo -> assemble -> solve -> loss.

    Returns (tape, theta_node). Seed the theta node (root value matters)
    before forward.
    """
    part = setup.part
    t = Tape(comm)
    theta = t.variable(np.zeros(setup.nn_spec.num_params), param=True)
    th = t.record(BcastOp(root), [theta])
    kappa = t.record(nn.MlpOp(setup.nn_spec, setup.coords), [th])
    kg = t.record(PadInteriorOp(part.mx, part.my, 1), [kappa])
    khe = t.record(HaloExchangeOp(setup.halo), [kg])
    vals = t.record(AssembleOp(setup.struct), [khe])
    f = t.constant(np.ones(part.cells_per_rank))
    u = t.record(
        sparse.SolveOp(setup.struct.csr, tol=setup.cg_tol), [vals, f]
    )
    lloc = t.record(ObservationLossOp(obs), [u])
    loss = t.record(SumOp(root), [lloc])
    t.mark_loss(loss)
    return t, theta


def poisson_kappa_field(comm, setup, theta, root=0):
    """Evaluate the network's coefficient on this rank's cells (theta on root)."""
    th = np.array(theta, dtype=np.float64)
    comm.bcast_raw(th, root)
    return nn.mlp_forward(setup.nn_spec, th, setup.coords)


def gather_field(comm, part, local_cells, root=0):
    """Assemble per-rank cell vectors into the global (nx, ny) array on root."""
    chunks = sparse.gatherv(comm, np.asarray(local_cells, dtype=np.float64), root)
    if comm.rank != root:
        return None
    out = np.zeros((part.nx, part.ny))
    for r, chunk in enumerate(chunks):
        ix0, iy0 = part.owned_origin(r)
        out[ix0 : ix0 + part.mx, iy0 : iy0 + part.my] = chunk.reshape(
            part.mx, part.my
        )
    return out


# -- acoustic wave ------------------------------------------------------


@dataclass
class WaveSetup:
    part: pde.GridPartition
    model: AcousticModel
    halo: object
    coords: np.ndarray
    nn_spec: nn.MLPParams
    owns_surface: bool
    source_terms: list  # per-step ghosted arrays (or None)

    @classmethod
    def create(cls, comm, part, model, nn_spec=None):
        if part.size != comm.size:
            raise ValueError("rank grid does not match communicator size")
        if nn_spec is None:
            nn_spec = nn.MLPParams(nn.DEFAULT_LAYERS)
        pi, _ = part.rank_coords(comm.rank)
        ix0, iy0 = part.owned_origin(comm.rank)
        si, sj = model.source_cell
        owns_src = (
            ix0 <= si < ix0 + part.mx and iy0 <= sj < iy0 + part.my
        )
        terms = []
        for k in range(model.steps):
            if owns_src:
                arr = np.zeros((part.mx + 2, part.my + 2))
                arr[si - ix0 + 1, sj - iy0 + 1] = (
                    model.dt**2 * model.source_value(k * model.dt)
                )
                terms.append(arr)
            else:
                terms.append(None)
        return cls(
            part,
            model,
            part.halo_spec(comm.rank, depth=1),
            part.cell_coords(comm.rank),
            nn_spec,
            pi == 0,
            terms,
        )


def wave_velocity_true(setup):
    return pde.velocity_true(setup.coords[:, 0], setup.coords[:, 1])


def simulate_wave(comm, setup, c_cells, record_fields_at=()):
    """Raw (non-tape) forward simulation with a given velocity field.

    Returns (traces, fields): traces is the per-step top-row wavefield
    (empty arrays off the surface), fields the ghosted wavefields at the
    requested step indices.
    """
    from .collectives import halo_exchange_forward

    part, model = setup.part, setup.model
    pad = PadInteriorOp(part.mx, part.my, 1)
    cg = pad.forward({}, np.asarray(c_cells, dtype=np.float64))
    cg = halo_exchange_forward(comm, cg, setup.halo, tag_base=0)
    csq = cg * cg
    r = model.dt**2 / model.h**2
    u_prev = np.zeros(setup.halo.shape)
    u_curr = np.zeros(setup.halo.shape)
    traces, fields = [], {}
    for k in range(model.steps):
        ue = halo_exchange_forward(comm, u_curr, setup.halo, tag_base=16 * (k + 1))
        u_next = kernels.wave_step(u_prev, ue, csq, r)
        if setup.source_terms[k] is not None:
            u_next = u_next + setup.source_terms[k]
        traces.append(u_next[1, 1:-1].copy() if setup.owns_surface else np.empty(0))
        if k in record_fields_at:
            fields[k] = u_next.copy()
        u_prev, u_curr = ue, u_next
    return traces, fields


def make_wave_observations(comm, setup):
    traces, _ = simulate_wave(comm, setup, wave_velocity_true(setup))
    return traces


def build_wave_tape(comm, setup, obs_traces, root=0):
    """Tape for the surface-misfit loss of the acoustic inversion."""
    part, model = setup.part, setup.model
    t = Tape(comm)
    theta = t.variable(np.zeros(setup.nn_spec.num_params), param=True)
    th = t.record(BcastOp(root), [theta])
    c = t.record(nn.MlpOp(setup.nn_spec, setup.coords), [th])
    cgpad = t.record(PadInteriorOp(part.mx, part.my, 1), [c])
    cghost = t.record(HaloExchangeOp(setup.halo), [cgpad])
    csq = t.record(Square(), [cghost])
    r = model.dt**2 / model.h**2
    u_prev = t.constant(np.zeros(setup.halo.shape))
    u_curr = t.constant(np.zeros(setup.halo.shape))
    loss_local = t.constant(np.array(0.0))
    for k in range(model.steps):
        ue = t.record(HaloExchangeOp(setup.halo), [u_curr])
        u_next = t.record(
            AcousticStepOp(r, setup.source_terms[k]), [u_prev, ue, csq]
        )
        misfit = t.record(
            SurfaceMisfitOp(setup.owns_surface, obs_traces[k]), [u_next]
        )
        loss_local = t.record(Add(), [loss_local, misfit])
        u_prev, u_curr = ue, u_next
    loss = t.record(SumOp(root), [loss_local])
    t.mark_loss(loss)
    return t, theta
