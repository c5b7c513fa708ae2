import numpy as np
import pytest

from distgrad import drivers, pde, sparse
from distgrad.comm import spawn_ranks
from distgrad.pde import (
    AcousticModel,
    AcousticStepOp,
    ObservationLossOp,
    ObservationSet,
    PadInteriorOp,
    PoissonStructure,
    partition_grid,
    ricker,
    sample_observations,
    sample_observations_global,
)


# -- partitioning --------------------------------------------------------


def test_partition_basic_geometry():
    part = partition_grid(6, 4, 2, 2)
    assert (part.mx, part.my) == (3, 2)
    assert part.cells_per_rank == 6
    assert part.h == pytest.approx(1.0 / 7.0)
    assert part.rank_coords(3) == (1, 1)
    assert part.rank_of_patch(1, 0) == 2
    assert part.owned_origin(3) == (3, 2)


def test_partition_rejects_indivisible_grid():
    with pytest.raises(ValueError):
        partition_grid(5, 5, 2, 2)
    with pytest.raises(ValueError):
        partition_grid(4, 6, 2, 4)


def test_global_id_is_rank_contiguous():
    part = partition_grid(4, 4, 2, 2)
    # every rank's patch occupies one contiguous id block
    for rank in range(4):
        ix0, iy0 = part.owned_origin(rank)
        ids = sorted(
            part.global_id(ix0 + a, iy0 + b)
            for a in range(part.mx)
            for b in range(part.my)
        )
        assert ids == list(range(rank * 4, rank * 4 + 4))


def test_cell_coords_cover_unit_square_interior():
    part = partition_grid(3, 3, 1, 1)
    c = part.cell_coords(0)
    assert c.shape == (9, 2)
    assert c[0].tolist() == [0.25, 0.25]
    assert c[-1].tolist() == [0.75, 0.75]
    # local ordering is x-major (y fastest)
    assert c[1].tolist() == [0.25, 0.5]


# -- Poisson assembly ----------------------------------------------------


def _dense_poisson(part, kappa_grid):
    """Independent dense 5-point assembly (test oracle, plain loops)."""
    n = part.nx * part.ny
    A = np.zeros((n, n))
    h2 = part.h**2
    for i in range(part.nx):
        for j in range(part.ny):
            row = part.global_id(i, j)
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < part.nx and 0 <= nj < part.ny:
                    kf = 0.5 * (kappa_grid[i, j] + kappa_grid[ni, nj])
                    A[row, part.global_id(ni, nj)] -= kf / h2
                else:
                    kf = kappa_grid[i, j]
                A[row, row] += kf / h2
    return A


def _assemble_parallel(part, kappa_grid):
    from distgrad.collectives import halo_exchange_forward

    def prog(comm):
        struct = PoissonStructure(part, comm.rank)
        ix0, iy0 = part.owned_origin(comm.rank)
        local = kappa_grid[ix0 : ix0 + part.mx, iy0 : iy0 + part.my].ravel()
        kg = PadInteriorOp(part.mx, part.my, 1).forward({}, local)
        kg = halo_exchange_forward(comm, kg, part.halo_spec(comm.rank, 1), 0)
        vals = struct.values_from_kappa(kg)
        A = struct.csr.with_values(vals)
        return sparse.to_dense(A, comm, 0)

    return spawn_ranks(part.size, prog)[0]


def test_unit_coefficient_gives_classic_stencil():
    part = partition_grid(3, 3, 1, 1, h=1.0)
    A = _assemble_parallel(part, np.ones((3, 3)))
    center = part.global_id(1, 1)
    assert A[center, center] == 4.0
    assert A[center, part.global_id(0, 1)] == -1.0
    assert A[center, part.global_id(1, 0)] == -1.0
    # symmetric and rows of interior nodes sum to zero
    assert np.array_equal(A, A.T)
    assert A[center].sum() == 0.0


def test_assembly_scales_linearly_with_coefficient():
    part = partition_grid(4, 4, 1, 1)
    A1 = _assemble_parallel(part, np.ones((4, 4)))
    A2 = _assemble_parallel(part, 2.0 * np.ones((4, 4)))
    assert np.allclose(A2, 2.0 * A1)


@pytest.mark.parametrize("ranks", [(1, 1), (2, 2), (2, 1)])
def test_assembly_matches_dense_oracle(ranks):
    px, py = ranks
    part = partition_grid(4, 4, px, py)
    rng = np.random.default_rng(1)
    kappa = 0.5 + rng.random((4, 4))
    A = _assemble_parallel(part, kappa)
    assert np.allclose(A, _dense_poisson(part, kappa), atol=1e-13)


def test_assembled_matrix_is_symmetric_positive_definite():
    part = partition_grid(6, 6, 2, 2)
    kappa = pde.kappa_true(*np.meshgrid(
        (np.arange(6) + 1) * part.h, (np.arange(6) + 1) * part.h, indexing="ij"
    ))
    A = _assemble_parallel(part, kappa)
    assert np.allclose(A, A.T, atol=1e-12)
    assert np.linalg.eigvalsh(A).min() > 0.0


def test_assembly_rejects_nonpositive_coefficient():
    part = partition_grid(2, 2, 1, 1)
    struct = PoissonStructure(part, 0)
    bad = np.zeros((4, 4))
    bad[1:-1, 1:-1] = [[1.0, 1.0], [-0.5, 1.0]]
    with pytest.raises(ValueError):
        pde.AssembleOp(struct).forward({}, bad)


def test_assembly_gradient_is_exact_transpose():
    # values_from_kappa is linear; kappa_grad must be its exact transpose
    part = partition_grid(4, 4, 1, 1)
    struct = PoissonStructure(part, 0)
    rng = np.random.default_rng(2)
    kg = np.zeros((6, 6))
    kg[1:-1, 1:-1] = 0.5 + rng.random((4, 4))
    w = rng.standard_normal(struct.nnz)
    lhs = struct.values_from_kappa(kg) @ w
    rhs = (struct.kappa_grad(w) * kg).sum()
    assert lhs == pytest.approx(rhs, rel=1e-14)


def test_poisson_solution_converges_quadratically():
    """kappa = 1, u = sin(pi x) sin(pi y), f = 2 pi^2 u: the discrete
    solution converges at second order in h."""

    def solve_err(nx):
        part = partition_grid(nx, nx, 1, 1)
        xy = part.cell_coords(0)
        u_exact = np.sin(np.pi * xy[:, 0]) * np.sin(np.pi * xy[:, 1])
        f = 2.0 * np.pi**2 * u_exact

        def prog(comm):
            struct = PoissonStructure(part, 0)
            A = struct.csr.with_values(
                struct.values_from_kappa(
                    PadInteriorOp(nx, nx, 1).forward({}, np.ones(nx * nx))
                )
            )
            return sparse.dist_solve(comm, A, f, tol=1e-12)

        u = spawn_ranks(1, prog)[0]
        return np.max(np.abs(u - u_exact))

    e1, e2 = solve_err(15), solve_err(31)
    assert e1 / e2 == pytest.approx(4.0, rel=0.15)


# -- observations --------------------------------------------------------


def test_observation_loss_values_and_gradient():
    obs = ObservationSet(np.array([0, 2]), np.array([1.0, -1.0]))
    op = ObservationLossOp(obs)
    ctx = {}
    u = np.array([3.0, 5.0, 0.0, 7.0])
    loss = op.forward(ctx, u)
    assert float(loss) == (3.0 - 1.0) ** 2 + (0.0 + 1.0) ** 2
    (g,) = op.backward(ctx, np.array(1.0))
    assert g.tolist() == [4.0, 0.0, 2.0, 0.0]


def test_sample_observations_count_and_determinism():
    part = partition_grid(10, 10, 1, 1)
    obs = sample_observations(part, 0, fraction=0.8, seed=5)
    assert len(obs.indices) == 80
    assert len(np.unique(obs.indices)) == 80
    again = sample_observations(part, 0, fraction=0.8, seed=5)
    assert np.array_equal(obs.indices, again.indices)
    assert not np.array_equal(
        obs.indices, sample_observations(part, 0, 0.8, 6).indices
    )


def test_sample_observations_rejects_bad_fraction():
    part = partition_grid(4, 4, 1, 1)
    for frac in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            sample_observations(part, 0, fraction=frac)
        with pytest.raises(ValueError):
            sample_observations_global(part, 0, fraction=frac)


def test_global_sampling_is_rank_count_invariant():
    """The union of per-rank index sets maps to the same global cells for
    every rank grid."""

    def global_cells(px, py):
        part = partition_grid(8, 8, px, py)
        cells = set()
        for rank in range(part.size):
            obs = sample_observations_global(part, rank, 0.5, seed=3)
            ix0, iy0 = part.owned_origin(rank)
            for li in obs.indices:
                a, b = divmod(int(li), part.my)
                cells.add((ix0 + a, iy0 + b))
        return cells

    ref = global_cells(1, 1)
    assert len(ref) == 32
    for px, py in ((2, 1), (2, 2), (4, 2)):
        assert global_cells(px, py) == ref


# -- acoustic propagator -------------------------------------------------


def test_ricker_peak_at_delay():
    assert ricker(0.1, 10.0) == 1.0  # default delay 1/f
    t = np.linspace(0.0, 0.5, 2001)
    assert np.max(ricker(t, 10.0)) == 1.0
    assert abs(ricker(0.5, 10.0)) < 1e-6


def test_cfl_violation_rejected():
    with pytest.raises(ValueError, match="CFL"):
        AcousticModel(c_max=2.0, dt=0.1, steps=1, h=0.1, source_cell=(0, 0))
    # at the limit it is accepted
    AcousticModel(
        c_max=1.0, dt=0.1 / np.sqrt(2.0), steps=1, h=0.1, source_cell=(0, 0)
    )


def _step_oracle(u_prev, u_curr, csq, r):
    """Direct loop implementation of the leapfrog update (test oracle)."""
    out = np.zeros_like(u_curr)
    n0, n1 = u_curr.shape
    for i in range(1, n0 - 1):
        for j in range(1, n1 - 1):
            acc = 2.0 * u_curr[i, j] - u_prev[i, j]
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                cf = 0.5 * (csq[i, j] + csq[i + di, j + dj])
                acc += r * cf * (u_curr[i + di, j + dj] - u_curr[i, j])
            out[i, j] = acc
    return out


def test_acoustic_step_matches_loop_oracle():
    rng = np.random.default_rng(4)
    shape = (6, 5)
    up = rng.standard_normal(shape)
    uc = rng.standard_normal(shape)
    csq = rng.random(shape) + 0.5
    op = AcousticStepOp(r=0.31)
    out = op.forward({}, up, uc, csq)
    assert np.allclose(out, _step_oracle(up, uc, csq, 0.31), atol=1e-14)


def test_acoustic_step_zero_velocity_is_free_drift():
    rng = np.random.default_rng(5)
    up = rng.standard_normal((5, 5))
    uc = rng.standard_normal((5, 5))
    out = AcousticStepOp(r=0.4).forward({}, up, uc, np.zeros((5, 5)))
    assert np.allclose(
        out[1:-1, 1:-1], 2.0 * uc[1:-1, 1:-1] - up[1:-1, 1:-1], atol=1e-15
    )
    assert np.all(out[0] == 0.0) and np.all(out[:, 0] == 0.0)


def test_acoustic_step_source_term_adds():
    shape = (4, 4)
    src = np.zeros(shape)
    src[2, 2] = 1.25
    base = AcousticStepOp(r=0.2).forward(
        {}, np.zeros(shape), np.zeros(shape), np.ones(shape)
    )
    with_src = AcousticStepOp(r=0.2, source_term=src).forward(
        {}, np.zeros(shape), np.zeros(shape), np.ones(shape)
    )
    assert np.array_equal(with_src - base, src)


def _wave_setup(comm, part, steps=40):
    h = part.h
    model = AcousticModel(
        c_max=1.0,
        dt=0.5 * h,
        steps=steps,
        h=h,
        source_cell=(part.nx // 2, part.ny // 2),
        peak_freq=1.0 / (10.0 * h),
    )
    return drivers.WaveSetup.create(comm, part, model)


def test_wavefield_symmetric_about_center():
    """Centered source in a symmetric medium: the field is invariant under
    both grid reflections."""
    nx = 11

    def prog(comm):
        part = partition_grid(nx, nx, 1, 1)
        setup = _wave_setup(comm, part, steps=30)
        _, fields = drivers.simulate_wave(
            comm, setup, np.ones(nx * nx), record_fields_at=(29,)
        )
        return fields[29][1:-1, 1:-1]

    u = spawn_ranks(1, prog)[0]
    assert np.allclose(u, u[::-1, :], atol=1e-12)
    assert np.allclose(u, u[:, ::-1], atol=1e-12)
    assert np.allclose(u, u.T, atol=1e-12)


def test_wave_serial_parallel_equivalence():
    nx = 12
    part1 = partition_grid(nx, nx, 1, 1)

    def prog1(comm):
        setup = _wave_setup(comm, part1, steps=25)
        c = drivers.wave_velocity_true(setup)
        _, fields = drivers.simulate_wave(comm, setup, c, record_fields_at=(24,))
        return fields[24][1:-1, 1:-1]

    u_serial = spawn_ranks(1, prog1)[0]

    part4 = partition_grid(nx, nx, 2, 2)

    def prog4(comm):
        setup = _wave_setup(comm, part4, steps=25)
        c = drivers.wave_velocity_true(setup)
        _, fields = drivers.simulate_wave(comm, setup, c, record_fields_at=(24,))
        return fields[24][1:-1, 1:-1]

    patches = spawn_ranks(4, prog4)
    for rank, patch in enumerate(patches):
        ix0, iy0 = part4.owned_origin(rank)
        ref = u_serial[ix0 : ix0 + part4.mx, iy0 : iy0 + part4.my]
        assert np.max(np.abs(patch - ref)) < 1e-10


def test_surface_trace_comes_from_top_row():
    def prog(comm):
        part = partition_grid(8, 8, 2, 1)
        setup = _wave_setup(comm, part, steps=15)
        traces, fields = drivers.simulate_wave(
            comm, setup, np.ones(part.cells_per_rank), record_fields_at=(14,)
        )
        return setup.owns_surface, traces[14], fields[14]

    res = spawn_ranks(2, prog)
    owns0, trace0, field0 = res[0]
    owns1, trace1, _ = res[1]
    assert owns0 and not owns1
    assert len(trace1) == 0
    assert np.array_equal(trace0, field0[1, 1:-1])
