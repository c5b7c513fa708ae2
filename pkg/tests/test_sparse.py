import numpy as np
import pytest
import scipy.sparse as sps

from distgrad import sparse
from distgrad.comm import spawn_ranks
from distgrad.sparse import (
    SolverError,
    dist_solve,
    dist_spmv,
    dist_transpose,
    dist_transpose_backward,
    from_dense,
    load_matrix_text,
    partition_starts,
    save_matrix_text,
    to_dense,
)


def _random_sparse(n, density, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((n, n)) < density
    return mask * rng.standard_normal((n, n))


def _spd(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    return B @ B.T + n * np.eye(n)


def test_partition_starts_balanced():
    assert partition_starts(10, 3).tolist() == [0, 4, 7, 10]
    assert partition_starts(8, 4).tolist() == [0, 2, 4, 6, 8]
    assert partition_starts(3, 4).tolist() == [0, 1, 2, 3, 3]


def test_from_dense_to_dense_round_trip():
    dense = _random_sparse(17, 0.2, 0)

    def prog(comm):
        A = from_dense(dense, comm)
        return to_dense(A, comm, 0)

    out = spawn_ranks(3, prog)[0]
    assert np.array_equal(out, dense)


def test_local_diagonal():
    dense = np.diag([2.0, 3.0, 4.0, 5.0])
    dense[0, 2] = 7.0

    def prog(comm):
        A = from_dense(dense, comm)
        return A.local_diagonal().tolist()

    out = spawn_ranks(2, prog)
    assert out[0] == [2.0, 3.0] and out[1] == [4.0, 5.0]


# -- SpMV ----------------------------------------------------------------


def test_spmv_hand_example():
    dense = np.array([[2.0, 0.0], [1.0, 3.0]])
    x = np.array([1.0, -1.0])

    def prog(comm):
        A = from_dense(dense, comm)
        return dist_spmv(comm, A, x[A.row_begin : A.row_end]).tolist()

    out = spawn_ranks(2, prog)
    assert out[0] == [2.0] and out[1] == [-2.0]


@pytest.mark.parametrize("size", [1, 2, 4])
def test_spmv_matches_dense_oracle(size):
    n = 37
    dense = _random_sparse(n, 0.15, 1)
    rng = np.random.default_rng(2)
    x = rng.standard_normal(n)
    expect = dense @ x

    def prog(comm):
        A = from_dense(dense, comm)
        return dist_spmv(comm, A, x[A.row_begin : A.row_end])

    parts = spawn_ranks(size, prog)
    assert np.allclose(np.concatenate(parts), expect, atol=1e-13)


def test_spmv_is_rank_count_invariant():
    n = 24
    dense = _random_sparse(n, 0.3, 4)
    x = np.random.default_rng(5).standard_normal(n)

    def run(size):
        def prog(comm):
            A = from_dense(dense, comm)
            return dist_spmv(comm, A, x[A.row_begin : A.row_end])

        return np.concatenate(spawn_ranks(size, prog))

    y1 = run(1)
    for size in (2, 3, 4):
        assert np.allclose(run(size), y1, atol=1e-14)


def test_spmv_rejects_nonconforming_vector():
    def prog(comm):
        A = from_dense(np.eye(4), comm)
        dist_spmv(comm, A, np.ones(3))

    with pytest.raises(ValueError):
        spawn_ranks(2, prog, timeout=5.0)


# -- transpose -----------------------------------------------------------


def test_transpose_hand_example():
    dense = np.array(
        [
            [1.0, 2.0, 0.0],
            [0.0, 0.0, 3.0],
            [4.0, 0.0, 5.0],
        ]
    )

    def prog(comm):
        A = from_dense(dense, comm)
        T, _ = dist_transpose(comm, A)
        return to_dense(T, comm, 0)

    out = spawn_ranks(3, prog)[0]
    assert np.array_equal(out, dense.T)


@pytest.mark.parametrize("size", [1, 2, 4])
@pytest.mark.parametrize("density", [0.01, 0.1])
def test_transpose_matches_scipy_oracle(size, density):
    n = 120
    dense = _random_sparse(n, density, seed=int(density * 100) + size)
    expect = sps.csr_matrix(dense).T.toarray()

    def prog(comm):
        A = from_dense(dense, comm)
        T, _ = dist_transpose(comm, A)
        return to_dense(T, comm, 0)

    out = spawn_ranks(size, prog)[0]
    assert np.array_equal(out, expect)


def test_transpose_is_exact_involution():
    n = 50
    dense = _random_sparse(n, 0.1, 9)

    def prog(comm):
        A = from_dense(dense, comm)
        T, _ = dist_transpose(comm, A)
        TT, _ = dist_transpose(comm, T)
        same = (
            np.array_equal(TT.indptr, A.indptr)
            and np.array_equal(TT.indices, A.indices)
            and np.array_equal(TT.values, A.values)
        )
        return same

    assert all(spawn_ranks(3, prog))


def test_transpose_backward_inverts_value_routing():
    """Pushing the transposed values back through the adjoint recovers the
    original values exactly (the map is a permutation)."""
    dense = _random_sparse(30, 0.2, 12)

    def prog(comm):
        A = from_dense(dense, comm)
        T, tctx = dist_transpose(comm, A)
        back = dist_transpose_backward(comm, tctx, T.values)
        return np.array_equal(back, A.values)

    assert all(spawn_ranks(4, prog))


def test_transpose_adjoint_identity():
    """<T(A), W> == <A, T^adj(W)> summed over ranks, to machine precision."""
    dense = _random_sparse(40, 0.15, 21)

    def prog(comm):
        rng = np.random.default_rng(100 + comm.rank)
        A = from_dense(dense, comm)
        T, tctx = dist_transpose(comm, A)
        w = rng.standard_normal(T.nnz_local)
        lhs = np.array([T.values @ w])
        comm.allreduce_sum(lhs)
        g = dist_transpose_backward(comm, tctx, w)
        rhs = np.array([A.values @ g])
        comm.allreduce_sum(rhs)
        return float(lhs[0]), float(rhs[0])

    for lhs, rhs in spawn_ranks(3, prog):
        assert lhs == pytest.approx(rhs, rel=1e-13)


# -- solver --------------------------------------------------------------


def test_solve_diagonal_matrix():
    dense = np.diag([2.0, 4.0, 8.0, 16.0])
    f = np.array([2.0, 4.0, 8.0, 16.0])

    def prog(comm):
        A = from_dense(dense, comm)
        return dist_solve(comm, A, f[A.row_begin : A.row_end])

    out = np.concatenate(spawn_ranks(2, prog))
    assert np.allclose(out, np.ones(4), atol=1e-12)


@pytest.mark.parametrize("size", [1, 2, 4])
def test_solve_matches_dense_oracle(size):
    n = 20
    dense = _spd(n, 3)
    rng = np.random.default_rng(4)
    f = rng.standard_normal(n)
    expect = np.linalg.solve(dense, f)

    def prog(comm):
        A = from_dense(dense, comm)
        return dist_solve(comm, A, f[A.row_begin : A.row_end], tol=1e-12)

    out = np.concatenate(spawn_ranks(size, prog))
    assert np.linalg.norm(out - expect) / np.linalg.norm(expect) < 1e-10


def test_solve_is_rank_count_invariant():
    n = 16
    dense = _spd(n, 8)
    f = np.random.default_rng(9).standard_normal(n)

    def run(size):
        def prog(comm):
            A = from_dense(dense, comm)
            return dist_solve(comm, A, f[A.row_begin : A.row_end], tol=1e-12)

        return np.concatenate(spawn_ranks(size, prog))

    u1 = run(1)
    for size in (2, 4):
        assert np.allclose(run(size), u1, atol=1e-11)


def test_solve_zero_rhs_returns_zero():
    def prog(comm):
        A = from_dense(np.eye(4) * 3.0, comm)
        return dist_solve(comm, A, np.zeros(A.nrows_local))

    assert all(np.all(u == 0.0) for u in spawn_ranks(2, prog))


def test_solve_zero_diagonal_errors():
    dense = np.eye(4)
    dense[2, 2] = 0.0

    def prog(comm):
        A = from_dense(dense, comm)
        dist_solve(comm, A, np.ones(A.nrows_local))

    with pytest.raises(SolverError):
        spawn_ranks(2, prog, timeout=5.0)


def test_solve_gradient_matches_finite_differences():
    """Differentiate sum(u) through the solve with respect to the stored
    matrix values on rank 0; compare against central differences."""
    n = 10
    dense = _spd(n, 6)
    f = np.random.default_rng(7).standard_normal(n)

    def loss_and_grad(perturb, need_grad):
        def prog(comm):
            from distgrad.graph import SumAll, Tape
            from distgrad.collectives import SumOp

            t = Tape(comm)
            A0 = from_dense(dense, comm)
            vals = A0.values.copy()
            if comm.rank == 0 and perturb is not None:
                vals[perturb[0]] += perturb[1]
            v = t.variable(vals, param=True)
            fconst = t.constant(f[A0.row_begin : A0.row_end])
            u = t.record(sparse.SolveOp(A0, tol=1e-13), [v, fconst])
            sl = t.record(SumAll(), [u])
            loss = t.record(SumOp(0), [sl])
            t.mark_loss(loss)
            lv = t.forward()
            g = t.backward()[v] if need_grad else None
            return float(lv.ravel()[0]), g

        return spawn_ranks(2, prog)[0]

    _, g = loss_and_grad(None, True)
    eps = 1e-6
    for k in (0, 3, 7):
        lp, _ = loss_and_grad((k, eps), False)
        lm, _ = loss_and_grad((k, -eps), False)
        fd = (lp - lm) / (2.0 * eps)
        assert abs(fd - g[k]) / max(1.0, abs(g[k])) < 1e-6


# -- text import/export --------------------------------------------------


def test_matrix_text_round_trip(tmp_path):
    dense = _random_sparse(12, 0.25, 30)
    path = tmp_path / "mat.txt"

    def prog(comm):
        A = from_dense(dense, comm)
        save_matrix_text(path, A, comm, 0)

    spawn_ranks(2, prog)
    loaded = load_matrix_text(path)
    assert np.array_equal(loaded, dense)
    header = path.read_text().splitlines()[0].split()
    assert header[0] == "12" and int(header[2]) == np.count_nonzero(dense)
