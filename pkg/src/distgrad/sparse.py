"""Row-striped distributed CSR matrices.

Each rank owns a contiguous stripe of rows stored as a local CSR block with
global column indices. Provides SpMV, a two-phase parallel transpose, and a
Jacobi-preconditioned conjugate-gradient solve, plus tape operators whose
backward passes reverse the communication.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .graph import Op

_TR_TAG = 10_000_000  # point-to-point tag block reserved for transposes


class SolverError(RuntimeError):
    """CG failed to reach the requested tolerance."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


def partition_starts(n, size):
    """Balanced contiguous row partition boundaries, length size+1."""
    counts = np.full(size, n // size, dtype=np.int64)
    counts[: n % size] += 1
    return np.concatenate(([0], np.cumsum(counts)))


@dataclass
class DistCSR:
    n: int
    row_begin: int
    row_end: int
    indptr: np.ndarray
    indices: np.ndarray  # global column ids
    values: np.ndarray
    starts: np.ndarray  # all ranks' stripe boundaries, length size+1

    @property
    def nrows_local(self):
        return self.row_end - self.row_begin

    @property
    def nnz_local(self):
        return len(self.values)

    def with_values(self, values):
        return replace(self, values=np.asarray(values, dtype=np.float64))

    def local_diagonal(self):
        """Entries with global column == global row, zeros where absent."""
        diag = np.zeros(self.nrows_local)
        for i in range(self.nrows_local):
            lo, hi = self.indptr[i], self.indptr[i + 1]
            k = np.searchsorted(self.indices[lo:hi], self.row_begin + i)
            if k < hi - lo and self.indices[lo + k] == self.row_begin + i:
                diag[i] = self.values[lo + k]
        return diag


@dataclass
class DistVector:
    n: int
    begin: int
    end: int
    values: np.ndarray


def from_dense(dense, comm, starts=None):
    """Build this rank's stripe of a distributed CSR from a global dense array."""
    dense = np.asarray(dense, dtype=np.float64)
    n = dense.shape[0]
    if starts is None:
        starts = partition_starts(n, comm.size)
    b, e = int(starts[comm.rank]), int(starts[comm.rank + 1])
    indptr = [0]
    indices = []
    values = []
    for i in range(b, e):
        (cols,) = np.nonzero(dense[i])
        indices.append(cols)
        values.append(dense[i, cols])
        indptr.append(indptr[-1] + len(cols))
    return DistCSR(
        n,
        b,
        e,
        np.asarray(indptr, dtype=np.int64),
        np.concatenate(indices) if indices else np.empty(0, dtype=np.int64),
        np.concatenate(values) if values else np.empty(0),
        np.asarray(starts, dtype=np.int64),
    )


def to_dense(A, comm, root=0):
    """Gather the global dense matrix on root (oracle/testing helper)."""
    rows = np.repeat(
        np.arange(A.row_begin, A.row_end), np.diff(A.indptr)
    ).astype(np.float64)
    cols = A.indices.astype(np.float64)
    packed = np.concatenate([rows, cols, A.values])
    chunks = gatherv(comm, packed, root)
    if comm.rank != root:
        return None
    dense = np.zeros((A.n, A.n))
    for chunk in chunks:
        k = len(chunk) // 3
        r, c, v = chunk[:k], chunk[k : 2 * k], chunk[2 * k :]
        dense[r.astype(np.int64), c.astype(np.int64)] = v
    return dense


# -- variable-length collectives built from fixed-length primitives -----


def gatherv(comm, local, root=0):
    """Gather variable-length 1-D arrays; root gets the per-rank list."""
    local = np.asarray(local, dtype=np.float64)
    n = np.array([len(local)], dtype=np.float64)
    counts = comm.gather_raw(n, root)
    m = np.array([0.0])
    if comm.rank == root:
        m[0] = counts.max() if len(counts) else 0.0
    comm.bcast_raw(m, root)
    m = int(m[0])
    padded = np.zeros(m)
    padded[: len(local)] = local
    full = comm.gather_raw(padded, root)
    if comm.rank != root:
        return None
    return [
        full[r * m : r * m + int(counts[r])] for r in range(comm.size)
    ]


def allgatherv(comm, local, counts, root=0):
    """Concatenate per-rank segments of known lengths onto every rank."""
    local = np.asarray(local, dtype=np.float64)
    m = int(max(counts))
    padded = np.zeros(m)
    padded[: len(local)] = local
    full = comm.gather_raw(padded, root)
    if comm.rank != root:
        full = np.empty(m * comm.size)
    comm.bcast_raw(full, root)
    return np.concatenate(
        [full[r * m : r * m + int(counts[r])] for r in range(comm.size)]
    )


def global_dot(comm, a, b, root=0):
    buf = np.array([float(a @ b)])
    comm.allreduce_sum(buf, root)
    return float(buf[0])


# -- SpMV ---------------------------------------------------------------


def assemble_full_vector(comm, A, x_local):
    counts = np.diff(A.starts)
    return allgatherv(comm, x_local, counts)


def dist_spmv(comm, A, x_local):
    """y = A x for the owned row stripe; off-stripe x via allgather."""
    if len(x_local) != A.nrows_local:
        raise ValueError("x partition does not conform to A rows")
    x_full = assemble_full_vector(comm, A, x_local)
    y = np.empty(A.nrows_local)
    kernels.csr_spmv(A.indptr, A.indices, A.values, x_full, y)
    return y


# -- two-phase parallel transpose ---------------------------------------


class TransposeContext:
    """Communication record needed to reverse a transpose."""

    __slots__ = ("sel", "recv_counts", "order", "nnz_local", "tag_base")

    def __init__(self, sel, recv_counts, order, nnz_local, tag_base):
        self.sel = sel
        self.recv_counts = recv_counts
        self.order = order
        self.nnz_local = nnz_local
        self.tag_base = tag_base


def dist_transpose(comm, A, tag_base=_TR_TAG):
    """Transpose a row-striped CSR in parallel.

    Phase 1 sends the per-destination nonzero counts so receivers can size
    their buffers; phase 2 sends (row, col, value) triplets. Each receiver
    transposes its incoming blocks locally and assembles a sorted CSR
    stripe over the same partition boundaries.
    """
    size = comm.size
    starts = A.starts
    rows = np.repeat(np.arange(A.row_begin, A.row_end), np.diff(A.indptr))
    cols = A.indices
    dest = np.searchsorted(starts, cols, side="right") - 1
    sel = [np.flatnonzero(dest == j) for j in range(size)]

    # phase 1: counts
    count_bufs = [np.empty(1, dtype=np.int64) for _ in range(size)]
    pending = [
        comm.irecv(count_bufs[p], p, tag_base) for p in range(size)
    ]
    for j in range(size):
        pending.append(
            comm.isend(np.array([len(sel[j])], dtype=np.int64), j, tag_base)
        )
    comm.wait_all(pending)
    recv_counts = [int(b[0]) for b in count_bufs]

    # phase 2: triplets
    r_bufs = [np.empty(c, dtype=np.int64) for c in recv_counts]
    c_bufs = [np.empty(c, dtype=np.int64) for c in recv_counts]
    v_bufs = [np.empty(c) for c in recv_counts]
    pending = []
    for p in range(size):
        pending.append(comm.irecv(r_bufs[p], p, tag_base + 1))
        pending.append(comm.irecv(c_bufs[p], p, tag_base + 2))
        pending.append(comm.irecv(v_bufs[p], p, tag_base + 3))
    for j in range(size):
        pending.append(comm.isend(rows[sel[j]], j, tag_base + 1))
        pending.append(comm.isend(cols[sel[j]], j, tag_base + 2))
        pending.append(comm.isend(A.values[sel[j]], j, tag_base + 3))
    comm.wait_all(pending)

    # transpose blocks locally and assemble the sorted stripe
    new_rows = np.concatenate(c_bufs) if c_bufs else np.empty(0, dtype=np.int64)
    new_cols = np.concatenate(r_bufs) if r_bufs else np.empty(0, dtype=np.int64)
    new_vals = np.concatenate(v_bufs) if v_bufs else np.empty(0)
    order = np.lexsort((new_cols, new_rows))
    b, e = int(starts[comm.rank]), int(starts[comm.rank + 1])
    sorted_rows = new_rows[order] - b
    indptr = np.zeros(e - b + 1, dtype=np.int64)
    np.add.at(indptr, sorted_rows + 1, 1)
    indptr = np.cumsum(indptr)
    T = DistCSR(A.n, b, e, indptr, new_cols[order], new_vals[order], starts)
    ctx = TransposeContext(sel, recv_counts, order, A.nnz_local, tag_base)
    return T, ctx


def dist_transpose_backward(comm, ctx, grad_T_values, tag_base=None):
    """Route transposed-value adjoints back to the original value slots."""
    tag = (ctx.tag_base if tag_base is None else tag_base) + 4
    size = comm.size
    unsorted = np.empty(len(grad_T_values))
    unsorted[ctx.order] = grad_T_values
    offsets = np.concatenate(([0], np.cumsum(ctx.recv_counts)))
    bufs = [np.empty(len(ctx.sel[j])) for j in range(size)]
    pending = [comm.irecv(bufs[j], j, tag) for j in range(size)]
    for p in range(size):
        pending.append(
            comm.isend(unsorted[offsets[p] : offsets[p + 1]], p, tag)
        )
    comm.wait_all(pending)
    grad_A = np.zeros(ctx.nnz_local)
    for j in range(size):
        grad_A[ctx.sel[j]] = bufs[j]
    return grad_A


# -- distributed conjugate gradient -------------------------------------


def dist_solve(comm, A, f_local, tol=1e-10, maxit=None):
    """Solve A u = f with Jacobi-preconditioned CG (A must be SPD).

    Global dot products use a fixed ascending-rank reduction followed by a
    broadcast, so the iteration is bitwise deterministic run-to-run.
    """
    if maxit is None:
        maxit = 10 * A.n
    diag = A.local_diagonal()
    if np.any(diag == 0.0):
        raise SolverError("zero diagonal entry; Jacobi preconditioner undefined")
    x = np.zeros(A.nrows_local)
    r = np.asarray(f_local, dtype=np.float64).copy()
    fnorm = np.sqrt(global_dot(comm, r, r))
    if fnorm == 0.0:
        return x
    z = r / diag
    p = z.copy()
    rz = global_dot(comm, r, z)
    for _ in range(maxit):
        q = dist_spmv(comm, A, p)
        pq = global_dot(comm, p, q)
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        rnorm = np.sqrt(global_dot(comm, r, r))
        if rnorm <= tol * fnorm:
            return x
        z = r / diag
        rz_new = global_dot(comm, r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"CG did not reach tol={tol:g} within {maxit} iterations "
        f"(relative residual {rnorm / fnorm:.3e})",
        residual=rnorm / fnorm,
    )


# -- plain-text matrix import/export ------------------------------------


def save_matrix_text(path, A, comm, root=0):
    """Write the global matrix as 'n n nnz' + 1-based 'i j v' lines on root."""
    dense = to_dense(A, comm, root)
    if comm.rank != root:
        return
    r, c = np.nonzero(dense)
    with open(path, "w") as fh:
        fh.write(f"{A.n} {A.n} {len(r)}\n")
        for i, j in zip(r, c):
            fh.write("%d %d %.17g\n" % (i + 1, j + 1, dense[i, j]))


def load_matrix_text(path):
    """Read a matrix written by save_matrix_text into a dense array."""
    with open(path) as fh:
        n, _, nnz = (int(t) for t in fh.readline().split())
        dense = np.zeros((n, n))
        for _ in range(nnz):
            i, j, v = fh.readline().split()
            dense[int(i) - 1, int(j) - 1] = float(v)
    return dense


# -- tape operators -----------------------------------------------------


class SpmvOp(Op):
    """y = A x, differentiable in A.values and x."""

    name = "dist_spmv"
    is_comm = True

    def __init__(self, struct):
        self.struct = struct

    def forward(self, ctx, values, x):
        comm = ctx["comm"]
        A = self.struct.with_values(values)
        ctx["A"] = A
        ctx["x_full"] = assemble_full_vector(comm, A, x)
        y = np.empty(A.nrows_local)
        kernels.csr_spmv(A.indptr, A.indices, A.values, ctx["x_full"], y)
        return y

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        A = ctx["A"]
        T, _ = dist_transpose(comm, A)
        grad_x = dist_spmv(comm, T, grad)
        grad_vals = np.repeat(grad, np.diff(A.indptr)) * ctx["x_full"][A.indices]
        return grad_vals, grad_x


class TransposeOp(Op):
    """values -> transpose(values); backward reverses the communication."""

    name = "dist_transpose"
    is_comm = True

    def __init__(self, struct):
        self.struct = struct
        self.result_struct = None

    def forward(self, ctx, values):
        comm = ctx["comm"]
        A = self.struct.with_values(values)
        T, tctx = dist_transpose(comm, A)
        ctx["tctx"] = tctx
        self.result_struct = T
        return T.values

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        return (dist_transpose_backward(comm, ctx["tctx"], grad),)


class SolveOp(Op):
    """u = A^{-1} f, differentiable in A.values and f.

    Backward solves the adjoint system with the transposed matrix, then
    chains the solution into the f-adjoint and the stored-entry adjoints.
    """

    name = "dist_solve"
    is_comm = True

    def __init__(self, struct, tol=1e-10, maxit=None):
        self.struct = struct
        self.tol = tol
        self.maxit = maxit

    def forward(self, ctx, values, f):
        comm = ctx["comm"]
        A = self.struct.with_values(values)
        ctx["A"] = A
        u = dist_solve(comm, A, f, self.tol, self.maxit)
        ctx["u"] = u
        return u

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        A = ctx["A"]
        T, _ = dist_transpose(comm, A)
        lam = dist_solve(comm, T, grad, self.tol, self.maxit)
        u_full = assemble_full_vector(comm, A, ctx["u"])
        grad_vals = -np.repeat(lam, np.diff(A.indptr)) * u_full[A.indices]
        return grad_vals, lam
