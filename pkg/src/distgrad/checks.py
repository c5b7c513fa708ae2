"""Adjoint (dot-product) and finite-difference verification suites.

For every communication operator F the identity
sum_ranks <F v, w> = sum_ranks <v, F^T w> is evaluated over random inputs;
multi-input operators are linearized slot by slot (each slot is exactly
linear, so the Jacobian action is a difference of forwards).
"""

from __future__ import annotations

import numpy as np

from . import nn, pde, sparse
from .collectives import (
    BcastOp,
    GatherOp,
    HaloExchangeOp,
    RecvOp,
    SendOp,
    SendRecvOp,
    SumOp,
)
from .comm import spawn_ranks
from .graph import Tape, PowConst
from .pde import AcousticStepOp

DEFAULT_GRIDS = ((1, 1), (1, 2), (2, 2), (3, 3))


def _global_dot(comm, a, b):
    buf = np.array([float(np.asarray(a).ravel() @ np.asarray(b).ravel())])
    comm.allreduce_sum(buf)
    return float(buf[0])


def _rel_err(lhs, rhs):
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return abs(lhs - rhs) / scale


def _simple_op_trial(comm, op, shapes, rng, corrupt=False):
    """Dot test for a single-input tape op at a random point."""
    ctx = {"comm": comm, "node_id": 1}
    v = rng.standard_normal(shapes)
    out = op.forward(ctx, v)
    w = rng.standard_normal(out.shape)
    # broadcast w consistency is not needed; each rank draws its own w
    lhs = _global_dot(comm, out, w)
    (gv,) = op.backward(ctx, w)
    rhs = _global_dot(comm, v, gv)
    if corrupt:
        rhs *= 1.0 + 1e-3
    return _rel_err(lhs, rhs)


def adjoint_collectives(comm, trials=20, seed=0, corrupt=None):
    """Max dot-test error per collective on this communicator."""
    rng = np.random.default_rng(seed + 1000 * comm.rank)
    # all ranks must draw array shapes identically where required
    shape_rng = np.random.default_rng(seed)
    errs = {}

    def run(name, op, shape):
        worst = 0.0
        for _ in range(trials):
            worst = max(
                worst,
                _simple_op_trial(comm, op, shape, rng, corrupt == name),
            )
        errs[name] = worst

    m = int(shape_rng.integers(3, 8))
    run("bcast", BcastOp(0), m)
    run("sum", SumOp(0), m)
    run("gather", GatherOp(0), m)

    if comm.size >= 2:
        worst = 0.0
        for _ in range(trials):
            ctx = {"comm": comm, "node_id": 2}
            if comm.rank == 0:
                op = SendOp(1, 0)
            elif comm.rank == 1:
                op = RecvOp((m,), 0, 0)
            else:
                op = None
            v = rng.standard_normal(m)
            if comm.rank == 0:
                out = op.forward(ctx, v)
            elif comm.rank == 1:
                out = op.forward(ctx)
            else:
                out = np.zeros(0)
            w = rng.standard_normal(out.shape)
            lhs = _global_dot(comm, out, w)
            if comm.rank == 0:
                (gv,) = op.backward(ctx, w)
                rhs_local = v @ gv
            elif comm.rank == 1:
                op.backward(ctx, w)
                rhs_local = 0.0
            else:
                rhs_local = 0.0
            buf = np.array([rhs_local])
            comm.allreduce_sum(buf)
            rhs = float(buf[0])
            if corrupt == "sendrecv_pair":
                rhs *= 1.0 + 1e-3
            worst = max(worst, _rel_err(lhs, rhs))
        errs["send_recv"] = worst

        worst = 0.0
        for _ in range(trials):
            ctx = {"comm": comm, "node_id": 3}
            dest = (comm.rank + 1) % comm.size
            src = (comm.rank - 1) % comm.size
            op = SendRecvOp(dest, src)
            v = rng.standard_normal(m)
            out = op.forward(ctx, v)
            w = rng.standard_normal(m)
            lhs = _global_dot(comm, out, w)
            (gv,) = op.backward(ctx, w)
            rhs = _global_dot(comm, v, gv)
            worst = max(worst, _rel_err(lhs, rhs))
        errs["sendrecv"] = worst
    return errs


def adjoint_halo(comm, part, depth, trials=20, seed=0, corrupt=None):
    rng = np.random.default_rng(seed + 1000 * comm.rank)
    spec = part.halo_spec(comm.rank, depth)
    op = HaloExchangeOp(spec)
    worst = 0.0
    for _ in range(trials):
        worst = max(
            worst,
            _simple_op_trial(
                comm, op, spec.shape, rng, corrupt == f"halo_exchange_d{depth}"
            ),
        )
    return worst


def adjoint_sparse_ops(comm, trials=20, seed=0, corrupt=None):
    """Dot tests for dist_spmv (both slots) and dist_transpose."""
    master = np.random.default_rng(seed)
    n = int(master.integers(20, 40))
    dense = (master.random((n, n)) < 0.3) * master.standard_normal((n, n))
    A = sparse.from_dense(dense, comm)
    rng = np.random.default_rng(seed + 1000 * comm.rank)
    errs = {"dist_spmv": 0.0, "dist_transpose": 0.0}
    for _ in range(trials):
        op = sparse.SpmvOp(A)
        ctx = {"comm": comm, "node_id": 4}
        x0 = rng.standard_normal(A.nrows_local)
        v_vals = rng.standard_normal(A.nnz_local)
        v_x = rng.standard_normal(A.nrows_local)
        base = op.forward(ctx, A.values, x0)
        j1 = op.forward(ctx, A.values + v_vals, x0) - base
        j2 = op.forward(ctx, A.values, x0 + v_x) - base
        Jv = j1 + j2
        # restore the linearization point for backward
        op.forward(ctx, A.values, x0)
        w = rng.standard_normal(base.shape)
        lhs = _global_dot(comm, Jv, w)
        g_vals, g_x = op.backward(ctx, w)
        rhs = _global_dot(comm, v_vals, g_vals) + _global_dot(comm, v_x, g_x)
        if corrupt == "dist_spmv":
            rhs *= 1.0 + 1e-3
        errs["dist_spmv"] = max(errs["dist_spmv"], _rel_err(lhs, rhs))

        top = sparse.TransposeOp(A)
        ctx = {"comm": comm, "node_id": 5}
        v = rng.standard_normal(A.nnz_local)
        out = top.forward(ctx, v)
        w = rng.standard_normal(out.shape)
        lhs = _global_dot(comm, out, w)
        (gv,) = top.backward(ctx, w)
        rhs = _global_dot(comm, v, gv)
        if corrupt == "dist_transpose":
            rhs *= 1.0 + 1e-3
        errs["dist_transpose"] = max(errs["dist_transpose"], _rel_err(lhs, rhs))
    return errs


def adjoint_acoustic(comm, part, trials=20, seed=0, corrupt=None):
    rng = np.random.default_rng(seed + 1000 * comm.rank)
    spec = part.halo_spec(comm.rank, 1)
    op = AcousticStepOp(r=0.37)
    worst = 0.0
    for _ in range(trials):
        ctx = {"comm": comm, "node_id": 6}
        up0 = rng.standard_normal(spec.shape)
        uc0 = rng.standard_normal(spec.shape)
        cs0 = rng.random(spec.shape) + 0.5
        vs = [rng.standard_normal(spec.shape) for _ in range(3)]
        base = op.forward(ctx, up0, uc0, cs0)
        Jv = (
            (op.forward(ctx, up0 + vs[0], uc0, cs0) - base)
            + (op.forward(ctx, up0, uc0 + vs[1], cs0) - base)
            + (op.forward(ctx, up0, uc0, cs0 + vs[2]) - base)
        )
        op.forward(ctx, up0, uc0, cs0)
        w = rng.standard_normal(base.shape)
        lhs = _global_dot(comm, Jv, w)
        grads = op.backward(ctx, w)
        rhs = sum(_global_dot(comm, v, g) for v, g in zip(vs, grads))
        if corrupt == "acoustic_step":
            rhs *= 1.0 + 1e-3
        worst = max(worst, _rel_err(lhs, rhs))
    return worst


def adjoint_suite(grids=DEFAULT_GRIDS, trials=20, seed=0, corrupt=None):
    """Run every adjoint test on every rank grid; returns {(op, grid): err}."""
    results = {}
    for px, py in grids:
        size = px * py

        def prog(comm, px=px, py=py):
            part = pde.partition_grid(4 * px, 4 * py, px, py, h=1.0)
            out = adjoint_collectives(comm, trials, seed, corrupt)
            out["halo_exchange_d1"] = adjoint_halo(
                comm, part, 1, trials, seed, corrupt
            )
            out["halo_exchange_d2"] = adjoint_halo(
                comm, part, 2, trials, seed, corrupt
            )
            out.update(adjoint_sparse_ops(comm, trials, seed, corrupt))
            out["acoustic_step"] = adjoint_acoustic(
                comm, part, trials, seed, corrupt
            )
            return out

        per_rank = spawn_ranks(size, prog)
        for name in per_rank[0]:
            results[(name, (px, py))] = max(r[name] for r in per_rank)
    return results


# -- finite-difference checks -------------------------------------------


def demo_loss_gradient(theta_val, size=4, root=0):
    """The broadcast/power/sum demo tape: returns (loss, grad) from root."""

    def prog(comm):
        t = Tape(comm)
        th = t.variable(
            np.array([theta_val if comm.rank == root else 0.0]), param=True
        )
        b = t.record(BcastOp(root), [th])
        p = t.record(PowConst(comm.rank), [b])
        s = t.record(SumOp(root), [p])
        t.mark_loss(s)
        loss = t.forward()
        g = t.backward()[th]
        return float(loss[0] if loss.ndim else loss), float(g[0])

    return spawn_ranks(size, prog)[root]


def fd_check_tape(run_loss_grad, theta, components, eps=1e-6):
    """Central finite differences against the tape gradient.

    run_loss_grad(theta, need_grad) -> (loss, grad or None).
    Returns max relative error over the requested components.
    """
    _, g = run_loss_grad(theta, True)
    worst = 0.0
    for i in components:
        tp = theta.copy()
        tp[i] += eps
        tm = theta.copy()
        tm[i] -= eps
        fd = (run_loss_grad(tp, False)[0] - run_loss_grad(tm, False)[0]) / (
            2.0 * eps
        )
        worst = max(worst, abs(fd - g[i]) / max(1.0, abs(g[i])))
    return worst
