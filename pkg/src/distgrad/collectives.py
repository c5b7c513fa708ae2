"""Differentiable communication operators.

Each operator's backward runs the reversed communication: broadcast/reduce
swap roles, gather/scatter swap roles, point-to-point transfers swap sender
and receiver, and halo exchange pushes ghost-cell adjoints back to the cells
that own them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Op

# tag layout: node id * TAG_STRIDE + direction (+ TAG_BACK for adjoints)
TAG_STRIDE = 16
TAG_BACK = 8

_SIDES = ("xlo", "xhi", "ylo", "yhi")
_OPPOSITE = {"xlo": "xhi", "xhi": "xlo", "ylo": "yhi", "yhi": "ylo"}
_DIR_CODE = {"xlo": 0, "xhi": 1, "ylo": 2, "yhi": 3}


class BcastOp(Op):
    name = "mpi_bcast"
    is_comm = True

    def __init__(self, root=0):
        self.root = root

    def forward(self, ctx, x):
        comm = ctx["comm"]
        buf = np.array(x, dtype=np.float64)
        comm.bcast_raw(buf, self.root)
        return buf

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        buf = np.array(grad, dtype=np.float64)
        comm.reduce_sum_raw(buf, self.root)
        if comm.rank == self.root:
            return (buf,)
        return (np.zeros_like(buf),)


class SumOp(Op):
    name = "mpi_sum"
    is_comm = True

    def __init__(self, root=0):
        self.root = root

    def forward(self, ctx, x):
        comm = ctx["comm"]
        buf = np.array(x, dtype=np.float64)
        comm.reduce_sum_raw(buf, self.root)
        if comm.rank != self.root:
            buf = np.zeros_like(buf)
        return buf

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        buf = np.array(grad, dtype=np.float64)
        comm.bcast_raw(buf, self.root)
        return (buf,)


class GatherOp(Op):
    name = "mpi_gather"
    is_comm = True

    def __init__(self, root=0):
        self.root = root

    def forward(self, ctx, x):
        comm = ctx["comm"]
        ctx["m"] = x.shape[0]
        return comm.gather_raw(x, self.root)

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        return (comm.scatter_raw(grad, self.root),)


class SendOp(Op):
    """Send to peer; output is a passthrough copy of the input."""

    name = "mpi_send"
    is_comm = True

    def __init__(self, peer, tag=0):
        self.peer = peer
        self.tag = tag

    def _tags(self, ctx):
        base = ctx["node_id"] * TAG_STRIDE + self.tag
        return base, base + TAG_BACK

    def forward(self, ctx, x):
        comm = ctx["comm"]
        fwd, _ = self._tags(ctx)
        comm.send(x, self.peer, fwd)
        ctx["shape"] = x.shape
        return x.copy()

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        _, back = self._tags(ctx)
        incoming = np.empty(ctx["shape"])
        comm.recv(incoming, self.peer, back)
        return (grad + incoming,)


class RecvOp(Op):
    name = "mpi_recv"
    is_comm = True

    def __init__(self, shape, peer, tag=0):
        self.shape = tuple(shape)
        self.peer = peer
        self.tag = tag

    def _tags(self, ctx):
        # must mirror the matching SendOp, which is recorded in the same
        # position on the peer rank
        base = ctx["node_id"] * TAG_STRIDE + self.tag
        return base, base + TAG_BACK

    def forward(self, ctx, *inputs):
        comm = ctx["comm"]
        fwd, _ = self._tags(ctx)
        buf = np.empty(self.shape)
        comm.recv(buf, self.peer, fwd)
        return buf

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        _, back = self._tags(ctx)
        comm.send(grad, self.peer, back)
        return ()


class SendRecvOp(Op):
    """Send input to dest while receiving a same-shape array from src."""

    name = "mpi_sendrecv"
    is_comm = True

    def __init__(self, dest, src, tag=0):
        self.dest = dest
        self.src = src
        self.tag = tag

    def _tags(self, ctx):
        base = ctx["node_id"] * TAG_STRIDE + self.tag
        return base, base + TAG_BACK

    def forward(self, ctx, x):
        comm = ctx["comm"]
        fwd, _ = self._tags(ctx)
        buf = np.empty_like(x)
        pending = [comm.irecv(buf, self.src, fwd), comm.isend(x, self.dest, fwd)]
        comm.wait_all(pending)
        return buf

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        _, back = self._tags(ctx)
        buf = np.empty_like(grad)
        pending = [
            comm.irecv(buf, self.dest, back),
            comm.isend(grad, self.src, back),
        ]
        comm.wait_all(pending)
        return (buf,)


# -- halo exchange ------------------------------------------------------


@dataclass
class HaloSpec:
    """Ghost-exchange geometry for one rank's patch.

    Fields are stored with an in-band ghost frame of width `depth`:
    shape (nx_local + 2*depth, ny_local + 2*depth). Sides without a
    neighbor are physical boundaries; their ghosts are zero-filled.
    Corner ghosts are never exchanged.
    """

    nx_local: int
    ny_local: int
    depth: int = 1
    neighbors: dict = field(default_factory=dict)  # side -> rank

    def __post_init__(self):
        if self.depth not in (1, 2):
            raise ValueError("depth must be 1 or 2")
        if self.depth > min(self.nx_local, self.ny_local):
            raise ValueError("depth exceeds patch dimensions")
        for side in self.neighbors:
            if side not in _SIDES:
                raise ValueError(f"unknown side {side!r}")

    @property
    def shape(self):
        d = self.depth
        return (self.nx_local + 2 * d, self.ny_local + 2 * d)

    def interior(self, a):
        d = self.depth
        return a[d:-d, d:-d]


def _strips(spec, side):
    """(boundary strip slice, ghost strip slice) for one side.

    Strips exclude corner ghosts: the off-axis extent is the interior.
    """
    d = spec.depth
    nx, ny = spec.shape
    ix = slice(d, nx - d)
    iy = slice(d, ny - d)
    if side == "xlo":
        return (slice(d, 2 * d), iy), (slice(0, d), iy)
    if side == "xhi":
        return (slice(nx - 2 * d, nx - d), iy), (slice(nx - d, nx), iy)
    if side == "ylo":
        return (ix, slice(d, 2 * d)), (ix, slice(0, d))
    if side == "yhi":
        return (ix, slice(ny - 2 * d, ny - d)), (ix, slice(ny - d, ny))
    raise ValueError(side)


def halo_exchange_forward(comm, field, spec, tag_base=0):
    """Fill ghost cells from neighbors; zero physical-boundary ghosts.

    All receives are posted before any send; a single wait completes the
    exchange, so symmetric patterns cannot deadlock.
    """
    if field.shape != spec.shape:
        raise ValueError(f"field shape {field.shape} != spec shape {spec.shape}")
    out = np.zeros_like(field)
    spec.interior(out)[:] = spec.interior(field)
    pending = []
    bufs = {}
    for side, peer in spec.neighbors.items():
        _, ghost = _strips(spec, side)
        bufs[side] = np.empty(out[ghost].shape)
        # tag encodes travel direction as seen by the sender
        tag = tag_base + _DIR_CODE[_OPPOSITE[side]]
        pending.append(comm.irecv(bufs[side], peer, tag))
    for side, peer in spec.neighbors.items():
        boundary, _ = _strips(spec, side)
        tag = tag_base + _DIR_CODE[side]
        pending.append(comm.isend(np.ascontiguousarray(field[boundary]), peer, tag))
    comm.wait_all(pending)
    for side in spec.neighbors:
        _, ghost = _strips(spec, side)
        out[ghost] = bufs[side]
    return out


def halo_exchange_backward(comm, grad_out, spec, tag_base=0):
    """Adjoint of halo_exchange_forward.

    Ghost-cell adjoints travel back to the neighbor that owns those cells
    and are added to its boundary-strip adjoint; the local ghost adjoint
    slots are zeroed (forward ignores input ghosts).
    """
    g = np.zeros_like(grad_out)
    spec.interior(g)[:] = spec.interior(grad_out)
    pending = []
    bufs = {}
    for side, peer in spec.neighbors.items():
        boundary, _ = _strips(spec, side)
        bufs[side] = np.empty(grad_out[boundary].shape)
        tag = tag_base + _DIR_CODE[_OPPOSITE[side]] + TAG_BACK
        pending.append(comm.irecv(bufs[side], peer, tag))
    for side, peer in spec.neighbors.items():
        _, ghost = _strips(spec, side)
        tag = tag_base + _DIR_CODE[side] + TAG_BACK
        pending.append(
            comm.isend(np.ascontiguousarray(grad_out[ghost]), peer, tag)
        )
    comm.wait_all(pending)
    for side in spec.neighbors:
        boundary, _ = _strips(spec, side)
        g[boundary] += bufs[side]
    return g


class HaloExchangeOp(Op):
    name = "halo_exchange"
    is_comm = True

    def __init__(self, spec):
        self.spec = spec

    def forward(self, ctx, field):
        comm = ctx["comm"]
        return halo_exchange_forward(
            comm, field, self.spec, ctx["node_id"] * TAG_STRIDE
        )

    def backward(self, ctx, grad):
        comm = ctx["comm"]
        return (
            halo_exchange_backward(
                comm, grad, self.spec, ctx["node_id"] * TAG_STRIDE
            ),
        )
