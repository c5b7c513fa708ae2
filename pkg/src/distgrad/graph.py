"""Reverse-mode tape whose nodes may be communication operations.

Recording is identical on every rank by construction (all ranks run the same
program), and the scheduler forces all communication nodes into a single
total order shared by every rank: each communication node gets an artificial
edge to the next-created communication node, and ties in the topological
sort are broken by creation id.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np


class Op:
    """Base class for tape operations.

    Subclasses implement forward(ctx, *inputs) -> value and
    backward(ctx, grad) -> per-input gradients (None where undefined).
    ctx is a per-node scratch dict; ctx["comm"] is the Communicator.
    """

    name = "op"
    is_comm = False

    def forward(self, ctx, *inputs):
        raise NotImplementedError

    def backward(self, ctx, grad):
        raise NotImplementedError


@dataclass
class Node:
    id: int
    op: Op
    inputs: list[int]
    value: np.ndarray | None = None
    adjoint: np.ndarray | None = None
    ctx: dict = field(default_factory=dict)

    @property
    def is_comm(self):
        return self.op.is_comm


class _Variable(Op):
    """Leaf node; value is seeded before forward."""

    name = "variable"

    def forward(self, ctx, *inputs):
        return ctx["value"]

    def backward(self, ctx, grad):
        return ()


class Tape:
    """Define-by-recording reverse-mode tape."""

    def __init__(self, comm=None):
        self.comm = comm
        self.nodes: list[Node] = []
        self.param_ids: list[int] = []
        self.loss_id: int | None = None
        self._executed = False

    # -- construction ---------------------------------------------------

    def record(self, op, inputs=()):
        inputs = list(inputs)
        for i in inputs:
            if not (0 <= i < len(self.nodes)):
                raise ValueError(f"unknown input node id {i}")
        node = Node(len(self.nodes), op, inputs)
        node.ctx["comm"] = self.comm
        node.ctx["node_id"] = node.id
        self.nodes.append(node)
        return node.id

    def variable(self, value, param=False):
        nid = self.record(_Variable())
        self.nodes[nid].ctx["value"] = np.asarray(value, dtype=np.float64)
        if param:
            self.param_ids.append(nid)
        return nid

    def constant(self, value):
        return self.variable(value, param=False)

    def seed(self, nid, value):
        self.nodes[nid].ctx["value"] = np.asarray(value, dtype=np.float64)

    def mark_loss(self, nid):
        self.loss_id = nid

    # -- scheduling -----------------------------------------------------

    def execution_order(self):
        """Topological order with communication nodes in ascending id order."""
        n = len(self.nodes)
        succs = [[] for _ in range(n)]
        indeg = [0] * n
        for node in self.nodes:
            for i in node.inputs:
                succs[i].append(node.id)
                indeg[node.id] += 1
        # ghost edges serializing the communication nodes
        comm_ids = [node.id for node in self.nodes if node.is_comm]
        for a, b in zip(comm_ids, comm_ids[1:]):
            succs[a].append(b)
            indeg[b] += 1
        ready = [i for i in range(n) if indeg[i] == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            i = heapq.heappop(ready)
            order.append(i)
            for j in succs[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    heapq.heappush(ready, j)
        if len(order) != n:
            raise RuntimeError("cycle in tape (corrupted recording)")
        return order

    # -- execution ------------------------------------------------------

    def forward(self):
        order = self.execution_order()
        for i in order:
            node = self.nodes[i]
            args = [self.nodes[j].value for j in node.inputs]
            try:
                node.value = np.asarray(node.op.forward(node.ctx, *args))
            except Exception as exc:
                raise type(exc)(f"node {i} ({node.op.name}): {exc}") from exc
            node.adjoint = None
        self._executed = True
        self._order = order
        if self.loss_id is not None:
            return self.nodes[self.loss_id].value
        return None

    def backward(self):
        if not self._executed:
            raise RuntimeError("backward called before forward")
        if self.loss_id is None:
            raise RuntimeError("no loss node marked")
        loss = self.nodes[self.loss_id]
        if loss.value.size != 1:
            raise RuntimeError("loss must be scalar")
        for node in self.nodes:
            node.adjoint = np.zeros_like(node.value)
        loss.adjoint = np.ones_like(loss.value)
        for i in reversed(self._order):
            node = self.nodes[i]
            if isinstance(node.op, _Variable):
                continue
            grads = node.op.backward(node.ctx, node.adjoint)
            for j, g in zip(node.inputs, grads):
                if g is not None:
                    self.nodes[j].adjoint = self.nodes[j].adjoint + g
        return {p: self.nodes[p].adjoint for p in self.param_ids}

    def gradient(self):
        """Forward + backward; returns (loss, {param id: gradient})."""
        loss = self.forward()
        grads = self.backward()
        return loss, grads

    # -- debugging ------------------------------------------------------

    def dump(self):
        lines = []
        for node in self.nodes:
            shape = None if node.value is None else node.value.shape
            flags = " comm" if node.is_comm else ""
            lines.append(
                f"{node.id:4d} {node.op.name:<20s} inputs={node.inputs} "
                f"shape={shape}{flags}"
            )
        return "\n".join(lines)


# -- elementwise local ops ----------------------------------------------


class Add(Op):
    name = "add"

    def forward(self, ctx, a, b):
        return a + b

    def backward(self, ctx, grad):
        return grad, grad


class Sub(Op):
    name = "sub"

    def forward(self, ctx, a, b):
        return a - b

    def backward(self, ctx, grad):
        return grad, -grad


class Mul(Op):
    name = "mul"

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    def backward(self, ctx, grad):
        return grad * ctx["b"], grad * ctx["a"]


class Scale(Op):
    name = "scale"

    def __init__(self, alpha):
        self.alpha = float(alpha)

    def forward(self, ctx, a):
        return self.alpha * a

    def backward(self, ctx, grad):
        return (self.alpha * grad,)


class Square(Op):
    name = "square"

    def forward(self, ctx, a):
        ctx["a"] = a
        return a * a

    def backward(self, ctx, grad):
        return (2.0 * ctx["a"] * grad,)


class PowConst(Op):
    name = "pow_const"

    def __init__(self, k):
        self.k = int(k)

    def forward(self, ctx, a):
        ctx["a"] = a
        return a ** self.k

    def backward(self, ctx, grad):
        a = ctx["a"]
        if self.k == 0:
            return (np.zeros_like(a),)
        return (self.k * a ** (self.k - 1) * grad,)


class SumAll(Op):
    name = "sum_all"

    def forward(self, ctx, a):
        ctx["shape"] = a.shape
        return np.array(a.sum())

    def backward(self, ctx, grad):
        return (np.full(ctx["shape"], float(grad)),)


class Dot(Op):
    name = "dot"

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return np.array(a.ravel() @ b.ravel())

    def backward(self, ctx, grad):
        g = float(grad)
        return g * ctx["b"], g * ctx["a"]
