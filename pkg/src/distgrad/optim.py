"""Serial L-BFGS and its distributed form.

The distributed optimizer runs the serial algorithm on the root rank only;
before every loss (or gradient) evaluation the root broadcasts a one-integer
command so that all ranks enter the tape's collectives together. Gradient
aggregation happens inside the tape (broadcast/sum adjoints), so the
optimizer sees a plain function/gradient oracle.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

CMD_EVAL_LOSS = 0
CMD_EVAL_GRAD = 1
CMD_STOP = 2

CURVATURE_GUARD = 1e-10


@dataclass
class LbfgsState:
    m: int = 10
    gtol: float = 1e-8
    max_iter: int = 100
    pairs: deque = field(default_factory=deque)  # (s, y, 1/y.s)
    iteration: int = 0

    def push(self, s, y):
        sy = float(s @ y)
        if sy <= CURVATURE_GUARD * np.linalg.norm(s) * np.linalg.norm(y):
            return False
        self.pairs.append((s, y, 1.0 / sy))
        while len(self.pairs) > self.m:
            self.pairs.popleft()
        return True

    def direction(self, g):
        """Two-loop recursion applied to -g."""
        q = -g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if self.pairs:
            s, y, _ = self.pairs[-1]
            q *= float(s @ y) / float(y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return q


@dataclass
class HistoryEntry:
    iteration: int
    loss: float
    grad_norm: float
    step_size: float


def armijo_search(loss_fn, x, f, g, d, c1=1e-4, max_trials=40):
    """Backtracking line search; returns (step, f_new) or (None, None)."""
    gd = float(g @ d)
    if gd >= 0.0:
        return None, None
    step = 1.0
    for _ in range(max_trials):
        f_new = loss_fn(x + step * d)
        if f_new <= f + c1 * step * gd:
            return step, f_new
        step *= 0.5
    return None, None


def lbfgs_step(state, x, f, g, loss_fn):
    """One L-BFGS update. Returns (x_next, f_next, step) or (x, f, None)
    when the line search stalls."""
    d = state.direction(g)
    if float(g @ d) >= 0.0:
        d = -g
    step, f_new = armijo_search(loss_fn, x, f, g, d)
    if step is None:
        return x, f, None
    return x + step * d, f_new, step


def minimize(oracle, x0, maxiter=100, m=10, gtol=1e-8, callback=None):
    """Minimize with L-BFGS; oracle(x, need_grad) -> (loss, grad or None).

    Returns (x, history). History is non-increasing in loss; a line search
    stall terminates the loop with the current iterate.
    """
    state = LbfgsState(m=m, gtol=gtol, max_iter=maxiter)
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = oracle(x, True)
    history = [HistoryEntry(0, f, float(np.linalg.norm(g)), 0.0)]
    if callback:
        callback(0, x, f, g)
    for it in range(1, maxiter + 1):
        if np.linalg.norm(g) < gtol:
            break
        x_new, f_new, step = lbfgs_step(
            state, x, f, g, lambda z: oracle(z, False)[0]
        )
        if step is None:
            break
        _, g_new = oracle(x_new, True)
        state.push(x_new - x, g_new - g)
        x, f, g = x_new, f_new, g_new
        history.append(HistoryEntry(it, f, float(np.linalg.norm(g)), step))
        if callback:
            callback(it, x, f, g)
    return x, history


# -- distributed form ---------------------------------------------------


def evaluate_tape(comm, tape_builder, theta, need_grad):
    """Collective tape evaluation entered by every rank."""
    tape, param_id = tape_builder(comm)
    tape.seed(param_id, theta)
    loss = tape.forward()
    grad = None
    if need_grad:
        grad = tape.backward()[param_id]
    return float(np.asarray(loss).ravel()[0]), grad


def run_distributed(
    comm,
    tape_builder,
    theta0,
    maxiter=100,
    m=10,
    gtol=1e-8,
    root=0,
    callback=None,
):
    """Root runs the serial optimizer, workers loop on broadcast commands.

    tape_builder(comm) must return (tape, theta_node_id); the tape's
    broadcast/sum nodes make the loss and theta-gradient valid on root.
    Returns (theta_star, history) on root and (None, None) on workers.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)

    if comm.rank != root:
        zeros = np.zeros_like(theta0)
        while True:
            cmd = np.zeros(1)
            comm.bcast_raw(cmd, root)
            code = int(cmd[0])
            if code == CMD_STOP:
                return None, None
            evaluate_tape(comm, tape_builder, zeros, code == CMD_EVAL_GRAD)

    def oracle(theta, need_grad):
        code = CMD_EVAL_GRAD if need_grad else CMD_EVAL_LOSS
        comm.bcast_raw(np.array([float(code)]), root)
        return evaluate_tape(comm, tape_builder, theta, need_grad)

    try:
        theta, history = minimize(
            oracle, theta0, maxiter=maxiter, m=m, gtol=gtol, callback=callback
        )
    finally:
        comm.bcast_raw(np.array([float(CMD_STOP)]), root)
    return theta, history


def history_csv(history):
    lines = ["iteration,loss,grad_norm,step_size"]
    for h in history:
        lines.append(
            "%d,%.17g,%.17g,%.17g" % (h.iteration, h.loss, h.grad_norm, h.step_size)
        )
    return "\n".join(lines) + "\n"
