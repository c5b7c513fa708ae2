"""Rank abstraction and raw message-passing primitives.

The default backend runs every rank as a thread inside the current process.
Ranks communicate only through the shared backend object: collectives go
through a sequence-numbered rendezvous (so mismatched call orders become
errors instead of hangs) and point-to-point transfers go through per-rank
mailboxes keyed by (source, tag).
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

DEFAULT_WATCHDOG = 30.0
_POLL = 0.05


class CommError(Exception):
    """Base class for communication failures."""


class ProtocolError(CommError):
    """Ranks disagreed on the collective being executed or on payload shapes."""


class DeadlockError(CommError):
    """The watchdog fired while at least one rank was blocked."""


class AbortError(CommError):
    """Another rank failed; this rank is being torn down."""


@dataclass
class PendingTransfer:
    kind: str  # "send" | "recv"
    peer: int
    tag: int
    buffer: np.ndarray | None = None


class _CollectiveSlot:
    __slots__ = ("header", "contribs", "arrived", "done", "result", "readers")

    def __init__(self, size):
        self.header = None  # (kind, root, length)
        self.contribs = [None] * size
        self.arrived = 0
        self.done = False
        self.result = None
        self.readers = 0


class _Backend:
    """State shared by all ranks of one spawn."""

    def __init__(self, size, timeout):
        self.size = size
        self.timeout = timeout
        self.cond = threading.Condition()
        self.slots = {}  # seq -> _CollectiveSlot
        self.mailboxes = [dict() for _ in range(size)]  # (src, tag) -> deque
        self.abort = None  # first exception, propagated everywhere
        self.last_op = ["<idle>"] * size

    def set_abort(self, exc):
        with self.cond:
            if self.abort is None:
                self.abort = exc
            self.cond.notify_all()

    def _deadline_wait(self, pred, rank):
        """Wait under self.cond until pred() or abort/timeout. Lock must be held."""
        deadline = None
        while not pred():
            if self.abort is not None:
                raise AbortError(str(self.abort)) from self.abort
            if deadline is None:
                deadline = time.monotonic() + self.timeout
            else:
                if time.monotonic() > deadline:
                    diag = "; ".join(
                        f"rank {r}: {op}" for r, op in enumerate(self.last_op)
                    )
                    err = DeadlockError(
                        f"watchdog fired after {self.timeout:.1f}s while rank "
                        f"{rank} was blocked ({self.last_op[rank]}); last posted "
                        f"operations: {diag}"
                    )
                    if self.abort is None:
                        self.abort = err
                    self.cond.notify_all()
                    raise err
            self.cond.wait(_POLL)


class Communicator:
    """Handle a rank uses for all communication within one spawn."""

    def __init__(self, rank, size, backend):
        self.rank = rank
        self.size = size
        self._backend = backend
        self._seq = 0

    # -- collectives ----------------------------------------------------

    def _collective(self, kind, root, payload, length):
        be = self._backend
        seq = self._seq
        self._seq += 1
        header = (kind, root, length)
        with be.cond:
            be.last_op[self.rank] = f"{kind}#{seq}"
            slot = be.slots.get(seq)
            if slot is None:
                slot = be.slots[seq] = _CollectiveSlot(be.size)
            if slot.header is None:
                slot.header = header
            elif slot.header != header:
                err = ProtocolError(
                    f"collective mismatch at sequence {seq}: rank {self.rank} "
                    f"posted {header} but another rank posted {slot.header}"
                )
                if be.abort is None:
                    be.abort = err
                be.cond.notify_all()
                raise err
            slot.contribs[self.rank] = payload
            slot.arrived += 1
            if slot.arrived == be.size:
                slot.result = self._combine(kind, root, slot.contribs)
                slot.done = True
                be.cond.notify_all()
            else:
                be._deadline_wait(lambda: slot.done, self.rank)
            result = slot.result
            slot.readers += 1
            if slot.readers == be.size:
                del be.slots[seq]
        return result

    @staticmethod
    def _combine(kind, root, contribs):
        if kind == "bcast":
            return contribs[root]
        if kind == "reduce_sum":
            # fixed ascending-rank order keeps reductions bitwise deterministic
            acc = contribs[0].copy()
            for c in contribs[1:]:
                acc += c
            return acc
        if kind == "gather":
            return np.concatenate(contribs)
        if kind == "scatter":
            full = contribs[root]
            return np.array_split(full, len(contribs))
        raise CommError(f"unknown collective kind {kind!r}")

    # -- public raw API -------------------------------------------------

    def bcast_raw(self, buf, root=0):
        buf = np.asarray(buf)
        out = self._collective("bcast", root, buf.copy(), buf.shape)
        np.copyto(buf, out)
        return buf

    def reduce_sum_raw(self, buf, root=0):
        buf = np.asarray(buf)
        out = self._collective("reduce_sum", root, buf.copy(), buf.shape)
        if self.rank == root:
            np.copyto(buf, out)
        return buf

    def allreduce_sum(self, buf, root=0):
        """reduce_sum then bcast; every rank ends with the global sum."""
        self.reduce_sum_raw(buf, root)
        self.bcast_raw(buf, root)
        return buf

    def gather_raw(self, local, root=0):
        local = np.asarray(local)
        out = self._collective("gather", root, local.copy(), local.shape)
        if self.rank == root:
            return out
        return np.empty(0, dtype=local.dtype)

    def scatter_raw(self, full, root=0):
        if self.rank == root:
            full = np.asarray(full)
            if full.shape[0] % self.size != 0:
                err = ProtocolError(
                    f"scatter length {full.shape[0]} not divisible by "
                    f"size {self.size}"
                )
                self._backend.set_abort(err)
                raise err
            payload = full.copy()
        else:
            payload = None
        # non-root ranks learn the chunk length from the root's header
        parts = self._collective("scatter", root, payload, "scatter")
        return parts[self.rank].copy()

    def allgather(self, local, root=0):
        """Gather on root then broadcast; every rank gets the concatenation."""
        local = np.asarray(local)
        full = self.gather_raw(local, root)
        if self.rank != root:
            full = np.empty(local.shape[0] * self.size, dtype=local.dtype)
        self.bcast_raw(full, root)
        return full

    def sync_array(self, buf, root=0):
        """Non-differentiable array synchronization (alias of bcast_raw)."""
        return self.bcast_raw(buf, root)

    # -- point-to-point -------------------------------------------------

    def isend(self, buf, peer, tag):
        be = self._backend
        msg = np.asarray(buf).copy()
        with be.cond:
            be.last_op[self.rank] = f"isend(peer={peer}, tag={tag})"
            box = be.mailboxes[peer]
            key = (self.rank, tag)
            if key not in box:
                box[key] = deque()
            box[key].append(msg)
            be.cond.notify_all()
        return PendingTransfer("send", peer, tag)

    def irecv(self, buf, peer, tag):
        return PendingTransfer("recv", peer, tag, np.asarray(buf))

    def wait_all(self, transfers):
        be = self._backend
        for t in transfers:
            if t.kind != "recv":
                continue
            key = (t.peer, t.tag)
            box = be.mailboxes[self.rank]
            with be.cond:
                be.last_op[self.rank] = f"wait(recv peer={t.peer}, tag={t.tag})"
                be._deadline_wait(
                    lambda: key in box and len(box[key]) > 0, self.rank
                )
                msg = box[key].popleft()
                if not box[key]:
                    del box[key]
            if msg.shape != t.buffer.shape:
                err = ProtocolError(
                    f"recv buffer shape {t.buffer.shape} does not match "
                    f"incoming message shape {msg.shape} "
                    f"(peer={t.peer}, tag={t.tag})"
                )
                be.set_abort(err)
                raise err
            np.copyto(t.buffer, msg)

    def send(self, buf, peer, tag):
        self.wait_all([self.isend(buf, peer, tag)])

    def recv(self, buf, peer, tag):
        self.wait_all([self.irecv(buf, peer, tag)])
        return buf

    def barrier(self):
        self.reduce_sum_raw(np.zeros(1), 0)


@dataclass
class _RankResult:
    value: object = None
    error: BaseException | None = None


def spawn_ranks(size, program, timeout=DEFAULT_WATCHDOG):
    """Run `program(comm)` once per rank on an in-process backend.

    Returns the per-rank return values in rank order. The first rank failure
    is re-raised in the caller after the other ranks have been torn down.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    backend = _Backend(size, timeout)
    results = [_RankResult() for _ in range(size)]
    first_error = []
    err_lock = threading.Lock()

    def runner(rank):
        comm = Communicator(rank, size, backend)
        try:
            results[rank].value = program(comm)
        except AbortError as exc:
            results[rank].error = exc
        except BaseException as exc:  # noqa: BLE001 - propagated to caller
            results[rank].error = exc
            with err_lock:
                if not first_error:
                    first_error.append(exc)
            backend.set_abort(exc)

    threads = [
        threading.Thread(target=runner, args=(r,), name=f"rank-{r}", daemon=True)
        for r in range(size)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout + 10.0)
        if t.is_alive():
            backend.set_abort(DeadlockError(f"rank thread {t.name} did not exit"))
    for t in threads:
        t.join(5.0)
    if first_error:
        raise first_error[0]
    for r in results:
        if r.error is not None:
            raise r.error
    return [r.value for r in results]
