"""distgrad: differentiable multi-rank computation for PDE-constrained
inversion.

Communication operations (broadcast, reduce, gather, point-to-point, halo
exchange) are nodes of a reverse-mode tape; their backward passes run the
reversed communication. An in-process backend executes every rank as a
thread, with deadlock watchdog and collective-order checking.
"""

from .comm import (
    AbortError,
    CommError,
    Communicator,
    DeadlockError,
    PendingTransfer,
    ProtocolError,
    spawn_ranks,
)
from .graph import Op, Tape

__all__ = [
    "AbortError",
    "CommError",
    "Communicator",
    "DeadlockError",
    "Op",
    "PendingTransfer",
    "ProtocolError",
    "Tape",
    "spawn_ranks",
]

__version__ = "0.1.0"
