"""Small coefficient network: tanh MLP with a softplus positivity transform.

Parameters live in one flat vector (layer-major: W then b per layer) that is
authoritative on the root rank and broadcast into the tape each evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Op

KAPPA_FLOOR = 0.1
DEFAULT_LAYERS = (2, 20, 20, 20, 1)


@dataclass(frozen=True)
class MLPParams:
    layers: tuple

    @property
    def num_params(self):
        return sum(
            (fi + 1) * fo for fi, fo in zip(self.layers, self.layers[1:])
        )

    def unpack(self, theta):
        """Flat vector -> list of (W, b) in layer order."""
        theta = np.asarray(theta)
        if len(theta) != self.num_params:
            raise ValueError(
                f"expected {self.num_params} parameters, got {len(theta)}"
            )
        out = []
        k = 0
        for fi, fo in zip(self.layers, self.layers[1:]):
            W = theta[k : k + fi * fo].reshape(fi, fo)
            k += fi * fo
            b = theta[k : k + fo]
            k += fo
            out.append((W, b))
        return out


def init_params(spec, seed):
    """Xavier-uniform initialization from a named 64-bit seed."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fi, fo in zip(spec.layers, spec.layers[1:]):
        limit = np.sqrt(6.0 / (fi + fo))
        chunks.append(rng.uniform(-limit, limit, fi * fo))
        chunks.append(np.zeros(fo))
    return np.concatenate(chunks)


def _softplus(z):
    return np.logaddexp(0.0, z)


def mlp_forward(spec, theta, X):
    """Coefficient values at coordinates X (k x 2); always >= KAPPA_FLOOR."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite network parameters")
    a = np.atleast_2d(np.asarray(X, dtype=np.float64))
    weights = spec.unpack(theta)
    for W, b in weights[:-1]:
        a = np.tanh(a @ W + b)
    W, b = weights[-1]
    z = (a @ W + b)[:, 0]
    return _softplus(z) + KAPPA_FLOOR


def mlp_forward_backward(spec, theta, X):
    """Returns (output, vjp) where vjp(grad_out) gives the theta-gradient."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite network parameters")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    weights = spec.unpack(theta)
    acts = [X]
    a = X
    for W, b in weights[:-1]:
        a = np.tanh(a @ W + b)
        acts.append(a)
    W, b = weights[-1]
    z = (a @ W + b)[:, 0]
    out = _softplus(z) + KAPPA_FLOOR

    def vjp(grad_out):
        # d softplus(z) = sigmoid(z)
        dz = grad_out / (1.0 + np.exp(-z))
        delta = dz[:, None]
        grads = []
        for li in range(len(weights) - 1, -1, -1):
            W, _ = weights[li]
            a_in = acts[li]
            gW = a_in.T @ delta
            gb = delta.sum(axis=0)
            grads.append((gW, gb))
            if li > 0:
                delta = (delta @ W.T) * (1.0 - acts[li] ** 2)
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    return out, vjp


class MlpOp(Op):
    """theta -> coefficient values at fixed coordinates."""

    name = "mlp_forward"

    def __init__(self, spec, X):
        self.spec = spec
        self.X = np.atleast_2d(np.asarray(X, dtype=np.float64))

    def forward(self, ctx, theta):
        out, vjp = mlp_forward_backward(self.spec, theta, self.X)
        ctx["vjp"] = vjp
        return out

    def backward(self, ctx, grad):
        return (ctx["vjp"](grad),)


# -- plain-text checkpoints ---------------------------------------------


def save_checkpoint(path, spec, seed, theta):
    with open(path, "w") as fh:
        fh.write("layers " + " ".join(str(s) for s in spec.layers) + "\n")
        fh.write(f"seed {seed}\n")
        for v in np.asarray(theta):
            fh.write("%.17g\n" % v)


def load_checkpoint(path):
    """Returns (spec, seed, theta); round-trips bit-exactly."""
    with open(path) as fh:
        header = fh.readline().split()
        if header[0] != "layers":
            raise ValueError("malformed checkpoint header")
        layers = tuple(int(t) for t in header[1:])
        seed_line = fh.readline().split()
        seed = int(seed_line[1])
        theta = np.array([float(line) for line in fh if line.strip()])
    spec = MLPParams(layers)
    if len(theta) != spec.num_params:
        raise ValueError("checkpoint parameter count mismatch")
    return spec, seed, theta
