"""Command-line entry point: gradient checks, drivers, and benchmarks.

All artifacts are plain text or CSV so runs can be diffed byte-for-byte.
Exit codes: 0 ok, 1 check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import checks, drivers, kernels, nn, optim, pde, sparse
from .comm import spawn_ranks
from .pde import AcousticModel


def _parse_config_file(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


_DEFAULTS = dict(
    ranks=4,
    grid=(16, 16),
    rank_grid=(2, 2),
    steps=100,
    tol=1e-10,
    seed=0,
    obs_fraction=0.8,
    maxiter=100,
    out="out",
)


def build_parser():
    p = argparse.ArgumentParser(
        prog="distgrad",
        description="differentiable multi-rank PDE inversion toolkit",
    )
    p.add_argument("--config", help="key=value file overriding defaults")
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, hlp in (
        ("gradcheck", "adjoint and finite-difference verification suite"),
        ("poisson", "diffusivity inversion driver"),
        ("wave", "acoustic wave driver"),
        ("bench", "timing benchmark"),
    ):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--ranks", type=int)
        sp.add_argument("--grid", type=int, nargs=2, metavar=("NX", "NY"))
        sp.add_argument(
            "--rank-grid", type=int, nargs=2, metavar=("PX", "PY")
        )
        sp.add_argument("--steps", type=int)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--obs-fraction", type=float)
        sp.add_argument("--maxiter", type=int)
        sp.add_argument("--out", metavar="DIR")
        if name == "gradcheck":
            sp.add_argument(
                "--corrupt",
                metavar="OP",
                help="deliberately corrupt one op's adjoint (negative control)",
            )
        if name == "wave":
            sp.add_argument(
                "--invert", action="store_true", help="train the velocity net"
            )
        if name == "poisson":
            sp.add_argument(
                "--checkpoint-every", type=int, default=0, metavar="K"
            )
    return p


class RunConfig:
    """Validated run settings assembled from defaults, config file, flags."""

    def __init__(self, args):
        cfg = dict(_DEFAULTS)
        if args.config:
            raw = _parse_config_file(args.config)
            for k, v in raw.items():
                k = k.replace("-", "_")
                if k in ("grid", "rank_grid"):
                    cfg[k] = tuple(int(t) for t in v.split())
                elif k in ("tol", "obs_fraction"):
                    cfg[k] = float(v)
                elif k == "out":
                    cfg[k] = v
                else:
                    cfg[k] = int(v)
        for k in _DEFAULTS:
            v = getattr(args, k, None)
            if v is not None:
                cfg[k] = tuple(v) if isinstance(v, list) else v
        self.subcommand = args.subcommand
        for k, v in cfg.items():
            setattr(self, k, v)
        self.corrupt = getattr(args, "corrupt", None)
        self.invert = getattr(args, "invert", False)
        self.checkpoint_every = getattr(args, "checkpoint_every", 0)
        self.validate()

    def validate(self):
        px, py = self.rank_grid
        if px * py != self.ranks:
            raise SystemExit(
                f"usage error: ranks={self.ranks} but rank grid is {px}x{py}"
            )
        nx, ny = self.grid
        if nx % px or ny % py:
            raise SystemExit(
                f"usage error: grid {nx}x{ny} not divisible by {px}x{py}"
            )


def _write(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def _field_csv(field):
    return "\n".join(
        ",".join("%.17g" % v for v in row) for row in field
    ) + "\n"


# -- subcommands --------------------------------------------------------


def cmd_gradcheck(cfg):
    lines = []
    failed = False
    results = checks.adjoint_suite(trials=20, seed=cfg.seed, corrupt=cfg.corrupt)
    for (name, grid), err in sorted(results.items()):
        ok = err < 1e-12
        failed |= not ok
        lines.append(
            f"{'PASS' if ok else 'FAIL'} adjoint {name} grid {grid[0]}x{grid[1]} "
            f"max_rel_err {err:.3e}"
        )

    for theta in (1.0, 2.0):
        l, g = checks.demo_loss_gradient(theta)
        expect_l = 1 + theta + theta**2 + theta**3
        expect_g = 1 + 2 * theta + 3 * theta**2
        ok = abs(l - expect_l) < 1e-12 and abs(g - expect_g) < 1e-12
        failed |= not ok
        lines.append(
            f"{'PASS' if ok else 'FAIL'} demo theta={theta} "
            f"loss {l:.12g} grad {g:.12g}"
        )

    err = _poisson_fd_err(cfg, n=8, ranks=min(cfg.ranks, 4))
    ok = err < 1e-5
    failed |= not ok
    lines.append(f"{'PASS' if ok else 'FAIL'} poisson fd max_rel_err {err:.3e}")

    err = _wave_fd_err(cfg)
    ok = err < 1e-4
    failed |= not ok
    lines.append(f"{'PASS' if ok else 'FAIL'} wave fd max_rel_err {err:.3e}")

    report = "\n".join(lines) + "\n"
    _write(os.path.join(cfg.out, "gradcheck.txt"), report)
    print(report, end="")
    return 1 if failed else 0


def _poisson_fd_err(cfg, n=8, ranks=4, tol=1e-12, components=(0, 3, 7)):
    if ranks == 4:
        px, py = 2, 2
    else:
        px, py = 1, 1
    spec = nn.MLPParams((2, 5, 1))
    theta0 = nn.init_params(spec, cfg.seed + 1)

    def run(theta, need_grad):
        def prog(comm):
            part = pde.partition_grid(n, n, px, py)
            setup = drivers.PoissonSetup.create(comm, part, spec, cg_tol=tol)
            obs = drivers.make_poisson_observations(
                comm, setup, cfg.obs_fraction, cfg.seed
            )
            tape, th = drivers.build_poisson_tape(comm, setup, obs)
            return optim.evaluate_tape(
                comm, lambda c: (tape, th), theta, need_grad
            )

        return spawn_ranks(px * py, prog)[0]

    return checks.fd_check_tape(run, theta0, components)


def _wave_fd_err(cfg, n=12, steps=20):
    spec = nn.MLPParams((2, 5, 1))
    theta0 = nn.init_params(spec, cfg.seed + 2)
    h = 1.0 / (n + 1)
    model = AcousticModel(
        c_max=1.0, dt=0.5 * h, steps=steps, h=h,
        source_cell=(n // 2, n // 2), peak_freq=8.0,
    )

    def run(theta, need_grad):
        def prog(comm):
            part = pde.partition_grid(n, n, 1, 1)
            setup = drivers.WaveSetup.create(comm, part, model, spec)
            obs = drivers.make_wave_observations(comm, setup)
            tape, th = drivers.build_wave_tape(comm, setup, obs)
            return optim.evaluate_tape(
                comm, lambda c: (tape, th), theta, need_grad
            )

        return spawn_ranks(1, prog)[0]

    return checks.fd_check_tape(run, theta0, (0, 4, 9))


def cmd_poisson(cfg):
    nx, ny = cfg.grid
    px, py = cfg.rank_grid
    spec = nn.MLPParams(nn.DEFAULT_LAYERS)
    theta0 = nn.init_params(spec, cfg.seed)

    def prog(comm):
        part = pde.partition_grid(nx, ny, px, py)
        setup = drivers.PoissonSetup.create(comm, part, spec, cg_tol=cfg.tol)
        obs = drivers.make_poisson_observations(
            comm, setup, cfg.obs_fraction, cfg.seed
        )

        def builder(c):
            tape, th = drivers.build_poisson_tape(c, setup, obs)
            return tape, th

        callback = None
        if cfg.checkpoint_every and comm.rank == 0:
            every = cfg.checkpoint_every
            os.makedirs(cfg.out, exist_ok=True)

            def callback(it, x, f, g):
                if it % every == 0:
                    nn.save_checkpoint(
                        os.path.join(cfg.out, f"theta_{it:06d}.txt"),
                        spec,
                        cfg.seed,
                        x,
                    )

        theta, history = optim.run_distributed(
            comm, builder, theta0, maxiter=cfg.maxiter, callback=callback
        )
        kt = pde.kappa_true(setup.coords[:, 0], setup.coords[:, 1])
        if comm.rank == 0:
            kappa = drivers.poisson_kappa_field(comm, setup, theta)
        else:
            kappa = drivers.poisson_kappa_field(comm, setup, np.zeros_like(theta0))
        kfield = drivers.gather_field(comm, part, kappa)
        ktrue = drivers.gather_field(comm, part, kt)
        if comm.rank == 0:
            return theta, history, kfield, ktrue

    theta, history, kfield, ktrue = spawn_ranks(
        cfg.ranks, prog, timeout=300.0
    )[0]
    _write(os.path.join(cfg.out, "loss_history.csv"), optim.history_csv(history))
    _write(os.path.join(cfg.out, "kappa.txt"), _field_csv(kfield))
    _write(os.path.join(cfg.out, "kappa_true.txt"), _field_csv(ktrue))
    nn.save_checkpoint(
        os.path.join(cfg.out, "theta.txt"), spec, cfg.seed, theta
    )
    rel = np.linalg.norm(kfield - ktrue) / np.linalg.norm(ktrue)
    print(
        f"poisson: {len(history) - 1} iterations, loss "
        f"{history[0].loss:.6g} -> {history[-1].loss:.6g}, "
        f"kappa rel l2 err {rel:.4f}"
    )
    return 0


def _wave_model(cfg):
    nx, ny = cfg.grid
    h = 1.0 / (nx + 1)
    dt = 0.5 * h  # safely inside the CFL bound for c ~ 1
    return AcousticModel(
        c_max=1.0,
        dt=dt,
        steps=cfg.steps,
        h=h,
        source_cell=(nx // 2, ny // 2),
        peak_freq=1.0 / (10.0 * h),  # ~10 grid points per wavelength
    )


def cmd_wave(cfg):
    nx, ny = cfg.grid
    px, py = cfg.rank_grid
    model = _wave_model(cfg)
    snap_at = sorted(
        {max(0, (k + 1) * cfg.steps // 5 - 1) for k in range(5)}
    )
    spec = nn.MLPParams(nn.DEFAULT_LAYERS)

    def prog(comm):
        part = pde.partition_grid(nx, ny, px, py)
        setup = drivers.WaveSetup.create(comm, part, model, spec)
        c = drivers.wave_velocity_true(setup)
        traces, fields = drivers.simulate_wave(
            comm, setup, c, record_fields_at=snap_at
        )
        globs = {
            k: drivers.gather_field(comm, part, fields[k][1:-1, 1:-1].ravel())
            for k in snap_at
        }
        trace_rows = [
            sparse.gatherv(comm, tr) for tr in traces
        ]
        hist = None
        if cfg.invert:
            obs = traces

            def builder(c_):
                tape, th = drivers.build_wave_tape(c_, setup, obs)
                return tape, th

            theta0 = nn.init_params(spec, cfg.seed)
            _, hist = optim.run_distributed(
                comm, builder, theta0, maxiter=cfg.maxiter
            )
        if comm.rank == 0:
            return globs, trace_rows, hist

    globs, trace_rows, hist = spawn_ranks(cfg.ranks, prog, timeout=300.0)[0]
    for k, field in globs.items():
        _write(os.path.join(cfg.out, f"snapshot_{k:05d}.txt"), _field_csv(field))
    lines = ["step," + ",".join(f"y{j}" for j in range(ny))]
    for k, chunks in enumerate(trace_rows):
        row = np.concatenate([c for c in chunks if len(c)])
        lines.append(str(k) + "," + ",".join("%.17g" % v for v in row))
    _write(os.path.join(cfg.out, "trace.csv"), "\n".join(lines) + "\n")
    if hist is not None:
        _write(os.path.join(cfg.out, "loss_history.csv"), optim.history_csv(hist))
    print(f"wave: {cfg.steps} steps, {len(globs)} snapshots written to {cfg.out}")
    return 0


def cmd_bench(cfg):
    rows = ["op,ranks,size,seconds,stddev"]
    repeats = 3

    def timed(fn):
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
        return float(np.mean(ts)), float(np.std(ts))

    rng = np.random.default_rng(cfg.seed)
    for ranks in (1, 2, 4):
        for n in (200, 400, 800):
            dense = (rng.random((n, n)) < 0.02) * 1.0

            def prog(comm):
                A = sparse.from_dense(dense, comm)
                x = np.ones(A.nrows_local)
                out = {}
                out["transpose"] = timed(
                    lambda: sparse.dist_transpose(comm, A)
                )
                out["spmv"] = timed(lambda: sparse.dist_spmv(comm, A, x))
                return out

            per = spawn_ranks(ranks, prog)[0]
            for op, (mean, std) in per.items():
                rows.append(f"{op},{ranks},{n},{mean:.6g},{std:.6g}")

        # halo exchange + full poisson forward/backward at fixed total size
        def prog2(comm, ranks=ranks):
            grids = {1: (1, 1), 2: (2, 1), 4: (2, 2)}
            px, py = grids[ranks]
            part = pde.partition_grid(24, 24, px, py)
            setup = drivers.PoissonSetup.create(
                comm, part, nn.MLPParams((2, 8, 1)), cg_tol=1e-8
            )
            obs = drivers.make_poisson_observations(comm, setup, 0.8, cfg.seed)
            spec_h = part.halo_spec(comm.rank, 1)
            from .collectives import halo_exchange_forward

            field = np.ones(spec_h.shape)
            out = {}
            out["halo_exchange"] = timed(
                lambda: halo_exchange_forward(comm, field, spec_h, 0)
            )
            theta = nn.init_params(setup.nn_spec, cfg.seed)

            def fwd_bwd():
                tape, th = drivers.build_poisson_tape(comm, setup, obs)
                optim.evaluate_tape(comm, lambda c: (tape, th), theta, True)

            out["poisson_fwd_bwd"] = timed(fwd_bwd)
            return out

        per = spawn_ranks(ranks, prog2)[0]
        for op, (mean, std) in per.items():
            rows.append(f"{op},{ranks},576,{mean:.6g},{std:.6g}")

    # kernel backend comparison (numba jit vs pure numpy)
    n = 100_000
    indptr = np.arange(0, 5 * n + 1, 5, dtype=np.int64)
    indices = rng.integers(0, n, 5 * n).astype(np.int64)
    vals = rng.standard_normal(5 * n)
    x = rng.standard_normal(n)
    out = np.empty(n)
    kernels.warmup()
    if kernels.numba is not None:
        mean, std = timed(lambda: kernels.csr_spmv_numba(indptr, indices, vals, x, out))
        rows.append(f"spmv_kernel_numba,1,{n},{mean:.6g},{std:.6g}")
    mean, std = timed(lambda: kernels.csr_spmv_numpy(indptr, indices, vals, x, out))
    rows.append(f"spmv_kernel_numpy,1,{n},{mean:.6g},{std:.6g}")
    u = rng.standard_normal((300, 300))
    w = np.empty_like(u)
    if kernels.numba is not None:
        mean, std = timed(lambda: kernels.wave_step_numba(u, u, u * u, 0.1, w))
        rows.append(f"wave_kernel_numba,1,90000,{mean:.6g},{std:.6g}")
    mean, std = timed(lambda: kernels.wave_step_numpy(u, u, u * u, 0.1, w))
    rows.append(f"wave_kernel_numpy,1,90000,{mean:.6g},{std:.6g}")

    _write(os.path.join(cfg.out, "bench.csv"), "\n".join(rows) + "\n")
    print(f"bench: {len(rows) - 1} rows written to {cfg.out}/bench.csv")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig(args)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return 2
        raise
    kernels.warmup()
    handler = {
        "gradcheck": cmd_gradcheck,
        "poisson": cmd_poisson,
        "wave": cmd_wave,
        "bench": cmd_bench,
    }[cfg.subcommand]
    return handler(cfg)


if __name__ == "__main__":
    sys.exit(main())
