"""Command-line entry points: flow, particles, validate, capacitance-dump.

Every run writes its artifacts (CSV) plus a manifest JSON that embeds the fully
resolved configuration, tool version, seeds, and a checksum inventory of the
produced files; re-running the same config and seed reproduces the CSV bytes.

Exit codes: 0 success, 2 config error, 3 solver non-convergence, 4 invariant
failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    RunConfig,
    make_capacitance_models,
    make_grid,
    make_initial_density,
    make_policy,
    parse_config,
    resolved_dict,
)
from .errors import BlowupError, ChipfieldError, ConfigError, ConvergenceError, ValidationError
from .grid import write_field_csv
from .meanfield import (
    lyapunov_check,
    particle_consistency_metric,
    run_flow,
    stable_dt_bound,
    write_energy_csv,
)
from .model import InteractionContext, PairKernels, capacitance, drift_field
from .particles import SdeConfig, init_ensemble, simulate, write_particles_csv
from .validate import run_invariants

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INVARIANT = 4


def _apply_thread_cap() -> None:
    """Honor MEANFIELD_THREADS as an upper bound on library-level parallelism."""
    cap = os.environ.get("MEANFIELD_THREADS")
    if not cap:
        return
    try:
        limit = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"MEANFIELD_THREADS must be an integer, got {cap!r}") from None
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=limit)
    except ImportError:
        # the solvers themselves are single-threaded; only BLAS pools remain,
        # and those can only be capped via env vars before numpy loads
        pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, cfg: RunConfig, files: list[Path], extra: dict) -> Path:
    manifest = {
        "tool": {"name": "chipfield", "version": __version__},
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": resolved_dict(cfg),
        **extra,
        "files": [
            {"path": f.name, "bytes": f.stat().st_size, "sha256": _sha256(f)}
            for f in files
        ],
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _load_config(args) -> RunConfig:
    import dataclasses

    cfg = parse_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "scheme", None) is not None:
        if args.scheme not in ("jko", "explicit_fd"):
            raise ConfigError(f"--scheme must be 'jko' or 'explicit_fd', got {args.scheme!r}")
        cfg = dataclasses.replace(cfg, flow=dataclasses.replace(cfg.flow, scheme=args.scheme))
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_world(cfg: RunConfig):
    grid = make_grid(cfg)
    policy = make_policy(cfg)
    ccap, ecap = make_capacitance_models(cfg)
    kernels = PairKernels(grid, ccap, ecap)
    rho0 = make_initial_density(cfg, grid)
    return grid, policy, ccap, ecap, kernels, rho0


def cmd_flow(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    grid, policy, ccap, ecap, kernels, rho0 = _build_world(cfg)
    ctx = InteractionContext(rho0, policy, ccap, ecap, kernels=kernels)
    fl = cfg.flow
    step = fl.tau if fl.scheme == "jko" else fl.dt
    try:
        state = run_flow(
            rho0, ctx, cfg.beta, fl.scheme, step, fl.steps,
            eps=fl.eps, jko_tol=fl.jko_tol,
            snapshot_every=fl.snapshot_every if fl.snapshot_every > 0 else max(fl.steps, 1),
        )
    except (ConvergenceError, BlowupError) as e:
        diag = out / "diagnostics.json"
        with open(diag, "w") as fh:
            json.dump({"error": type(e).__name__, "message": str(e),
                       "residual": getattr(e, "residual", None),
                       "iterations": getattr(e, "iterations", None)}, fh, indent=2)
        print(f"flow: solver failure, diagnostics in {diag}", file=sys.stderr)
        return EXIT_SOLVER

    files = []
    energy_path = out / "energy.csv"
    write_energy_csv(state, energy_path)
    files.append(energy_path)
    snaps = state.snapshots if state.snapshots else [(0.0, rho0), (state.t, state.density)]
    for t, dens in snaps:
        step_idx = round(t / step) if step > 0 else 0
        p = out / f"density_{step_idx:06d}.csv"
        write_field_csv(dens, p)
        files.append(p)
    report = lyapunov_check(state) if len(state.energy_history) >= 2 else None
    extra = {
        "seeds": {"master": cfg.seed},
        "lyapunov": None if report is None else {
            "passed": report.passed,
            "violations": [
                {"step": k, "increase": inc, "allowed": tol} for k, inc, tol in report.violations
            ],
        },
    }
    _write_manifest(out, cfg, files, extra)
    if report is not None and not report.passed:
        print(f"flow: energy increased at {len(report.violations)} step(s)", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"flow: {fl.steps} {fl.scheme} steps, final energy "
          f"{state.energy_history[-1][1].total:.6f}, artifacts in {out}")
    return EXIT_OK


def cmd_particles(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    grid, policy, ccap, ecap, kernels, rho0 = _build_world(cfg)
    pc = cfg.particles

    # reference mean-field trajectory (explicit scheme): densities and drift
    # fields at every particle step, shared by every simulated ensemble
    bound = stable_dt_bound(grid, cfg.beta, 0.0)
    if pc.dt > bound:
        raise ConfigError(
            f"particles.dt: {pc.dt!r} exceeds the explicit reference stability bound {bound!r}"
        )
    ref = run_flow(rho0, InteractionContext(rho0, policy, ccap, ecap, kernels=kernels),
                   cfg.beta, "explicit_fd", pc.dt, pc.steps, snapshot_every=1)
    densities = [d for _, d in ref.snapshots]
    drifts = []
    if pc.drift_mode == "meanfield":
        for dens in densities[:-1]:
            drifts.append(drift_field(InteractionContext(dens, policy, ccap, ecap, kernels=kernels)))

    from .particles import EmpiricalModel, euler_maruyama_step

    def run_one(n: int, seed: int):
        ens = init_ensemble(cfg.initial.mean, cfg.initial.cov, n, seed)
        sde = SdeConfig(dt=pc.dt, beta=cfg.beta, seed=seed, drift_mode=pc.drift_mode,
                        fd_step=pc.fd_step)
        empirical = EmpiricalModel(policy=policy, ccap=ccap, ecap=ecap)
        snapshots = [(0, ens.t, ens.positions.copy())]
        for k in range(1, pc.steps + 1):
            interaction = drifts[k - 1] if pc.drift_mode == "meanfield" else empirical
            ens = euler_maruyama_step(ens, sde, interaction, grid)
            if (pc.record_every > 0 and k % pc.record_every == 0) or k == pc.steps:
                snapshots.append((k, ens.t, ens.positions.copy()))
        return ens, snapshots

    try:
        primary_ens, primary_snaps = run_one(pc.n, cfg.seed)
        metric_rows = []
        final_density = densities[-1]
        sweep = pc.n_sweep if pc.n_sweep else (pc.n,)
        for n in sweep:
            for s in range(pc.n_seeds):
                seed = cfg.seed + s
                ens = primary_ens if (n == pc.n and seed == cfg.seed) else run_one(n, seed)[0]
                w2 = particle_consistency_metric(ens, final_density, grid, pc.metric_eps)
                metric_rows.append((n, seed, ens.t, w2))
    except (ConvergenceError, BlowupError) as e:
        print(f"particles: solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER

    files = []
    ppath = out / "particles.csv"
    write_particles_csv(primary_snaps, ppath)
    files.append(ppath)
    mpath = out / "metric.csv"
    with open(mpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "seed", "t", "w2"])
        for n, seed, t, w2 in metric_rows:
            w.writerow([n, seed, repr(float(t)), repr(float(w2))])
    files.append(mpath)
    rpath = out / "reference_density.csv"
    write_field_csv(final_density, rpath)
    files.append(rpath)
    _write_manifest(out, cfg, files, {"seeds": {"master": cfg.seed,
                                                "ensemble": [cfg.seed + s for s in range(pc.n_seeds)]}})
    print(f"particles: {len(metric_rows)} run(s), drift_mode={pc.drift_mode}, artifacts in {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    out = Path(args.out) if args.out else None
    report = run_invariants(drift_sign=-1.0 if args.inject_drift_sign_flip else 1.0)
    for r in report["invariants"]:
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['id']}: {r['detail']}")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "validate_report.json", "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK if report["passed"] else EXIT_INVARIANT


def cmd_capacitance_dump(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    grid = make_grid(cfg)
    ccap, ecap = make_capacitance_models(cfg)
    r_max = float(np.hypot(grid.x_max - grid.x_min, grid.y_max - grid.y_min))
    rs = np.linspace(0.0, r_max, 512)
    files = []
    for name, cap in (("capacitance_cc.csv", ccap), ("capacitance_ce.csv", ecap)):
        path = out / name
        vals = capacitance(cap, rs)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["r", "value"])
            for r, v in zip(rs, vals):
                w.writerow([repr(float(r)), repr(float(v))])
        files.append(path)
    _write_manifest(out, cfg, files, {"seeds": {"master": cfg.seed}})
    print(f"capacitance-dump: kernel curves in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chipfield",
                                description="Controlled mean-field chiplet population simulator")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config path (defaults apply when omitted)")
    common.add_argument("--out", help="output directory (overrides config out_dir)")
    common.add_argument("--seed", type=int, help="override the master seed")

    f = sub.add_parser("flow", parents=[common], help="evolve the density and record energies")
    f.add_argument("--scheme", help="override flow.scheme (jko or explicit_fd)")
    f.set_defaults(fn=cmd_flow)

    pa = sub.add_parser("particles", parents=[common],
                        help="simulate particle ensembles against a PDE reference")
    pa.set_defaults(fn=cmd_particles)

    v = sub.add_parser("validate", help="run the invariant suite")
    v.add_argument("--out", help="directory for the JSON report")
    v.add_argument("--inject-drift-sign-flip", action="store_true",
                   help="fault-injection hook: negate the drift to verify the monitors trip")
    v.set_defaults(fn=cmd_validate)

    c = sub.add_parser("capacitance-dump", parents=[common],
                       help="export the capacitance kernel curves as CSV")
    c.set_defaults(fn=cmd_capacitance_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.fn(args)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConvergenceError, BlowupError) as e:
        print(f"solver error: {e}", file=sys.stderr)
        return EXIT_SOLVER
    except ChipfieldError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
