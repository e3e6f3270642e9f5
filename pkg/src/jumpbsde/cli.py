"""Command line entry point: ``jumpbsde <subcommand> --config run.yaml``.

Subcommands and their CSV outputs (all comma separated, ``%.12g`` floats,
first line ``# config-fingerprint: <hex>``, second line the header)::

  solve               summary.csv   quantity,value  (y0, y0_stderr, z0, exact, abs_error, rel_error)
                      steps.csv     i,t,final_val_loss,y_x0,z_x0
  oracle intermediate intermediate.csv  i,t,v_x0,z_x0,fixed_point_residual
                      intermediate_summary.csv  quantity,value  (v0, v0_stderr, mode, exact, abs_error)
  oracle rates        rates.csv     epsilon,sigma2,error,stderr,flagged,slope
  oracle projections  projections.csv   process,R2,stderr,exact
  partition-diag      partition.csv j,axis,sign,lo,hi,tail,mass,representative,gamma_avg

Each run also writes ``report.txt``; a failed run writes ``failure.json``
and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback
from pathlib import Path

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


def _set_threads(n):
    if n is None:
        n = os.environ.get("JUMPBSDE_THREADS")
    if n is None:
        return None
    n = str(int(n))
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = n
    return int(n)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, default=None, help="root seed (overrides the config)")
    common.add_argument("--out", default=None, help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, default=None,
                        help="BLAS threads (default: $JUMPBSDE_THREADS, else library default)")
    common.add_argument("--cache-paths", default=None,
                        help="path-cloud file: loaded if it exists, written otherwise")
    common.add_argument("--save-nets", default=None, help="write trained networks to this file")
    common.add_argument("--load-nets", default=None, help="use networks from this file instead of training")

    p = argparse.ArgumentParser(prog="jumpbsde", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="train the multi-step deep BSDE solver")
    orc = sub.add_parser("oracle", help="reference computations")
    osub = orc.add_subparsers(dest="oracle", required=True)
    osub.add_parser("intermediate", parents=[common],
                    help="least-squares intermediate scheme (columns: i,t,v_x0,z_x0,fixed_point_residual)")
    osub.add_parser("rates", parents=[common],
                    help="small-jump strong rate (columns: epsilon,sigma2,error,stderr,flagged,slope)")
    osub.add_parser("projections", parents=[common],
                    help="time-projection errors (columns: process,R2,stderr,exact)")
    sub.add_parser("partition-diag", parents=[common],
                   help="jump partition cells and diagnostics")
    return p


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (bool,)) or type(v).__name__ == "bool_":
        return "1" if v else "0"
    if isinstance(v, (int,)) or type(v).__name__.startswith("int"):
        return str(int(v))
    if isinstance(v, str):
        return v
    return "%.12g" % float(v)


def write_csv(path: Path, fingerprint: str, header, rows) -> None:
    lines = [f"# config-fingerprint: {fingerprint}", ",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


class Report:
    def __init__(self, command: str, cfg, seed: int, threads):
        self.lines = [f"jumpbsde run report: {command}", ""]
        self.timings = []
        self.headline = []
        self.cfg, self.seed, self.threads = cfg, seed, threads

    def time(self, label: str, t0: float) -> None:
        self.timings.append((label, time.perf_counter() - t0))

    def add(self, key: str, value) -> None:
        self.headline.append((key, value))

    def render(self) -> str:
        from .rng import SPLIT_SCHEME
        out = list(self.lines)
        out.append(f"root seed: {self.seed}")
        out.append(f"seed split scheme: {SPLIT_SCHEME}")
        out.append(f"threads: {self.threads if self.threads is not None else 'library default'}")
        out.append(f"config fingerprint: {self.cfg.fingerprint()}")
        out.append("")
        out.append("headline:")
        out += [f"  {k}: {_fmt(v) if not isinstance(v, str) else v}" for k, v in self.headline]
        out.append("")
        out.append("wall times (s):")
        out += [f"  {k}: {v:.2f}" for k, v in self.timings]
        out.append("")
        out.append("config:")
        out += ["  " + ln for ln in self.cfg.echo().splitlines()]
        return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# commands


def _setup(cfg, seed):
    from . import config as C
    measure = C.measure_from_config(cfg)
    grid = C.grid_from_config(cfg)
    partition = C.partition_from_config(cfg, measure)
    coeffs, u_star = C.coefficients_from_config(cfg, measure, grid)
    return measure, grid, partition, coeffs, u_star


def _paths(args, cfg, coeffs, grid, partition, seed, report):
    from .blob import load_paths, save_paths
    from .paths import simulate_forward
    t0 = time.perf_counter()
    cache = Path(args.cache_paths) if args.cache_paths else None
    tag = cfg.fingerprint()
    if cache is not None and cache.exists():
        paths = load_paths(cache)
        if paths.seed != seed or paths.grid.N != grid.N or paths.X.shape[0] != cfg.numerics.batch:
            raise ValueError(f"cached paths {cache} do not match this run (seed/N/batch)")
        report.time("load paths", t0)
        return paths
    paths = simulate_forward(coeffs, grid, partition, cfg.model.x0, cfg.numerics.batch, seed,
                             forward_jumps=cfg.numerics.forward_jumps, config_tag=tag)
    report.time("simulate paths", t0)
    if cache is not None:
        save_paths(cache, paths)
    return paths


def _exact_value(u_star, cfg):
    import numpy as np
    if u_star is not None:
        return float(u_star.value(0.0, np.asarray([cfg.model.x0]))[0])
    m = cfg.model
    if (m.driver.name == "zero" and m.drift.name == "zero" and m.terminal.name == "sum"
            and not m.terminal.params):
        return float(sum(m.x0))
    return None


def cmd_solve(args, cfg, seed, out: Path, report: Report):
    import numpy as np
    from .blob import load_networks, save_networks
    from .config import solver_config, x0_from_config
    from .solver import TrainedSolution, evaluate, run_algorithm1
    measure, grid, partition, coeffs, u_star = _setup(cfg, seed)
    paths = _paths(args, cfg, coeffs, grid, partition, seed, report)
    x0 = x0_from_config(cfg)
    t0 = time.perf_counter()
    if args.load_nets:
        steps, meta = load_networks(args.load_nets)
        if len(steps) != grid.N:
            raise ValueError(f"{args.load_nets} holds {len(steps)} steps, config has N={grid.N}")
        sol = TrainedSolution(coeffs, grid, partition, paths.sigma_eps_sqrt, steps,
                              [{"val": [float("nan")], "train": []} for _ in steps], meta.get("fingerprint", ""))
        report.time("load networks", t0)
    else:
        sol = run_algorithm1(coeffs, grid, partition, x0, solver_config(cfg), seed, cfg.numerics.batch, paths=paths)
        report.time("training", t0)
    if args.save_nets:
        save_networks(args.save_nets, sol.steps, {"fingerprint": sol.fingerprint(), "config": cfg.fingerprint()})
    fp = cfg.fingerprint()
    r0 = evaluate(sol, 0, x0[None, :])
    y0, z0 = float(r0["y"][0]), float(r0["z"][0, 0])
    exact = _exact_value(u_star, cfg)
    rows = [("y0", y0), ("y0_stderr", sol.y0_stderr()), ("z0", z0)]
    if exact is not None:
        rows += [("exact", exact), ("abs_error", abs(y0 - exact)),
                 ("rel_error", abs(y0 - exact) / abs(exact) if exact else float("nan"))]
    rows.append(("solution_fingerprint", sol.fingerprint()))
    write_csv(out / "summary.csv", fp, ["quantity", "value"], rows)
    step_rows = []
    losses = sol.final_losses()
    for i in range(grid.N):
        r = evaluate(sol, i, x0[None, :])
        step_rows.append((i, grid.nodes[i], losses[i], r["y"][0], r["z"][0, 0]))
    write_csv(out / "steps.csv", fp, ["i", "t", "final_val_loss", "y_x0", "z_x0"], step_rows)
    for k, v in rows:
        report.add(k, v)
    return 0


def cmd_intermediate(args, cfg, seed, out: Path, report: Report):
    from .blob import load_networks
    from .config import x0_from_config
    from .reference import solve_intermediate
    from .solver import TrainedSolution
    measure, grid, partition, coeffs, u_star = _setup(cfg, seed)
    paths = _paths(args, cfg, coeffs, grid, partition, seed, report)
    sol = None
    if args.load_nets:
        steps, _ = load_networks(args.load_nets)
        sol = TrainedSolution(coeffs, grid, partition, paths.sigma_eps_sqrt, steps, [], "")
    t0 = time.perf_counter()
    res = solve_intermediate(coeffs, grid, partition, paths, sol, degree=cfg.oracle.degree, ridge=cfg.oracle.ridge)
    report.time("intermediate scheme", t0)
    x0 = x0_from_config(cfg)[None, :]
    fp = cfg.fingerprint()
    rows = []
    for i in range(grid.N):
        r = res.evaluate(i, x0)
        rows.append((i, grid.nodes[i], r["v"][0], r["z"][0, 0], res.steps[i].fixed_point_residual))
    write_csv(out / "intermediate.csv", fp, ["i", "t", "v_x0", "z_x0", "fixed_point_residual"], rows)
    summ = [("v0", res.v0), ("v0_stderr", res.v0_stderr), ("mode", res.mode)]
    exact = _exact_value(u_star, cfg)
    if exact is not None:
        summ += [("exact", exact), ("abs_error", abs(res.v0 - exact))]
    write_csv(out / "intermediate_summary.csv", fp, ["quantity", "value"], summ)
    for k, v in summ:
        report.add(k, v)
    return 0


def cmd_rates(args, cfg, seed, out: Path, report: Report):
    from .config import x0_from_config
    from .reference import smalljump_rate_experiment
    measure, grid, partition, coeffs, _ = _setup(cfg, seed)
    rc = cfg.oracle.rates
    ref = rc.reference_epsilon if rc.reference_epsilon is not None else min(rc.epsilons) / 8.0
    t0 = time.perf_counter()
    tab = smalljump_rate_experiment(coeffs, measure, rc.epsilons, cfg.numerics.zeta, ref, rc.batch, seed,
                                    x0_from_config(cfg), cfg.numerics.T, rc.N, cfg.numerics.h, rc.block)
    report.time("rate experiment", t0)
    rows = [(e, s, err, se, fl, tab.slope) for e, s, err, se, fl in
            zip(tab.epsilons, tab.sigma2, tab.error, tab.stderr, tab.flagged)]
    write_csv(out / "rates.csv", cfg.fingerprint(), ["epsilon", "sigma2", "error", "stderr", "flagged", "slope"],
              rows)
    report.add("slope", tab.slope)
    report.add("reference_epsilon", ref)
    report.add("monotone_3se", str(tab.monotone(3.0)))
    return 0


def cmd_projections(args, cfg, seed, out: Path, report: Report):
    import numpy as np
    from .paths import TimeGrid, simulate_forward
    from .reference import (brownian_projection_experiment, cell_rule, linear_solution,
                            projection_error_estimates)
    measure, grid, partition, coeffs, u_star = _setup(cfg, seed)
    pc = cfg.oracle.projections
    T = cfg.numerics.T
    t0 = time.perf_counter()
    rows = []
    bro = brownian_projection_experiment(T, pc.N, pc.substeps, pc.batch, seed)
    rows.append(("brownian_Z", bro.R2_Z, bro.R2_Z_se, T * (T / pc.N) / 2.0))
    if u_star is None and _exact_value(None, cfg) is not None:
        u_star = linear_solution(1.0)
    if u_star is not None:
        fine = TimeGrid.uniform(T, pc.N * pc.substeps)
        paths = simulate_forward(coeffs, fine, partition, cfg.model.x0, pc.batch, seed, config_tag="projections")
        X = paths.X
        n_fine = X.shape[1]
        times = fine.nodes
        Z = np.stack([np.einsum("nqd,nq->nd", coeffs.sigma(X[:, k]), u_star.gradient(times[k], X[:, k]))
                      for k in range(n_fine)], axis=1)
        S = paths.sigma_eps_sqrt
        L = np.stack([np.einsum("nqk,kl,nq->nl", coeffs.jump.dbeta0(X[:, k]), S, u_star.gradient(times[k], X[:, k]))
                      for k in range(n_fine)], axis=1) if coeffs.zeta else None
        U, W, tail = [], [], []
        for j in range(partition.n_cells):
            e, w = cell_rule(partition, j)
            vals = np.empty((pc.batch, n_fine, len(e)))
            for k in range(n_fine):
                xk = X[:, k]
                xr = np.repeat(xk, len(e), axis=0)
                er = np.tile(e, (len(xk), 1))
                jump = u_star.u(times[k], xr + coeffs.jump.beta(xr, er)) - u_star.u(times[k], xr)
                vals[:, k, :] = jump.reshape(len(xk), len(e))
            U.append(vals)
            W.append(w)
            tail.append(bool(partition.is_tail[j]))
        anchors = [X[:, i * pc.substeps] for i in range(pc.N)]
        pe = projection_error_estimates(times, anchors, pc.substeps, Z=Z, L=L, U=U or None, U_weights=W,
                                        U_tail=tail, degree=cfg.oracle.degree, ridge=cfg.oracle.ridge)
        rows.append(("Z", pe.R2_Z, pe.R2_Z_se, float("nan")))
        if L is not None:
            rows.append(("L", pe.R2_L, pe.R2_L_se, float("nan")))
        if U:
            rows.append(("U", pe.R2_U, pe.R2_U_se, float("nan")))
            rows.append(("U_tail_share", pe.R2_U_tail, float("nan"), float("nan")))
    report.time("projection estimates", t0)
    write_csv(out / "projections.csv", cfg.fingerprint(), ["process", "R2", "stderr", "exact"], rows)
    for r in rows:
        report.add(f"R2[{r[0]}]", r[1])
    return 0


def cmd_partition(args, cfg, seed, out: Path, report: Report):
    from . import models
    from .levy import gamma_quadrature_error
    measure, grid, partition, coeffs, _ = _setup(cfg, seed)
    rows = []
    for j in range(partition.n_cells):
        rows.append((j, partition.axis[j], partition.sign[j], partition.lo[j], partition.hi[j],
                     bool(partition.is_tail[j]), partition.masses[j],
                     partition.representatives[j, partition.axis[j]], partition.gamma_avg[j]))
    write_csv(out / "partition.csv", cfg.fingerprint(),
              ["j", "axis", "sign", "lo", "hi", "tail", "mass", "representative", "gamma_avg"], rows)
    report.add("cells", partition.n_cells)
    report.add("total_mass", partition.total_mass)
    report.add("tail_mass", partition.tail_mass)
    report.add("merged_zero_mass_cells", partition.merged)
    if partition.n_cells:
        gfun, _ = models.GAMMAS[cfg.model.gamma.name](cfg.model.q, **cfg.model.gamma.params)
        report.add("k_h", partition.k_h())
        report.add("R2_gamma", gamma_quadrature_error(partition, gfun))
    return 0


COMMANDS = {"solve": cmd_solve, "intermediate": cmd_intermediate, "rates": cmd_rates,
            "projections": cmd_projections, "partition-diag": cmd_partition}


def _failure(out: Path, command: str, exc: BaseException, kind: str) -> None:
    rec = {"status": "failed", "command": command, "kind": kind, "error_type": type(exc).__name__,
           "message": str(exc)}
    for attr in ("violations", "step", "last_finite_loss", "residual"):
        if hasattr(exc, attr):
            rec[attr] = getattr(exc, attr)
    rec["traceback"] = traceback.format_exception_only(type(exc), exc)[-1].strip()
    out.mkdir(parents=True, exist_ok=True)
    (out / "failure.json").write_text(json.dumps(rec, indent=2, sort_keys=True, default=str) + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = _set_threads(args.threads)
    command = args.oracle if args.command == "oracle" else args.command
    import warnings

    from .config import ConfigError, parse_config
    fallback_out = Path(args.out or "out")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            cfg = parse_config(args.config)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
    except ConfigError as exc:
        _failure(fallback_out, command, exc, "config")
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    stale = out / "failure.json"
    if stale.exists():
        stale.unlink()
    report = Report(command, cfg, seed, threads)
    t0 = time.perf_counter()
    try:
        status = COMMANDS[command](args, cfg, seed, out, report)
    except Exception as exc:  # every module error ends up in the failure record
        report.add("status", f"failed: {type(exc).__name__}: {exc}")
        report.time("total", t0)
        (out / "report.txt").write_text(report.render())
        _failure(out, command, exc, "runtime")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    report.time("total", t0)
    report.add("status", "ok")
    (out / "report.txt").write_text(report.render())
    return status


if __name__ == "__main__":
    sys.exit(main())
