"""Command-line front end.

Subcommands
-----------
solve       iterate one (J, B[, H]) problem, write ``trajectory.csv`` and ``summary.json``
bench       run a solver set on one instance, write ``bench.csv`` and ``bench.json``
fss-design  golden-section search for the CRB-optimal sampling rate, with sweep
fss-sweep   tabulate CRB(p) on a uniform grid of rates

Settings come from flags, then from ``--config FILE`` (flat ``key = value``
lines), then from built-in defaults. Exit codes: 0 converged, 2 not
converged, 1 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .constrained import (ConstrainedQmpProblem, ConstraintSet, gs_two_solve_composition,
                          solve_constrained_mm, solve_constrained_pcg,
                          solve_gradient_projection)
from .errors import CRBError, Divergence
from .fss import (SOLVERS as FSS_SOLVERS, FlowModel, crb_at_rate, fss_fisher, optimal_rate,
                  read_distribution, zipf_distribution)
from .matrix import random_spd, read_matrix
from .precond import diagonal, diagonally_dominant, identity, jacobi_majorizer
from .singular import SingularProblem, solve_cg_normal, solve_landweber
from .solvers import (QmpProblem, selector, solve_gd, solve_mm, stopping_rule,
                      write_trajectory_csv)

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

SOLVE_SOLVERS = ("mm", "richardson", "gauss_seidel", "steepest", "cg", "pcg",
                 "landweber", "cg_normal", "cmm", "cpcg", "gp", "gs")
PRECONDS = ("jacobi", "diagonal", "diag-dominant", "identity")

DEFAULTS = {
    "solver": None,
    "precond": "jacobi",
    "eps": None,
    "max_iters": 100_000,
    "seed": 0,
    "out_dir": ".",
    "alpha": 4.0,
    "target_k": 1,
    "sweep_points": 50,
    "rate": 0.25,
    "zipf_n": 200,
    "zipf_exponent": 1.5,
    "search_tol": 1e-3,
    "p_lo": 1e-3,
    "delta": 1e-8,
    "tail_tol": 1e-12,
    "rate_iters": 1000,
    "n": 0,
    "kappa": 100.0,
}
TYPES = {"eps": float, "max_iters": int, "seed": int, "alpha": float, "target_k": int,
         "sweep_points": int, "rate": float, "zipf_n": int, "zipf_exponent": float,
         "search_tol": float, "p_lo": float, "delta": float, "tail_tol": float,
         "rate_iters": int, "n": int, "kappa": float}
POSITIVE = ("eps", "search_tol", "delta", "tail_tol", "alpha")


class UsageError(Exception):
    pass


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(key, value):
    if value is None:
        return None
    if key == "block":
        if isinstance(value, str):
            value = value.replace(",", " ").split()
        if len(value) != 2:
            raise UsageError("block needs two indices k l")
        return tuple(int(v) for v in value)
    t = TYPES.get(key)
    try:
        return t(value) if t else value
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over config-file keys over defaults and validate."""
    cfg = dict(DEFAULTS)
    cfg.update({"matrix": None, "rhs": None, "constraints": None, "distribution": None,
                "block": None, "solvers": None})
    if args.config:
        file_cfg = read_config(args.config)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        cfg[key] = value
    cfg = {k: _coerce(k, v) for k, v in cfg.items()}
    # bench stops on distance to the oracle bound, solve on the residual
    if cfg["eps"] is None:
        cfg["eps"] = 1e-6 if args.command == "bench" else 1e-10
    if cfg["solver"] is None:
        cfg["solver"] = "cg" if args.command == "solve" else "direct"
    for key in POSITIVE:
        if not cfg[key] > 0:
            raise UsageError(f"{key} must be positive")
    if cfg["max_iters"] < 0:
        raise UsageError("max_iters must be nonnegative")
    if not 0 < cfg["rate"] <= 1:
        raise UsageError("rate must lie in (0, 1]")
    return cfg


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return [_json_value(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_json_value(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    return v


def _write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(_json_value(obj), indent=2, sort_keys=True) + "\n")


def _out_dir(cfg) -> Path:
    d = Path(cfg["out_dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_rhs(cfg, n):
    if cfg["rhs"]:
        B = read_matrix(cfg["rhs"])
        if B.shape[0] != n:
            raise UsageError(f"rhs has {B.shape[0]} rows, matrix has {n}")
        return B
    if cfg["block"]:
        k, l = cfg["block"]
        if not 1 <= k <= l <= n:
            raise UsageError(f"block {k} {l} outside 1..{n}")
        return selector(n, list(range(k - 1, l)))
    k = cfg["target_k"]
    if not 1 <= k <= n:
        raise UsageError(f"target-k {k} outside 1..{n}")
    return selector(n, k - 1)


def _load_constraints(cfg, n):
    arg = cfg["constraints"]
    if arg is None:
        return None
    if arg == "sum-to-zero":
        return ConstraintSet.sum_to_zero(n)
    return ConstraintSet(read_matrix(arg))


def _precond(cfg, J):
    kind = cfg["precond"]
    if kind == "jacobi":
        return jacobi_majorizer(J, seed=cfg["seed"])
    if kind == "diagonal":
        return diagonal(np.diag(np.asarray(J)).copy(), label="diag")
    if kind == "diag-dominant":
        return diagonally_dominant(J)
    if kind == "identity":
        return identity(np.asarray(J).shape[0])
    raise UsageError(f"unknown preconditioner {kind!r}; expected one of {PRECONDS}")


def _run_solve(cfg, J, B, cs):
    solver = cfg["solver"]
    stop = stopping_rule("residual_norm", cfg["eps"], cfg["max_iters"])
    seed, ri = cfg["seed"], cfg["rate_iters"]
    if solver in ("landweber", "cg_normal"):
        prob = SingularProblem(J, B)
        return solve_landweber(prob, stop=stop) if solver == "landweber" \
            else solve_cg_normal(prob, stop=stop)
    if solver in ("cmm", "cpcg", "gp", "gs"):
        prob = ConstrainedQmpProblem(J, B, cs if cs is not None else ConstraintSet.none(len(B)))
        if solver == "cmm":
            return solve_constrained_mm(prob, _precond(cfg, J), stop=stop, rate_iters=ri,
                                        seed=seed)
        if solver == "cpcg":
            return solve_constrained_pcg(prob, _precond(cfg, J), stop=stop, rate_iters=ri,
                                         seed=seed)
        if solver == "gp":
            return solve_gradient_projection(prob, _precond(cfg, J), stop=stop)
        return gs_two_solve_composition(J, B, prob.H, stop=stop)
    if cs is not None and cs.p:
        raise UsageError(f"solver {solver!r} is unconstrained; use cmm, cpcg, gp or gs")
    prob = QmpProblem(J, B)
    prob.require_positive_definite()
    if solver == "mm":
        return solve_mm(prob, _precond(cfg, J), stop=stop, rate_iters=ri, seed=seed)
    precond = _precond(cfg, J) if solver == "pcg" and cfg["precond"] != "jacobi" else None
    return solve_gd(prob, solver, stop=stop, precond=precond, rate_iters=ri, seed=seed)


def cmd_solve(cfg) -> int:
    if cfg["solver"] not in SOLVE_SOLVERS:
        raise UsageError(f"unknown solver {cfg['solver']!r}; expected one of {SOLVE_SOLVERS}")
    if not cfg["matrix"]:
        raise UsageError("solve needs --matrix")
    J = read_matrix(cfg["matrix"])
    n = J.shape[0]
    B = _load_rhs(cfg, n)
    cs = _load_constraints(cfg, n)
    rep = _run_solve(cfg, J, B, cs)
    out = _out_dir(cfg)
    write_trajectory_csv(out / "trajectory.csv", rep)
    summary = rep.summary()
    summary["n"] = n
    summary["m"] = int(B.shape[1])
    _write_json(out / "summary.json", summary)
    return EXIT_OK if rep.converged else EXIT_NOT_CONVERGED


def _theta(cfg) -> np.ndarray:
    if cfg["distribution"]:
        return read_distribution(cfg["distribution"])
    return zipf_distribution(cfg["zipf_n"], cfg["zipf_exponent"])


def _bench_instance(cfg) -> bench_mod.BenchInstance:
    if cfg["matrix"]:
        J = read_matrix(cfg["matrix"])
        n = J.shape[0]
        B = _load_rhs(cfg, n)
        cs = _load_constraints(cfg, n)
        if cs is None:
            return bench_mod.unconstrained_instance(J, B, Path(cfg["matrix"]).name)
        return bench_mod.constrained_instance(J, B, cs, name=Path(cfg["matrix"]).name)
    if cfg["n"]:
        n = cfg["n"]
        J = random_spd(n, cfg["kappa"], cfg["seed"])
        B = _load_rhs(cfg, n)
        cs = _load_constraints(cfg, n)
        name = f"random_spd(n={n},kappa={cfg['kappa']!r},seed={cfg['seed']})"
        if cs is None:
            return bench_mod.unconstrained_instance(J, B, name)
        return bench_mod.constrained_instance(J, B, cs, name=name)
    theta = _theta(cfg)
    model = FlowModel(theta, cfg["alpha"], cfg["rate"])
    F = fss_fisher(model, delta=cfg["delta"], tail_tol=cfg["tail_tol"])
    B = _load_rhs(cfg, model.n)
    return bench_mod.constrained_instance(F.J, B, "sum-to-zero", theta,
                                          f"fss(n={model.n},alpha={cfg['alpha']!r},"
                                          f"p={cfg['rate']!r},K={F.K_used})")


def cmd_bench(cfg) -> int:
    inst = _bench_instance(cfg)
    solvers = None
    if cfg["solvers"]:
        solvers = [s.strip() for s in str(cfg["solvers"]).split(",") if s.strip()]
    eps = cfg["eps"]
    res = bench_mod.run_bench(inst, solvers, eps=eps, max_iters=cfg["max_iters"],
                              rate_iters=cfg["rate_iters"], seed=cfg["seed"])
    out = _out_dir(cfg)
    _atomic_write(out / "bench.csv", res.to_csv())
    _write_json(out / "bench.json", {
        "instance": res.instance, "n": res.n, "reference": res.reference,
        "direct_flops": res.direct_flops, "eps": eps, "seed": cfg["seed"],
        "rows": [{"solver": r.solver, "status": r.status, "breakeven": r.breakeven,
                  "iterations": res.reports[r.solver].iterations if r.solver in res.reports
                  else None} for r in res.rows],
    })
    return EXIT_OK if all(r.status == "converged" for r in res.rows) else EXIT_NOT_CONVERGED


def _sweep_csv(evals) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p", "crb", "sqrt_crb", "iterations", "flops"])
    for e in evals:
        w.writerow([repr(float(e.p)), repr(float(e.crb)), repr(math.sqrt(max(e.crb, 0.0))),
                    e.iterations, e.flops])
    return buf.getvalue()


def _fss_solver(cfg) -> str:
    if cfg["solver"] not in FSS_SOLVERS:
        raise UsageError(f"unknown FSS solver {cfg['solver']!r}; expected one of {FSS_SOLVERS}")
    return cfg["solver"]


def cmd_fss_design(cfg) -> int:
    theta = _theta(cfg)
    solver = _fss_solver(cfg)
    stop = None if solver == "direct" else stopping_rule("residual_norm", cfg["eps"],
                                                         cfg["max_iters"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        design = optimal_rate(theta, cfg["alpha"], cfg["target_k"], cfg["block"],
                              cfg["search_tol"], cfg["p_lo"], solver, cfg["sweep_points"],
                              cfg["delta"], stop)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = _out_dir(cfg)
    _atomic_write(out / "sweep.csv", _sweep_csv(design.sweep))
    best = next(e for e in design.evaluations if e.p == design.p_star)
    statuses = sorted({e.status for e in design.evaluations})
    _write_json(out / "summary.json", {
        "p_star": design.p_star, "crb_star": design.crb_star,
        "sqrt_crb_star": design.sqrt_crb_star, "status": design.status,
        "K_used": best.K_used, "n": int(theta.size), "alpha": cfg["alpha"],
        "target": list(cfg["block"]) if cfg["block"] else cfg["target_k"],
        "solver": solver, "evaluations": len(design.evaluations),
        "total_iterations": sum(e.iterations for e in design.evaluations),
        "total_flops": sum(e.flops for e in design.evaluations),
        "solver_statuses": statuses,
    })
    return EXIT_OK if statuses == ["converged"] else EXIT_NOT_CONVERGED


def cmd_fss_sweep(cfg) -> int:
    theta = _theta(cfg)
    solver = _fss_solver(cfg)
    if cfg["sweep_points"] < 1:
        raise UsageError("sweep-points must be at least 1")
    stop = None if solver == "direct" else stopping_rule("residual_norm", cfg["eps"],
                                                         cfg["max_iters"])
    evals = []
    for p in np.linspace(cfg["p_lo"], 1.0, cfg["sweep_points"]):
        model = FlowModel(theta, cfg["alpha"], float(p))
        evals.append(crb_at_rate(model, cfg["target_k"], cfg["block"], solver, stop,
                                 cfg["delta"]))
    out = _out_dir(cfg)
    _atomic_write(out / "sweep.csv", _sweep_csv(evals))
    return EXIT_OK if all(e.status == "converged" for e in evals) else EXIT_NOT_CONVERGED


COMMANDS = {"solve": cmd_solve, "bench": cmd_bench, "fss-design": cmd_fss_design,
            "fss-sweep": cmd_fss_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccrb", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file; flags take precedence")
        p.add_argument("--matrix", help="Fisher matrix file ('n m' header, then rows)")
        p.add_argument("--rhs", help="right-hand side matrix file (default: e_k)")
        p.add_argument("--constraints", help="constraint gradient H file or 'sum-to-zero'")
        p.add_argument("--solver")
        p.add_argument("--solvers", help="comma-separated solver list for bench")
        p.add_argument("--precond", choices=PRECONDS)
        p.add_argument("--eps", type=float)
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--distribution", help="CSV with columns size,proportion")
        p.add_argument("--alpha", type=float, help="load factor at p = 1")
        p.add_argument("--target-k", dest="target_k", type=int, help="1-based flow size")
        p.add_argument("--block", nargs=2, type=int, metavar=("K", "L"))
        p.add_argument("--sweep-points", dest="sweep_points", type=int)
        p.add_argument("--rate", type=float, help="sampling rate for bench on the FSS instance")
        p.add_argument("--zipf-n", dest="zipf_n", type=int)
        p.add_argument("--zipf-exponent", dest="zipf_exponent", type=float)
        p.add_argument("--search-tol", dest="search_tol", type=float)
        p.add_argument("--p-lo", dest="p_lo", type=float)
        p.add_argument("--delta", type=float)
        p.add_argument("--tail-tol", dest="tail_tol", type=float)
        p.add_argument("--rate-iters", dest="rate_iters", type=int)
        p.add_argument("--n", type=int, help="bench: random SPD instance of this size")
        p.add_argument("--kappa", type=float, help="bench: condition number of the random instance")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except Divergence as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (UsageError, CRBError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
