"""Command-line front end.

Subcommands are thin adapters around the library: they parse arguments,
load/store JSON and CSV artifacts and map outcomes to exit codes
(0 = checks pass, 1 = a numerical check failed, 2 = usage/config error,
3 = solver non-convergence).  ``MBB_THREADS`` caps the worker count of
``experiment --parallel``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .costs import CostSpec
from .dual import Potential, potential_from_u, solve_backward_pme, weak_duality_gap
from .experiments import EXPERIMENTS, ConfigError, ExperimentConfig, RunManifest, report, run_experiment
from .fpe import DiffusionField, MeasureCurve, solve_fpe
from .grids import DiscreteMeasure
from .interpolation import ConvexOrderError, dacmoser_cost, dacorogna_moser, strassen_coupling, strassen_report
from .motlp import InfeasibleError, LPSolverError, solve_mot_lp
from .primal import MaxIterationsError, PrimalOptions, PrimalProblem, solve_primal
from .relaxation import convergence_csv, relaxation_convergence, skorokhod_time_change
from .fpe import simulate_sde

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NO_CONVERGENCE = 3

_COSTS_POINT = {
    "pow2": lambda x: x**2,
    "pow3": lambda x: x**3,
    "pow4": lambda x: x**4,
    "abs": np.abs,
}


def _load_measure(path: str) -> DiscreteMeasure:
    with open(path) as fh:
        text = fh.read()
    if path.endswith(".csv"):
        return DiscreteMeasure.from_csv(text)
    return DiscreteMeasure.from_json(text)


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _dump(obj: dict, path: str | None):
    text = json.dumps(obj, indent=2)
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)
    else:
        print(text)


def _write_text(text: str, path: str | None):
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)
    else:
        print(text, end="")


def _mot_cost(spec: str, mu: DiscreteMeasure, nu: DiscreteMeasure):
    if spec in ("power2", "pow2"):
        return lambda x, y: (y - x) ** 2
    if spec == "abs":
        return lambda x, y: np.abs(y - x)
    if spec.endswith(".csv"):
        table = np.loadtxt(spec, delimiter=",")
        if table.shape != (mu.grid.n_cells, nu.grid.n_cells):
            raise ConfigError(
                f"cost table shape {table.shape} does not match grids "
                f"({mu.grid.n_cells}, {nu.grid.n_cells})"
            )
        xs, ys = mu.grid.centers, nu.grid.centers

        def lookup(x, y):
            i = np.clip(np.searchsorted(xs, np.asarray(x) - 1e-12), 0, len(xs) - 1)
            j = np.clip(np.searchsorted(ys, np.asarray(y) - 1e-12), 0, len(ys) - 1)
            return table[i, j]

        return lookup
    raise ConfigError(f"unknown cost {spec!r} (power2, abs, or a CSV table)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mbb", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--tol", type=float, default=None, help="solver tolerance override")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=argparse.ArgumentParser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add("mot-lp", help="discrete martingale transport LP")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--cost", default="power2")
    p.add_argument("--out", default=None)

    p = add("fpe", help="forward Fokker-Planck solve")
    p.add_argument("--a", required=True, help="diffusion field JSON")
    p.add_argument("--mu0", required=True)
    p.add_argument("--scheme", choices=("explicit", "implicit"), default="implicit")
    p.add_argument("--out", default=None)

    p = add("primal", help="dynamic transport solver")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--cost", default='{"kind":"power","p":2,"lambda":1}')
    p.add_argument("--nt", type=int, default=100)
    p.add_argument("--out", default=None)

    p = add("dual-pme", help="backward porous-medium solve")
    p.add_argument("--u1", required=True, help='terminal slice JSON {"u": [...]} on [-r, r]')
    p.add_argument("-q", type=float, required=True)
    p.add_argument("-r", type=float, default=1.0)
    p.add_argument("--nt", type=int, default=128)
    p.add_argument("--out", default=None)

    p = add("duality", help="weak duality of a potential vs a solution")
    p.add_argument("--phi", required=True, help="potential JSON (t, x, phi)")
    p.add_argument("--solution", required=True, help="primal solution JSON")
    p.add_argument("--out", default=None)

    p = add("dacmoser", help="affine interpolation plan and cost bound")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("-p", type=float, default=2.0)
    p.add_argument("--out", default=None)

    p = add("strassen", help="one-step coupling via the SDE lift")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--paths", type=int, default=100000)
    p.add_argument("--out", default=None)

    p = add("relax", help="length-relaxation convergence table")
    p.add_argument("--a", required=True)
    p.add_argument("--cost-point", default="pow4", choices=sorted(_COSTS_POINT))
    p.add_argument("--meshes", default="4,16,64", help="comma-separated step counts")
    p.add_argument("--paths", type=int, default=100000)
    p.add_argument("--dt", type=float, default=1.0 / 256)
    p.add_argument("--mu0", default=None, help="initial law JSON (default: point mass at 0)")
    p.add_argument("--out", default=None)

    p = add("skorokhod", help="embedding + time-change energy")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("-p", type=float, default=2.0)
    p.add_argument("--qmom", type=float, default=5.0)
    p.add_argument("--r", type=float, default=None, help="default: (qmom-2p)/(2p-2)")
    p.add_argument("--paths", type=int, default=100000)
    p.add_argument("--out", default=None)

    p = add("experiment", help="run named experiment pipelines")
    p.add_argument("names", nargs="+", choices=EXPERIMENTS)
    p.add_argument("--config", default=None, help="JSON file with parameter overrides")
    p.add_argument("--out", default="runs")
    p.add_argument("--figures", action="store_true")
    p.add_argument("--parallel", type=int, default=1)

    p = add("report", help="aggregate manifests")
    p.add_argument("manifests", nargs="+", help="manifest files or run directories")
    p.add_argument("--out", default=None, help="write summary JSON here (txt alongside)")
    return ap


def _cmd_mot_lp(args) -> int:
    mu = _load_measure(args.mu)
    nu = _load_measure(args.nu)
    coupling = solve_mot_lp(mu, nu, _mot_cost(args.cost, mu, nu))
    _dump(coupling.to_dict(), args.out)
    return EXIT_OK


def _cmd_fpe(args) -> int:
    a = DiffusionField.from_dict(_load_json(args.a))
    mu0 = _load_measure(args.mu0)
    curve = solve_fpe(mu0, a, scheme=args.scheme)
    _dump(curve.to_dict(), args.out)
    return EXIT_OK


def _cmd_primal(args) -> int:
    mu = _load_measure(args.mu)
    nu = _load_measure(args.nu)
    cost = CostSpec.from_dict(json.loads(args.cost))
    opts = PrimalOptions()
    if args.tol is not None:
        opts.tol = args.tol
    opts.raise_on_maxiter = True
    sol = solve_primal(PrimalProblem(mu, nu, cost, n_t=args.nt), opts)
    payload = {
        "value": sol.value,
        "dual_value": sol.dual_value,
        "gap": sol.gap,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "curve": sol.curve.to_dict(),
        "flux": sol.flux.tolist(),
        "a": sol.a.to_dict(),
    }
    _dump(payload, args.out)
    if args.out:
        log_path = os.path.splitext(args.out)[0] + "_log.csv"
        with open(log_path, "w") as fh:
            fh.write(sol.log_csv())
    return EXIT_OK


def _cmd_dual_pme(args) -> int:
    data = _load_json(args.u1)
    u1 = np.asarray(data["u"], dtype=float)
    sol = solve_backward_pme(u1, q=args.q, r=args.r, n_x=len(u1) - 1,
                             t_nodes=np.linspace(0.0, 1.0, args.nt + 1))
    _dump(sol.to_dict(), args.out)
    return EXIT_OK


def _cmd_duality(args) -> int:
    pot = Potential.from_dict(_load_json(args.phi))
    sol = _load_json(args.solution)
    curve = MeasureCurve.from_dict(sol["curve"])
    a = DiffusionField.from_dict(sol["a"])
    cost = CostSpec.from_dict(sol.get("cost", {"kind": "power", "p": 2, "lambda": 1}))
    out = weak_duality_gap(pot, curve, a, cost)
    _dump(out, args.out)
    return EXIT_OK


def _cmd_dacmoser(args) -> int:
    mu = _load_measure(args.mu)
    nu = _load_measure(args.nu)
    plan = dacorogna_moser(mu, nu)
    value, bound = dacmoser_cost(plan, args.p)
    payload = plan.to_dict()
    payload["p"] = args.p
    payload["value"] = value
    payload["bound"] = bound
    _dump(payload, args.out)
    return EXIT_OK


def _cmd_strassen(args) -> int:
    mu = _load_measure(args.mu)
    nu = _load_measure(args.nu)
    coupling = strassen_coupling(mu, nu, eps=args.eps, n_paths=args.paths, seed=args.seed)
    payload = coupling.to_dict()
    payload["report"] = strassen_report(coupling, mu, nu)
    _dump(payload, args.out)
    return EXIT_OK


def _cmd_relax(args) -> int:
    a = DiffusionField.from_dict(_load_json(args.a))
    if args.mu0:
        mu0 = _load_measure(args.mu0)
    else:
        from .grids import Grid1D

        grid = Grid1D(-40.0, 40.0, 800)
        mu0 = DiscreteMeasure.point_mass(grid, 0.0)
    ens = simulate_sde(mu0, a, n_paths=args.paths, dt=args.dt, seed=args.seed)
    meshes = [1.0 / int(tok) for tok in args.meshes.split(",")]
    rows = relaxation_convergence(ens, meshes, _COSTS_POINT[args.cost_point])
    _write_text(convergence_csv(rows), args.out)
    return EXIT_OK


def _cmd_skorokhod(args) -> int:
    mu = _load_measure(args.mu)
    nu = _load_measure(args.nu)
    r = args.r if args.r is not None else (args.qmom - 2 * args.p) / (2 * args.p - 2)
    run = skorokhod_time_change(mu, nu, p=args.p, q_mom=args.qmom, r=r,
                                n_paths=args.paths, seed=args.seed)
    _dump(
        {
            "method": run.method,
            "r": run.r,
            "p": run.p,
            "energy": run.energy,
            "energy_se": run.energy_se,
            "mean_tau": run.mean_tau,
            "w1_target": run.w1_target,
            "n_unstopped": run.n_unstopped,
        },
        args.out,
    )
    return EXIT_OK


def _run_one_experiment(payload) -> dict:
    name, seed, params, out_dir, figures = payload
    cfg = ExperimentConfig(name=name, seed=seed, params=params)
    manifest = run_experiment(cfg, out_dir=out_dir, figures=figures)
    return manifest.to_dict()


def _cmd_experiment(args) -> int:
    overrides = _load_json(args.config) if args.config else {}
    jobs = []
    for name in args.names:
        out_dir = os.path.join(args.out, name)
        jobs.append((name, args.seed, overrides.get(name, {}), out_dir, args.figures))
    workers = max(1, min(args.parallel, int(os.environ.get("MBB_THREADS", args.parallel) or 1)))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            manifests = [RunManifest.from_dict(d) for d in pool.map(_run_one_experiment, jobs)]
    else:
        manifests = [RunManifest.from_dict(_run_one_experiment(j)) for j in jobs]
    summary = report(manifests)
    print(summary["text"])
    return EXIT_OK if summary["all_passed"] else EXIT_CHECK_FAILED


def _cmd_report(args) -> int:
    manifests = []
    for path in args.manifests:
        if os.path.isdir(path):
            path = os.path.join(path, "manifest.json")
        manifests.append(RunManifest.from_dict(_load_json(path)))
    summary = report(manifests)
    if args.out:
        _dump({k: v for k, v in summary.items() if k != "text"}, args.out)
        _write_text(summary["text"] + "\n", os.path.splitext(args.out)[0] + ".txt")
    else:
        print(summary["text"])
    return EXIT_OK if summary["all_passed"] else EXIT_CHECK_FAILED


_HANDLERS = {
    "mot-lp": _cmd_mot_lp,
    "fpe": _cmd_fpe,
    "primal": _cmd_primal,
    "dual-pme": _cmd_dual_pme,
    "duality": _cmd_duality,
    "dacmoser": _cmd_dacmoser,
    "strassen": _cmd_strassen,
    "relax": _cmd_relax,
    "skorokhod": _cmd_skorokhod,
    "experiment": _cmd_experiment,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleError, ConvexOrderError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except (MaxIterationsError, LPSolverError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
