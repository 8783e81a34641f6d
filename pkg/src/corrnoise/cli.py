"""Command line entry point: ``corrnoise <subcommand> ...``.

Exit codes: 0 on success (and PASS for ``accountant``), 1 when a check fails
or a problem has no solution, 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .covariance import LDP, materialize, read_matrix_csv, write_matrix_csv
from .engine import ALGORITHMS
from .experiment import (
    Cell,
    ConfigError,
    ExperimentConfig,
    default_jobs,
    load_config,
    output_root,
    read_groups,
    run_cell,
    run_experiment,
    svg_line_chart,
    verify_summary,
    write_atomic,
)
from .graph import Graph, erdos_renyi, laplacian, metropolis_hastings, read_edge_list
from .optimizer import (
    CovDesignProblem,
    HbcThreatModel,
    InfeasibleProblemError,
    SolverError,
    solve_cov,
    solve_cov_hbc,
    solve_ldp,
)
from .privacy import PrivacyBudget, SingularCovarianceError, kappa_from_budget, verify_budget

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _add_budget(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("privacy budget")
    g.add_argument("--eps", type=float, default=10.0, help="target epsilon (default 10)")
    g.add_argument("--delta", type=float, default=1e-5, help="target delta (default 1e-5)")
    g.add_argument("--C", type=float, default=0.1, help="clipping threshold (default 0.1)")
    g.add_argument("--T", type=int, default=5000, help="number of iterations (default 5000)")


def _add_graph(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("topology")
    g.add_argument("--graph", help="edge-list file: first line n, then one 'i j' pair per line")
    g.add_argument("--topology", default="erdos_renyi",
                   choices=["erdos_renyi", "complete", "ring", "path", "star"])
    g.add_argument("--n", type=int, default=20, help="agent count (default 20)")
    g.add_argument("--p", type=float, default=0.5, help="edge probability for erdos_renyi (default 0.5)")
    g.add_argument("--graph-seed", type=int, default=0, help="seed of the random graph (default 0)")


def _cap(text: str):
    if text in ("auto", "none"):
        return None if text == "none" else "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cap must be 'auto', 'none' or a number, got {text!r}") from None


def _graph_from(args) -> Graph:
    if args.graph:
        return read_edge_list(args.graph)
    if args.topology == "erdos_renyi":
        return erdos_renyi(args.n, args.p, args.graph_seed)
    return getattr(Graph, args.topology)(args.n)


def _kappa(args, eps: float | None = None) -> float:
    return kappa_from_budget(PrivacyBudget(args.eps if eps is None else eps, args.delta, args.T, args.C))


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else output_root() / default_name


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# ------------------------------------------------------------ subcommands


def cmd_optimize_cov(args) -> int:
    g = _graph_from(args)
    W = metropolis_hastings(g)
    kappa = _kappa(args)
    out = _out_dir(args, "optimize-cov")
    if args.hbc_groups:
        if args.structure != "general":
            raise ConfigError("--hbc-groups needs --structure general")
        threat = HbcThreatModel([tuple(x) for x in read_groups(args.hbc_groups)], args.q)
        sol = solve_cov_hbc(W, kappa, threat, args.cap)
    else:
        structure = {"general": "general", "pairwise": "pairwise", "ldp": "scalar"}[args.structure]
        L = laplacian(g) if structure == "pairwise" else None
        sol = solve_cov(CovDesignProblem(W, kappa, args.cap, structure, L))
    summary = {"n": g.n, "kappa": kappa, **sol.summary()}
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(sol.R_star, out / "R_star.csv")
    text = json.dumps(summary, indent=2, sort_keys=True, default=_json_default)
    write_atomic(out / "summary.json", text + "\n")
    print(text)
    return EXIT_OK


def cmd_compare_traces(args) -> int:
    values = [float(v) for v in args.values.replace(",", " ").split()]
    if not values:
        raise ConfigError("--values is empty")
    out = _out_dir(args, "compare-traces")
    rows = ["sweep,value,structure,trace,kkt_residual,error"]
    series = {"general": ([], []), "pairwise": ([], []), "ldp": ([], [])}
    for v in values:
        eps, p, n = args.eps, args.p, args.n
        if args.sweep == "eps":
            eps = v
        elif args.sweep == "p":
            p = v
        else:
            n = int(v)
        try:
            g = erdos_renyi(n, p, args.graph_seed)
            W = metropolis_hastings(g)
            kappa = _kappa(args, eps)
        except (ValueError, RuntimeError) as exc:
            for s in series:
                rows.append(f"{args.sweep},{v!r},{s},,,{json.dumps(str(exc))}")
            continue
        for s, structure in (("general", "general"), ("pairwise", "pairwise"), ("ldp", "scalar")):
            try:
                L = laplacian(g) if structure == "pairwise" else None
                sol = solve_cov(CovDesignProblem(W, kappa, args.cap, structure, L))
                rows.append(f"{args.sweep},{v!r},{s},{sol.objective!r},{sol.kkt_residual!r},")
                series[s][0].append(v)
                series[s][1].append(sol.objective)
            except (ValueError, RuntimeError) as exc:
                rows.append(f"{args.sweep},{v!r},{s},,,{json.dumps(str(exc))}")
    text = "\n".join(rows) + "\n"
    write_atomic(out / f"traces_{args.sweep}.csv", text)
    label = {"eps": "epsilon", "p": "p", "n": "n"}[args.sweep]
    write_atomic(out / f"traces_{args.sweep}.svg",
                 svg_line_chart(series, f"Tr(W R W^T) vs {label}", label, "effective noise variance", logy=True))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.output = args.out
    outdir = run_experiment(cfg, args.jobs)
    errors = (outdir / "errors.csv").read_text().splitlines()[1:]
    print(f"wrote {outdir} (config hash {cfg.config_hash()}, {len(errors)} failed runs)")
    return EXIT_OK if not errors else EXIT_FAIL


def cmd_accountant(args) -> int:
    b = PrivacyBudget(args.eps, args.delta, args.T, args.C)
    if args.cov:
        R = read_matrix_csv(args.cov)
    else:
        R = materialize(LDP(solve_ldp(kappa_from_budget(b)) * args.scale, args.n))
    report = verify_budget(R, b)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_simulate(args) -> int:
    if args.replay:
        meta = json.loads(Path(args.replay).read_text())
        cfg = ExperimentConfig(**{**meta["config"], "output": ""})
        cell = Cell(**meta["cell"])
        algorithm = meta["algorithm"]
    else:
        cfg = ExperimentConfig(
            seeds=[args.seed], algorithms=[args.algorithm], generator=args.topology, n=args.n, p=[args.p],
            graph_file=args.graph or "", graph_seed=str(args.seed) if args.graph_seed is None else str(args.graph_seed),
            epsilon=[args.eps], delta=args.delta, C=args.C, T=args.T, task=args.task, eta1=[args.eta1],
            schedule=args.schedule, init=args.init, data=args.data or "", cap=args.cap_text,
        )
        if args.graph:
            cfg.generator = "file"
        cfg.validate()
        cell = Cell(args.eps, args.p if cfg.generator == "erdos_renyi" else 1.0, args.eta1, args.seed)
        algorithm = args.algorithm
    traj, meta = run_cell(cfg, cell, algorithm)
    lines = traj.csv_lines(cell.seed, algorithm, repr(cell.epsilon), repr(cell.p), meta["config_hash"])
    text = "\n".join(lines) + "\n"
    if args.out:
        write_atomic(args.out, text)
        write_atomic(Path(args.out).with_suffix(".json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify_summary(args) -> int:
    problems = verify_summary(args.run_dir)
    for p in problems:
        print(p)
    print("summary consistent" if not problems else f"{len(problems)} mismatches")
    return EXIT_OK if not problems else EXIT_FAIL


# ------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrnoise",
        description="Correlated-noise private decentralized SGD: covariance design, accounting and simulation.",
        epilog="Outputs default to $CORRNOISE_OUTPUT_ROOT (or ./runs) when --out is not given.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize-cov", help="solve the covariance design problem and write R*")
    _add_graph(p)
    _add_budget(p)
    p.add_argument("--structure", choices=["general", "pairwise", "ldp"], default="general")
    p.add_argument("--cap", type=_cap, default="auto",
                   help="diagonal cap on R: 'auto' (100/kappa), 'none' or a number")
    p.add_argument("--hbc-groups", help="seed-group file (one group of agent ids per line)")
    p.add_argument("--q", type=int, default=0, help="largest colluding coalition (with --hbc-groups)")
    p.add_argument("--out", help="output directory for R_star.csv and summary.json")
    p.set_defaults(func=cmd_optimize_cov)

    p = sub.add_parser("compare-traces", help="Tr(W R W^T) of the general, pairwise and LDP designs over a sweep")
    _add_budget(p)
    p.add_argument("--sweep", choices=["eps", "p", "n"], required=True)
    p.add_argument("--values", required=True, help="comma-separated sweep values")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--p", type=float, default=0.5)
    p.add_argument("--graph-seed", type=int, default=0)
    p.add_argument("--cap", type=_cap, default="auto")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_compare_traces)

    p = sub.add_parser("run-experiment", help="run an experiment grid from a config file")
    p.add_argument("config", help="INI experiment file")
    p.add_argument("--jobs", type=int, default=default_jobs(), help="parallel grid cells (default: CPU count)")
    p.add_argument("--out", help="run directory (overrides the config)")
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("accountant", help="check a covariance against a privacy budget")
    _add_budget(p)
    p.add_argument("--cov", help="covariance CSV; omitted means scale * (1/kappa) I")
    p.add_argument("--n", type=int, default=20, help="agent count for the isotropic default")
    p.add_argument("--scale", type=float, default=1.0, help="multiplier on the isotropic default")
    p.set_defaults(func=cmd_accountant)

    p = sub.add_parser("simulate", help="run one algorithm once and write its trajectory CSV")
    _add_graph(p)
    _add_budget(p)
    p.set_defaults(graph_seed=None)
    p.add_argument("--algorithm", choices=ALGORITHMS, default="corn")
    p.add_argument("--task", choices=["quadratic", "logistic"], default="quadratic")
    p.add_argument("--data", help="LIBSVM file for the logistic task (default: bundled excerpt)")
    p.add_argument("--eta1", type=float, default=0.01)
    p.add_argument("--schedule", choices=["sqrt", "constant"], default="sqrt")
    p.add_argument("--init", choices=["optimum", "zero"], default="optimum")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", dest="cap_text", default="auto")
    p.add_argument("--replay", help="metadata JSON of an earlier run to reproduce")
    p.add_argument("--out", help="trajectory CSV path (metadata goes next to it); stdout if omitted")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify-summary", help="recompute a run directory's summary from its per-run CSVs")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_verify_summary)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InfeasibleProblemError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (SingularCovarianceError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
