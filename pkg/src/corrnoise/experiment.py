"""Config-driven experiment grids: loading, execution, summaries and charts.

An experiment file is INI-style (``configparser``), one experiment per
file::

    [experiment]
    name = quadratic-eps10
    seeds = 0, 1, 2
    algorithms = dsgd, ldp, decor, corn

    [topology]
    generator = erdos_renyi      # or complete, ring, path, star, file
    n = 20
    p = 0.2, 0.5, 1.0            # grid (erdos_renyi only)
    graph_seed = run             # "run" resamples the graph per seed

    [budget]
    epsilon = 10                 # grid
    delta = 1e-5
    C = 0.1
    T = 5000

    [task]
    kind = quadratic             # or logistic
    eta1 = 0.01                  # grid
    schedule = sqrt
    init = optimum               # or zero

    [optimizer]
    cap = auto

Every grid cell ``(epsilon, p, eta1, seed)`` is an independent job that
runs all listed algorithms on the same graph and gradient draws.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .engine import ALGORITHMS, NoiseDesign, RunConfig, Trajectory, corn_dsgd_run, design_noise, _plain
from .graph import Graph, erdos_renyi, laplacian, metropolis_hastings, read_edge_list
from .optimizer import HbcThreatModel, solve_cov_hbc
from .covariance import factorize
from .privacy import PrivacyBudget, kappa_from_budget
from .tasks import QuadraticTask, bundled_a9a_excerpt, logistic_task_from_file

OUTPUT_ROOT_ENV = "CORRNOISE_OUTPUT_ROOT"
GENERATORS = ("erdos_renyi", "complete", "ring", "path", "star", "file")
SUMMARY_HEADER = "algorithm,epsilon,p,eta1,metric,mean,std,runs,failed,selected,config_hash"


class ConfigError(ValueError):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


# ------------------------------------------------------------ config


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seeds: list = field(default_factory=lambda: [0])
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    generator: str = "erdos_renyi"
    n: int = 20
    p: list = field(default_factory=lambda: [0.5])
    graph_file: str = ""
    graph_seed: str = "run"
    epsilon: list = field(default_factory=lambda: [10.0])
    delta: float = 1e-5
    C: float = 0.1
    T: int = 5000
    task: str = "quadratic"
    theta: float = 15.0
    init: str = "optimum"
    eta1: list = field(default_factory=lambda: [0.01])
    schedule: str = "sqrt"
    data: str = ""
    alpha: float = 10.0
    l2_reg: float = 1e-4
    batch_size: int = 128
    record_every: int = 0
    cap: str = "auto"
    hbc_groups: list = field(default_factory=list)
    q: int = 0
    output: str = ""

    def validate(self) -> None:
        for name in ("seeds", "algorithms", "p", "epsilon", "eta1"):
            if not getattr(self, name):
                raise ConfigError(f"grid {name!r} is empty")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ConfigError(f"unknown algorithms {bad}; choose from {', '.join(ALGORITHMS)}")
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.generator == "file" and not Path(self.graph_file).is_file():
            raise ConfigError(f"graph file {self.graph_file!r} does not exist")
        if self.task not in ("quadratic", "logistic"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.task == "logistic" and self.data and not Path(self.data).is_file():
            raise ConfigError(f"data file {self.data!r} does not exist")
        if self.init not in ("optimum", "zero"):
            raise ConfigError(f"init must be 'optimum' or 'zero', got {self.init!r}")
        if self.graph_seed != "run":
            try:
                int(self.graph_seed)
            except ValueError:
                raise ConfigError(f"graph_seed must be 'run' or an integer, got {self.graph_seed!r}") from None
        # budget errors surface here rather than inside a worker
        for eps in self.epsilon:
            PrivacyBudget(eps, self.delta, self.T, self.C)

    def identity(self) -> dict:
        """Fields that define the results (the output location does not)."""
        d = asdict(self)
        d.pop("output")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.identity(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def output_dir(self) -> Path:
        return Path(self.output) if self.output else output_root() / self.name


def _floats(text: str) -> list:
    return [float(x) for x in text.replace(",", " ").split()]


def _ints(text: str) -> list:
    return [int(x) for x in text.replace(",", " ").split()]


def _words(text: str) -> list:
    return [x for x in text.replace(",", " ").split()]


_FIELDS = {
    "experiment": {"name": str, "seeds": _ints, "algorithms": _words, "output": str},
    "topology": {"generator": str, "n": int, "p": _floats, "file": str, "graph_seed": str},
    "budget": {"epsilon": _floats, "delta": float, "c": float, "t": int},
    "task": {"kind": str, "theta": float, "init": str, "eta1": _floats, "schedule": str, "data": str,
             "alpha": float, "l2_reg": float, "batch_size": int, "record_every": int},
    "optimizer": {"cap": str, "hbc_groups": str, "q": int},
}
_RENAME = {"file": "graph_file", "c": "C", "t": "T", "kind": "task"}


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate an experiment file; paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read(path)
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _FIELDS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            conv = _FIELDS[section].get(key)
            if conv is None:
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            try:
                value = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {exc}") from None
            setattr(cfg, _RENAME.get(key, key), value)
    base = path.parent
    if cfg.graph_file:
        cfg.graph_file = str((base / cfg.graph_file).resolve())
    if cfg.data:
        cfg.data = str((base / cfg.data).resolve())
    if isinstance(cfg.hbc_groups, str):
        cfg.hbc_groups = read_groups(base / cfg.hbc_groups) if cfg.hbc_groups else []
    cfg.validate()
    return cfg


def read_groups(path: str | Path) -> list:
    """Seed groups, one per line as space- or comma-separated agent ids."""
    groups = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            groups.append(sorted(int(x) for x in line.replace(",", " ").split()))
    if not groups:
        raise ConfigError(f"{path}: no seed groups")
    return groups


# ------------------------------------------------------------ cells


@dataclass(frozen=True)
class Cell:
    epsilon: float
    p: float
    eta1: float
    seed: int

    def stem(self, algorithm: str) -> str:
        return f"{algorithm}_eps{self.epsilon:g}_p{self.p:g}_eta{self.eta1:g}_seed{self.seed}"


def cells(cfg: ExperimentConfig) -> list:
    ps = cfg.p if cfg.generator == "erdos_renyi" else [1.0]
    return [Cell(e, p, h, s) for e in cfg.epsilon for p in ps for h in cfg.eta1 for s in cfg.seeds]


def build_graph(cfg: ExperimentConfig, p: float, seed: int) -> Graph:
    gseed = seed if cfg.graph_seed == "run" else int(cfg.graph_seed)
    if cfg.generator == "erdos_renyi":
        return erdos_renyi(cfg.n, p, gseed)
    if cfg.generator == "file":
        return read_edge_list(cfg.graph_file)
    return getattr(Graph, cfg.generator)(cfg.n)


def build_task(cfg: ExperimentConfig, n: int, seed: int):
    if cfg.task == "quadratic":
        return QuadraticTask(n, cfg.theta)
    data = cfg.data or str(bundled_a9a_excerpt())
    return logistic_task_from_file(data, n, cfg.alpha, seed, l2_reg=cfg.l2_reg, batch_size=cfg.batch_size)


def primary_metric(cfg: ExperimentConfig) -> str:
    return "opt_gap" if cfg.task == "quadratic" else "test_loss"


def _design(cfg, algorithm, W, L, kappa) -> NoiseDesign:
    cap = None if cfg.cap == "none" else ("auto" if cfg.cap == "auto" else float(cfg.cap))
    if algorithm == "corn" and cfg.hbc_groups:
        sol = solve_cov_hbc(W, kappa, HbcThreatModel([tuple(g) for g in cfg.hbc_groups], cfg.q), cap)
        return NoiseDesign("corn", sol.R_star, factorize(sol.R_star), _plain(sol.summary()))
    return design_noise(algorithm, W, L, kappa, cap)


def run_cell(cfg: ExperimentConfig, cell: Cell, algorithm: str) -> tuple[Trajectory, dict]:
    """One algorithm on one grid cell; returns the trajectory and its metadata."""
    g = build_graph(cfg, cell.p, cell.seed)
    W = metropolis_hastings(g)
    kappa = kappa_from_budget(PrivacyBudget(cell.epsilon, cfg.delta, cfg.T, cfg.C))
    design = _design(cfg, algorithm, W, laplacian(g), kappa)
    task = build_task(cfg, g.n, cell.seed)
    x0 = task.optimum()[0] if (cfg.init == "optimum" and hasattr(task, "optimum")) else None
    rc = RunConfig(W, task, cfg.T, cfg.C, cell.eta1, cell.seed, design.factor, cfg.schedule,
                   cfg.record_every or None, x0)
    traj = corn_dsgd_run(rc)
    meta = {
        "config_hash": cfg.config_hash(),
        "config": cfg.identity(),
        "cell": asdict(cell),
        "algorithm": algorithm,
        "kappa": kappa,
        "graph_edges": g.sorted_edges(),
        "noise_design": design.summary,
        "selection_metric": primary_metric(cfg),
    }
    return traj, meta


def _run_job(args):
    cfg, cell, outdir = args
    results = []
    for algorithm in cfg.algorithms:
        stem = cell.stem(algorithm)
        try:
            traj, meta = run_cell(cfg, cell, algorithm)
        except Exception as exc:  # a failed cell is recorded, the grid goes on
            results.append((algorithm, stem, None, f"{type(exc).__name__}: {exc}"))
            continue
        lines = traj.csv_lines(cell.seed, algorithm, repr(cell.epsilon), repr(cell.p), meta["config_hash"])
        write_atomic(Path(outdir) / "runs" / f"{stem}.csv", "\n".join(lines) + "\n")
        write_atomic(Path(outdir) / "runs" / f"{stem}.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
        finals = {name: traj.final(name) for name in sorted({m for _, m, _ in traj.records})}
        results.append((algorithm, stem, finals, None))
    return cell, results


def write_atomic(path: str | Path, text: str) -> None:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def default_jobs() -> int:
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig, jobs: int | None = None, outdir: str | Path | None = None) -> Path:
    """Run the whole grid and write per-run CSVs, the summary and sweep charts."""
    outdir = Path(outdir) if outdir is not None else cfg.output_dir()
    outdir.mkdir(parents=True, exist_ok=True)
    jobs = default_jobs() if jobs is None else max(1, jobs)
    work = [(cfg, c, str(outdir)) for c in cells(cfg)]
    if jobs == 1 or len(work) == 1:
        done = [_run_job(w) for w in work]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            done = list(pool.map(_run_job, work))
    write_atomic(outdir / "config.json",
                 json.dumps({"config_hash": cfg.config_hash(), "config": cfg.identity()}, indent=2, sort_keys=True) + "\n")
    rows, errors = summarize(cfg, done)
    write_atomic(outdir / "summary.csv", "\n".join([SUMMARY_HEADER] + rows) + "\n")
    err_lines = ["stem,error"] + [f"{stem},{json.dumps(msg)}" for stem, msg in errors]
    write_atomic(outdir / "errors.csv", "\n".join(err_lines) + "\n")
    for name, svg in sweep_charts(cfg, done).items():
        write_atomic(outdir / name, svg)
    return outdir


# ------------------------------------------------------------ summaries


def _stats(values: list) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return math.nan, math.nan
    std = float(np.std(a, ddof=1)) if a.size > 1 else 0.0
    return float(np.mean(a)), std


def _group_finals(cfg, done):
    groups: dict = {}
    failed: dict = {}
    errors = []
    for cell, results in done:
        for algorithm, stem, finals, err in results:
            key = (algorithm, cell.epsilon, cell.p, cell.eta1)
            groups.setdefault(key, {})
            failed.setdefault(key, 0)
            if err is not None:
                failed[key] += 1
                errors.append((stem, err))
                continue
            for metric, value in finals.items():
                groups[key].setdefault(metric, []).append((cell.seed, value))
    return groups, failed, errors


def _best_eta(groups: dict, failed: dict, metric: str) -> dict:
    """Step size with the lowest mean final ``metric`` per (algorithm, epsilon, p)."""
    best: dict = {}
    for (alg, eps, p, eta), metrics in groups.items():
        vals = [v for _, v in sorted(metrics.get(metric, []))]
        if vals and not failed[(alg, eps, p, eta)]:
            m = float(np.mean(vals))
            if (alg, eps, p) not in best or m < best[(alg, eps, p)][0]:
                best[(alg, eps, p)] = (m, eta)
    return best


def summarize(cfg: ExperimentConfig, done: list) -> tuple[list, list]:
    """Summary rows (mean and sample std of final metrics over seeds)."""
    groups, failed, errors = _group_finals(cfg, done)
    sel_metric = primary_metric(cfg)
    best = _best_eta(groups, failed, sel_metric)
    rows = []
    h = cfg.config_hash()
    for key in sorted(groups):
        alg, eps, p, eta = key
        metrics = groups[key] or {sel_metric: []}
        for metric in sorted(metrics):
            vals = [v for _, v in sorted(metrics[metric])]
            mean, std = _stats(vals)
            selected = int(best.get((alg, eps, p), (None, None))[1] == eta)
            rows.append(f"{alg},{eps!r},{p!r},{eta!r},{metric},{mean!r},{std!r},{len(vals)},{failed[key]},{selected},{h}")
    return rows, errors


def read_summary(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, ln.split(","))) for ln in lines[1:] if ln]


def read_trajectory_csv(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, ln.split(","))) for ln in lines[1:] if ln]


def verify_summary(run_dir: str | Path, rtol: float = 1e-12) -> list[str]:
    """Recompute every summary mean and std from the per-run CSVs.

    Returns a list of mismatch descriptions (empty when consistent).
    """
    run_dir = Path(run_dir)
    finals: dict = {}
    for csv in sorted((run_dir / "runs").glob("*.csv")):
        rows = read_trajectory_csv(csv)
        if not rows:
            continue
        last = max(int(r["iteration"]) for r in rows)
        meta = json.loads(csv.with_suffix(".json").read_text())
        for r in rows:
            if int(r["iteration"]) == last:
                key = (r["algorithm"], float(r["epsilon"]), float(r["p"]), float(meta["cell"]["eta1"]), r["metric_name"])
                finals.setdefault(key, []).append((int(r["seed"]), float(r["value"])))
    problems = []
    for row in read_summary(run_dir / "summary.csv"):
        key = (row["algorithm"], float(row["epsilon"]), float(row["p"]), float(row["eta1"]), row["metric"])
        vals = [v for _, v in sorted(finals.get(key, []))]
        if len(vals) != int(row["runs"]):
            problems.append(f"{key}: summary counts {row['runs']} runs, found {len(vals)}")
            continue
        mean, std = _stats(vals)
        for label, got, want in (("mean", float(row["mean"]), mean), ("std", float(row["std"]), std)):
            if not (math.isnan(got) and math.isnan(want)) and not np.isclose(got, want, rtol=rtol, atol=0.0):
                problems.append(f"{key}: summary {label} {got!r} != recomputed {want!r}")
    return problems


# ------------------------------------------------------------ charts


def svg_line_chart(series: dict, title: str, xlabel: str, ylabel: str, logy: bool = False,
                   width: int = 480, height: int = 320) -> str:
    """Minimal SVG line chart; ``series`` maps a label to ``(xs, ys)``."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    pts = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if np.isfinite(y) and (not logy or y > 0)]
    left, right, top, bottom = 60, 110, 30, 45
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{_esc(title)}</text>']
    if pts:
        xs = [p[0] for p in pts]
        ys = [math.log10(p[1]) if logy else p[1] for p in pts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        if x1 == x0:
            x0, x1 = x0 - 1, x1 + 1
        if y1 == y0:
            y0, y1 = y0 - 1, y1 + 1
        pw, ph = width - left - right, height - top - bottom

        def sx(x):
            return left + (x - x0) / (x1 - x0) * pw

        def sy(y):
            return top + (1 - (y - y0) / (y1 - y0)) * ph

        out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
        for k in range(5):
            yv = y0 + (y1 - y0) * k / 4
            label = f"1e{yv:.1f}" if logy else f"{yv:.3g}"
            out.append(f'<text x="{left - 4}" y="{sy(yv) + 4:.1f}" text-anchor="end">{label}</text>')
            xv = x0 + (x1 - x0) * k / 4
            out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 14}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{_esc(xlabel)}</text>')
        out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {top + ph / 2:.1f})">{_esc(ylabel)}</text>')
        for k, (label, (sxs, sys_)) in enumerate(series.items()):
            color = colors[k % len(colors)]
            coords = [(sx(x), sy(math.log10(y) if logy else y)) for x, y in zip(sxs, sys_)
                      if np.isfinite(y) and (not logy or y > 0)]
            if coords:
                path = " ".join(f"{a:.1f},{b:.1f}" for a, b in coords)
                out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{path}"/>')
                for a, b in coords:
                    out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2.5" fill="{color}"/>')
            ly = top + 12 + 16 * k
            out.append(f'<line x1="{width - right + 10}" y1="{ly - 4}" x2="{width - right + 28}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{width - right + 32}" y="{ly}">{_esc(label)}</text>')
    else:
        out.append(f'<text x="{width / 2:.1f}" y="{height / 2:.1f}" text-anchor="middle">no data</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def sweep_charts(cfg: ExperimentConfig, done: list) -> dict:
    """Primary metric vs epsilon (one chart per p) and vs p (one per epsilon).

    Each point is the mean final metric at the selected step size.
    """
    groups, failed, _ = _group_finals(cfg, done)
    metric = primary_metric(cfg)
    best = _best_eta(groups, failed, metric)
    charts = {}

    def mean_of(alg, eps, p):
        return best[(alg, eps, p)][0] if (alg, eps, p) in best else math.nan

    ps = sorted({c.p for c, _ in done})
    epss = sorted({c.epsilon for c, _ in done})
    logy = metric == "opt_gap"
    if len(epss) > 1:
        for p in ps:
            series = {a: (epss, [mean_of(a, e, p) for e in epss]) for a in cfg.algorithms}
            charts[f"sweep_eps_p{p:g}.svg"] = svg_line_chart(series, f"{metric} vs epsilon (p={p:g})", "epsilon", metric, logy)
    if len(ps) > 1:
        for e in epss:
            series = {a: (ps, [mean_of(a, e, p) for p in ps]) for a in cfg.algorithms}
            charts[f"sweep_p_eps{e:g}.svg"] = svg_line_chart(series, f"{metric} vs p (epsilon={e:g})", "p", metric, logy)
    return charts
