"""Config parsing, experiment orchestration and the ``flue`` command line.

Config files are flat ``section.key = value`` lines; ``#`` starts a comment.
Documented keys and defaults (see :data:`DEFAULTS`)::

    problem.m = 150            problem.n_dim = 100     problem.nodes = 5
    problem.seed = 0           problem.scale = 0.1
    engine.form = general      engine.mixing = tee     engine.matrix_mode = fixed
    engine.pool_size = 4       engine.epsilon = auto   engine.iterations = 20000
    engine.init = zeros        engine.replicate = true
    schedule.kind = power      schedule.offset = 100   schedule.exponent = 0.75
    baseline.dgd = true
    output.trace_path = trace.csv   output.summary_path = summary.json
    output.record_every = 10
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path

import numpy as np

from .coding import build_cluster, build_cluster_pool
from .engine import RunConfig, RunResult, StepSchedule, cluster_encoding, run_dgd, run_flue, step_size
from .errors import FlueError, NonConvergent, ParseError, ValidationError
from .metrics import RateBoundInputs, bound_constants, concave_penalty
from .numerics import norm_2inf
from .problem import LeastSquaresProblem, generate_problem, optimum
from .rng import derive_seed
from .serialization import float_to_str, matrix_to_json, vector_to_json
from .spectral import (assemble_system, epsilon_bound, power_limit, product_limit_time_varying,
                       verify_eigenstructure, with_permuted_a_hat)

log = logging.getLogger("flue")

TRACE_HEADER = ("algo", "cycle", "slot", "ae", "ce", "f_gap", "alpha")

# (section, key) -> (type, default)
DEFAULTS = {
    ("problem", "m"): (int, 150),
    ("problem", "n_dim"): (int, 100),
    ("problem", "nodes"): (int, 5),
    ("problem", "seed"): (int, 0),
    ("problem", "scale"): (float, 0.1),
    ("engine", "form"): (str, "general"),
    ("engine", "mixing"): (str, "tee"),
    ("engine", "matrix_mode"): (str, "fixed"),
    ("engine", "pool_size"): (int, 4),
    ("engine", "epsilon"): ("eps", "auto"),
    ("engine", "iterations"): (int, 20000),
    ("engine", "init"): (str, "zeros"),
    ("engine", "replicate"): (bool, True),
    ("schedule", "kind"): (str, "power"),
    ("schedule", "offset"): (float, 100.0),
    ("schedule", "exponent"): (float, 0.75),
    ("baseline", "dgd"): (bool, True),
    ("output", "trace_path"): (str, "trace.csv"),
    ("output", "summary_path"): (str, "summary.json"),
    ("output", "record_every"): (int, 10),
}


@dataclass(frozen=True)
class ProblemConfig:
    m: int = 150
    n_dim: int = 100
    nodes: int = 5
    seed: int = 0
    scale: float = 0.1


@dataclass(frozen=True)
class OutputConfig:
    trace_path: str = "trace.csv"
    summary_path: str = "summary.json"
    record_every: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    engine: RunConfig = field(default_factory=RunConfig)
    schedule: StepSchedule = field(default_factory=StepSchedule)
    dgd: bool = True
    output: OutputConfig = field(default_factory=OutputConfig)

    def echo(self) -> dict:
        """Every effective setting as ``{"section.key": value}``."""
        values = {
            "problem": vars(self.problem),
            "engine": {k: getattr(self.engine, k) for s, k in DEFAULTS if s == "engine"},
            "schedule": {"kind": self.schedule.kind, "offset": self.schedule.offset,
                         "exponent": self.schedule.exponent},
            "baseline": {"dgd": self.dgd},
            "output": vars(self.output),
        }
        return {f"{s}.{k}": values[s][k] for s, k in DEFAULTS}

    def to_text(self) -> str:
        return "".join(f"{key} = {_format_value(v)}\n" for key, v in self.echo().items())

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "ExperimentConfig":
        echo = self.echo()
        if seed is not None:
            echo["problem.seed"] = seed
        if out_dir is not None:
            for key in ("output.trace_path", "output.summary_path"):
                echo[key] = str(Path(out_dir) / Path(echo[key]).name)
        return _build_config(echo)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return float_to_str(v)
    return str(v)


def _convert(kind, raw: str, key: str, line: int, col: int):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if kind == "eps":
            return "auto" if raw == "auto" else float(raw)
        return raw
    except ValueError:
        raise ParseError(f"{key}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}", line, col) from None


def _build_config(values: dict) -> ExperimentConfig:
    def sec(name):
        return {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(name + ".")}

    prob = ProblemConfig(**sec("problem"))
    if prob.nodes < 1 or not prob.m > prob.n_dim >= 1 or prob.nodes > prob.m:
        raise ValidationError("problem needs m > n_dim >= 1 and 1 <= nodes <= m")
    if not (np.isfinite(prob.scale) and prob.scale > 0):
        raise ValidationError("problem.scale must be positive")
    out = OutputConfig(**sec("output"))
    if out.record_every < 1:
        raise ValidationError("output.record_every must be >= 1")
    eng = sec("engine")
    engine = RunConfig(seed=prob.seed, record_every=out.record_every, **eng)
    sched = sec("schedule")
    schedule = StepSchedule(offset=sched["offset"], exponent=sched["exponent"], kind=sched["kind"])
    return ExperimentConfig(problem=prob, engine=engine, schedule=schedule,
                            dgd=sec("baseline")["dgd"], output=out)


def parse_config(text: str) -> ExperimentConfig:
    """Parse a flat ``section.key = value`` document; missing keys take their defaults."""
    values = {f"{s}.{k}": default for (s, k), (_, default) in DEFAULTS.items()}
    seen = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0]
        if not line.strip():
            continue
        if "=" not in line:
            col = len(line) - len(line.lstrip()) + 1
            raise ParseError("expected 'section.key = value'", lineno, col)
        lhs, rhs = line.split("=", 1)
        key = lhs.strip()
        key_col = len(lhs) - len(lhs.lstrip()) + 1
        value = rhs.strip()
        value_col = len(lhs) + 2 + (len(rhs) - len(rhs.lstrip()))
        if "." not in key:
            raise ParseError(f"key {key!r} has no section", lineno, key_col)
        section, name = key.split(".", 1)
        if (section, name) not in DEFAULTS:
            raise ParseError(f"unknown key {key!r}", lineno, key_col)
        if key in seen:
            raise ParseError(f"{key} already set on line {seen[key]}", lineno, key_col)
        if not value:
            raise ParseError(f"{key} has no value", lineno, value_col)
        seen[key] = lineno
        values[key] = _convert(DEFAULTS[(section, name)][0], value, key, lineno, value_col)
    return _build_config(values)


@dataclass
class RunSummary:
    final_ae: float
    final_ce: float
    final_f_gap: float
    iterations: int
    epsilon_used: float
    eps0: float
    wall_time_ms: int
    config_echo: dict
    versions: str
    dgd: dict | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        doc = {
            "final_ae": self.final_ae,
            "final_ce": self.final_ce,
            "final_f_gap": self.final_f_gap,
            "iterations": self.iterations,
            "epsilon_used": self.epsilon_used,
            "eps0": self.eps0,
            "metric_reduction": "max over nodes",
            "config_echo": self.config_echo,
            "versions": self.versions,
        }
        if self.dgd is not None:
            doc["dgd"] = self.dgd
        if include_timing:
            doc["wall_time_ms"] = self.wall_time_ms
        return doc


def artifact_version() -> str:
    try:
        return f"artifact {metadata.version('artifact')}"
    except metadata.PackageNotFoundError:
        from . import __version__
        return f"artifact {__version__}"


@dataclass
class Experiment:
    """Everything built for one configured run, before anything is iterated."""

    problem: LeastSquaresProblem
    clusters: list
    x_star: np.ndarray
    f_star: float
    eps0: float
    eps: float


def _cluster_eps0(cluster) -> float:
    sys_ = assemble_system(cluster.decoders, cluster.mixers)
    return epsilon_bound(sys_.q, cluster.n)


def prepare_experiment(cfg: ExperimentConfig) -> Experiment:
    """Draw the problem and matrices from labelled streams and resolve epsilon."""
    pc = cfg.problem
    problem = generate_problem(pc.m, pc.n_dim, pc.nodes, derive_seed(pc.seed, "problem"), scale=pc.scale)
    mat_seed = derive_seed(pc.seed, "matrices")
    if cfg.engine.matrix_mode == "random_pool":
        clusters = build_cluster_pool(pc.nodes, mat_seed, cfg.engine.pool_size, replicate=cfg.engine.replicate)
    else:
        clusters = [build_cluster(pc.nodes, mat_seed, replicate=cfg.engine.replicate)]
    eps0 = min(_cluster_eps0(c) for c in clusters)
    if cfg.engine.form == "special":
        eps = 0.0
    elif cfg.engine.epsilon == "auto":
        eps = eps0 / 2.0
    else:
        eps = float(cfg.engine.epsilon)
    if eps >= eps0 and cfg.engine.form == "general":
        log.warning("epsilon %.3e is not below the proven bound %.3e", eps, eps0)
    x_star, f_star = optimum(problem)
    return Experiment(problem=problem, clusters=clusters, x_star=x_star, f_star=f_star, eps0=eps0, eps=eps)


def _fmt(v) -> str:
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def write_trace(path, runs) -> None:
    """Write the runs' records; rows of the same cycle sit next to each other."""
    rows = []
    for order, run in enumerate(runs):
        for i, r in enumerate(run.records):
            rows.append(((i, order), (run.algo, r.cycle, r.slot, r.ae, r.ce, r.f_gap, r.alpha)))
    rows.sort(key=lambda item: item[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for _, row in rows:
            w.writerow([_fmt(v) for v in row])


def _final_metrics(run: RunResult) -> dict:
    r = run.final
    return {"final_ae": r.ae, "final_ce": r.ce, "final_f_gap": r.f_gap}


def execute(cfg: ExperimentConfig, exp: Experiment | None = None) -> tuple[Experiment, RunResult, RunResult | None]:
    """Run FLUE (and DGD when enabled) without writing anything."""
    exp = prepare_experiment(cfg) if exp is None else exp
    flue = run_flue(exp.clusters, exp.problem, cfg.schedule, cfg.engine, exp.eps, f_star=exp.f_star,
                    x_star=exp.x_star)
    dgd = None
    if cfg.dgd:
        dgd = run_dgd(exp.problem, cfg.schedule, cfg.engine.iterations, cfg.output.record_every,
                      f_star=exp.f_star, x_star=exp.x_star)
    return exp, flue, dgd


CONSENSUS_CE = 1e-6


@dataclass
class RateBoundCheck:
    """Bound and observed optimality gap at every recorded cycle ``K >= 1``."""

    inputs: RateBoundInputs
    has_concave: bool
    k_consensus: int
    cycles: np.ndarray
    bound: np.ndarray
    observed: np.ndarray

    @property
    def dominates(self) -> bool:
        return bool(np.all(self.bound >= self.observed))


def rate_bound_inputs(exp: Experiment, flue: RunResult, dist_final: float = 0.0) -> RateBoundInputs:
    """Constants of the gap bound measured on a finished fixed-matrix run."""
    cluster = exp.clusters[0]
    sys_ = assemble_system(cluster.decoders, cluster.mixers, exp.eps)
    lim = power_limit(sys_)
    h = sys_.block
    rows = [r for d in cluster.decoders for r in d.plus_rows + d.minus_rows]
    omega = min((r.weight for r in rows), default=1.0)
    dim = exp.problem.n_dim
    z0 = np.concatenate([flue.initial_x.reshape(-1, dim), flue.initial_y.reshape(-1, dim)])
    x0_mean = flue.initial_x.mean(axis=(0, 1))
    # an exactly reached limit fits no rate; any gamma in (0, 1) is then valid
    gamma = lim.gamma_fit if lim.gamma_fit > 0 else np.finfo(float).eps
    return RateBoundInputs(
        omega=float(omega), p_norm=norm_2inf(lim.p[:h, :h]), a_norm=norm_2inf(sys_.a_hat),
        b_norm=norm_2inf(cluster_encoding(cluster)), f_bound=flue.grad_norm_max, gamma=float(gamma),
        Gamma=float(lim.Gamma_fit), z0_norm_sum=float(np.sum(np.linalg.norm(z0, axis=1))),
        dist0=float(np.linalg.norm(x0_mean - exp.x_star)), radius=flue.radius, n=cluster.n,
        dist_final=float(dist_final))


def check_rate_bound(exp: Experiment, flue: RunResult, schedule: StepSchedule) -> RateBoundCheck:
    """Evaluate the gap bound at each recorded cycle against the best gap seen so far.

    The subtracted final-distance term uses the node average's distance to the
    minimizer at the cycle the bound is evaluated for.
    """
    recs = flue.records
    cycles = np.array([r.cycle for r in recs])
    f_min = np.minimum.accumulate(np.array([r.f_gap for r in recs]))
    ces = np.array([r.ce for r in recs])
    # first recorded cycle from which consensus error stays below the threshold
    above = np.flatnonzero(ces > CONSENSUS_CE)
    if above.size == 0:
        k_consensus = 0
    elif above[-1] + 1 < len(cycles):
        k_consensus = int(cycles[above[-1] + 1])
    else:
        k_consensus = int(cycles[-1])
    has_concave = any(d.has_negative() for d in exp.clusters[0].decoders)
    base = rate_bound_inputs(exp, flue)
    alphas = np.array([step_size(schedule, k) for k in range(int(cycles[-1]) + 1)])
    csum, csq = np.cumsum(alphas), np.cumsum(alphas ** 2)
    penalty = concave_penalty(base, schedule, k_consensus) if has_concave else 0.0
    keep = cycles >= 1
    bounds = []
    for K, dist in zip(cycles[keep], np.asarray(flue.dist_star)[keep]):
        inp = replace(base, dist_final=float(dist))
        a_star, b_star = bound_constants(inp)
        s1, s2 = csum[K], csq[K]
        bounds.append(a_star / (inp.omega * s1) + b_star * s2 / (inp.omega * s1) + penalty)
    return RateBoundCheck(inputs=base, has_concave=has_concave, k_consensus=k_consensus,
                          cycles=cycles[keep], bound=np.array(bounds), observed=f_min[keep])


def run_experiment(cfg: ExperimentConfig) -> RunSummary:
    """Build, run, and write the trace CSV and summary JSON for one configuration."""
    start = time.perf_counter()
    exp, flue, dgd = execute(cfg)
    runs = [flue] + ([dgd] if dgd is not None else [])
    for path in (cfg.output.trace_path, cfg.output.summary_path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_trace(cfg.output.trace_path, runs)
    wall_ms = int(round((time.perf_counter() - start) * 1000))
    m = _final_metrics(flue)
    summary = RunSummary(iterations=cfg.engine.iterations, epsilon_used=exp.eps, eps0=exp.eps0,
                         wall_time_ms=wall_ms, config_echo=cfg.echo(), versions=artifact_version(),
                         dgd=_final_metrics(dgd) if dgd is not None else None, **m)
    with open(cfg.output.summary_path, "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("run finished in %d ms: ae=%.3e ce=%.3e", wall_ms, summary.final_ae, summary.final_ce)
    return summary


def _system_for(cluster, eps):
    return assemble_system(cluster.decoders, cluster.mixers, eps)


def verify_spectral(n: int, seed: int, eps_fraction: float, pool_size: int = 4, draws: int = 400,
                    poison_pool: bool = False) -> dict:
    """Eigenstructure, power-limit and time-varying checks on one seeded cluster.

    ``poison_pool`` replaces every pool member's estimate mixing by a cyclic
    shift, a negative control that must fail.
    """
    if n not in (1, 2, 3):
        raise ValidationError("verify-spectral runs at desk scale: n must be 1, 2 or 3")
    if not 0.0 <= eps_fraction < 1.0:
        raise ValidationError("eps_fraction must lie in [0, 1)")
    pool = build_cluster_pool(n, derive_seed(seed, "matrices"), pool_size)
    base = _system_for(pool[0], 0.0)
    eps0 = epsilon_bound(base.q, n)
    eps = eps_fraction * eps0
    sys_ = base.with_eps(eps)
    report = {"n": n, "seed": seed, "eps": eps, "eps0": eps0, "checks": {}}
    eig = verify_eigenstructure(sys_)
    report["eigenstructure"] = eig.to_dict()
    report["checks"]["eigenstructure"] = eig.passed
    lim = power_limit(sys_)
    report["power_limit"] = lim.to_dict()
    report["checks"]["power_limit_consensus"] = lim.top_block_row_spread <= 1e-8 and lim.gamma_fit < 1.0
    report["checks"]["power_limit_top_right"] = lim.top_right_max <= 1e-8
    systems = [_system_for(c, eps) for c in pool]
    if poison_pool:
        systems = [with_permuted_a_hat(s) for s in systems]
    try:
        tv = product_limit_time_varying(systems, draws, derive_seed(seed, "draws"))
        report["time_varying"] = tv.to_dict()
        report["checks"]["time_varying"] = tv.passed
    except NonConvergent as exc:
        report["time_varying"] = {"error": "NonConvergent", "message": str(exc)}
        report["checks"]["time_varying"] = False
    report["failed"] = [k for k, ok in report["checks"].items() if not ok]
    report["passed"] = not report["failed"]
    return report


def verify_spectral_cmd(n: int, seed, eps_fraction: float, poison_pool: bool = False, out=None) -> int:
    report = verify_spectral(n, seed, eps_fraction, poison_pool=poison_pool)
    print(json.dumps(report, indent=2, sort_keys=True, default=_json_default), file=out or sys.stdout)
    if not report["passed"]:
        print(f"failed checks: {', '.join(report['failed'])}", file=sys.stderr)
        return 1
    return 0


def _json_default(v):
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    raise TypeError(f"not serializable: {type(v).__name__}")


def matrices_document(n: int, p: int, seed: int) -> dict:
    cluster = build_cluster(n, derive_seed(seed, "matrices"), p=p)

    def rows_doc(rows):
        return [{"slot": r.slot, "coefficients": vector_to_json(r.a), "weight": float_to_str(r.weight),
                 "gamma": float_to_str(r.gamma), "support": [int(s) for s in r.support]} for r in rows]

    return {
        "n": n,
        "p": p,
        "seed": seed,
        "encoding": None if cluster.encoding is None else matrix_to_json(cluster.encoding.b),
        "gammas": vector_to_json(cluster.gammas),
        "decoders": [{"node": d.node_id, "stacked": matrix_to_json(d.stacked), "replicated": d.replicated,
                      "plus_rows": rows_doc(d.plus_rows), "minus_rows": rows_doc(d.minus_rows)}
                     for d in cluster.decoders],
        "mixers": [{"node": mx.node_id, "d_plus": matrix_to_json(mx.d_plus), "d_minus": matrix_to_json(mx.d_minus)}
                   for mx in cluster.mixers],
        "a_norm": float_to_str(max(norm_2inf(d.stacked) for d in cluster.decoders)),
    }


def _configure_logging() -> None:
    level = os.environ.get("FLUE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ValidationError(f"FLUE_LOG must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flue", description="Coded federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one configured experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    ver = sub.add_parser("verify-spectral", help="check the spectral properties of a seeded system")
    ver.add_argument("--n", type=int, required=True)
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--eps-fraction", type=float, default=0.5)
    ver.add_argument("--poison-pool", action="store_true", help=argparse.SUPPRESS)
    gen = sub.add_parser("gen-matrices", help="write a seeded cluster's matrices as JSON")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--p", type=int)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        if args.command == "run":
            cfg = parse_config(Path(args.config).read_text())
            cfg = cfg.with_overrides(seed=args.seed, out_dir=args.out)
            summary = run_experiment(cfg)
            print(json.dumps(summary.to_dict(include_timing=True), indent=2, sort_keys=True))
            return 0
        if args.command == "verify-spectral":
            return verify_spectral_cmd(args.n, args.seed, args.eps_fraction, poison_pool=args.poison_pool)
        doc = matrices_document(args.n, args.p if args.p is not None else args.n, args.seed)
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return 0
    except (FlueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
