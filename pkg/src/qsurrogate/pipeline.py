"""Crossing-tolerance selection, benchmark runs and report tables."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from pathlib import Path

import numpy as np

from . import milp
from .datagen import Dataset, generate
from .embed import SurrogateSpec, build_surrogate
from .errors import AllCandidatesFailed, ConfigError, InfeasibleSecondStage, KindMismatch
from .milp import SolveLimits
from .parallel import pmap
from .problems import ScenarioSet, TwoStageProblem, make_problem
from .qnn import QuantileNetwork, TrainConfig, hyperparameter_search, train
from .saa import RiskSpec, evaluate_fixed_x, solve_saa

log = logging.getLogger(__name__)

DEFAULT_DELTAS = (0.0, 10.0, 50.0, 100.0, 500.0, None)
METHODS = ("qnn", "iqnn", "saa")


def delta_label(delta) -> str:
    return "unconstrained" if delta is None else f"{delta:g}"


def parse_delta(text):
    text = str(text).strip().lower()
    if text in ("none", "inf", "unconstrained", "no-constraint"):
        return None
    value = float(text)
    if math.isinf(value):
        return None
    return value


def _delta_key(delta):
    return math.inf if delta is None else float(delta)


def risk_for(spec: SurrogateSpec) -> RiskSpec | None:
    return RiskSpec(spec.lam, spec.alpha) if spec.lam > 0 else None


def _better(a: float, b: float, minimize: bool) -> bool:
    return a < b if minimize else a > b


# -- crossing tolerance selection ------------------------------------------------

@dataclass
class DeltaCandidate:
    delta: float | None
    objective: float
    status: str
    x: list | None = None
    solve_time: float = math.nan
    nodes: int | None = None
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in (milp.Status.OPTIMAL.value, milp.Status.FEASIBLE_LIMIT.value)


@dataclass
class DeltaSelectionResult:
    candidates: list
    chosen: float | None
    chosen_x: np.ndarray
    eval_scenarios_seed: int | None

    def to_dict(self):
        d = asdict(self)
        d["chosen_x"] = np.asarray(self.chosen_x).tolist()
        return d


def _try_candidate(problem, net, spec, eval_scenarios, limits, backend, delta) -> DeltaCandidate:
    sur = build_surrogate(problem, net, spec.with_delta(delta))
    try:
        sol = sur.solve(limits, backend)
    except milp.SolverError as exc:
        return DeltaCandidate(delta, math.nan, "failed", message=str(exc))
    try:
        ev = evaluate_fixed_x(problem, sol.x, eval_scenarios, risk_for(spec), backend=backend)
    except (InfeasibleSecondStage, ValueError) as exc:
        return DeltaCandidate(delta, math.nan, "failed", sol.x.tolist(), sol.solve_time, sol.nodes, str(exc))
    return DeltaCandidate(delta, ev.total, sol.status.value, sol.x.tolist(), sol.solve_time, sol.nodes)


def evaluate_candidates(problem, net, spec, candidates, eval_scenarios, limits=None,
                        backend=None, workers=1) -> list[DeltaCandidate]:
    if net.kind != "qnn":
        raise KindMismatch("crossing tolerance only applies to qnn networks")
    fn = partial(_try_candidate, problem, net, spec, eval_scenarios, limits, backend)
    return pmap(fn, list(candidates), workers)


def select_delta(problem: TwoStageProblem, net: QuantileNetwork, spec: SurrogateSpec | None = None,
                 candidates=DEFAULT_DELTAS, eval_scenarios: ScenarioSet | None = None, seed: int = 0,
                 eval_size: int = 50, limits: SolveLimits | None = None, backend=None,
                 workers: int = 1) -> DeltaSelectionResult:
    """Solve one surrogate per tolerance, evaluate each decision, keep the best.

    Ties are broken towards the smallest tolerance so the result does not
    depend on the order of ``candidates``.
    """
    spec = spec or SurrogateSpec()
    if not candidates:
        raise ValueError("need at least one candidate")
    if eval_scenarios is None:
        eval_scenarios = problem.sample_scenarios(eval_size, seed)
    results = evaluate_candidates(problem, net, spec, candidates, eval_scenarios, limits, backend, workers)
    ok = [c for c in results if c.ok]
    if not ok:
        raise AllCandidatesFailed("no crossing tolerance produced a solvable surrogate: "
                                  + "; ".join(f"{delta_label(c.delta)}: {c.message}" for c in results))
    best = None
    for c in sorted(ok, key=lambda c: _delta_key(c.delta)):
        if best is None or _better(c.objective, best.objective, problem.minimize):
            best = c
    return DeltaSelectionResult(results, best.delta, np.asarray(best.x), eval_scenarios.seed)


@dataclass
class SensitivityRow:
    delta: float | None
    true_objective: float
    scaled_objective: float
    solve_time: float
    nodes: int | None
    status: str


def scaled_objectives(values, minimize: bool):
    """``1 + relative shortfall`` against the best value (exactly 1.0 at the best).

    For positive minimisation objectives this is ``value / best``.
    """
    values = np.asarray(values, dtype=float)
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return np.full(values.shape, math.nan)
    best = finite.min() if minimize else finite.max()
    denom = abs(best) if best != 0 else 1.0
    gap = (values - best) if minimize else (best - values)
    out = 1.0 + gap / denom
    out[values == best] = 1.0
    return out


def delta_sensitivity(problem, net, deltas=DEFAULT_DELTAS, eval_scenarios=None, spec=None,
                      seed: int = 0, eval_size: int = 50, limits=None, backend=None,
                      workers: int = 1) -> list[SensitivityRow]:
    spec = spec or SurrogateSpec()
    if eval_scenarios is None:
        eval_scenarios = problem.sample_scenarios(eval_size, seed)
    results = evaluate_candidates(problem, net, spec, deltas, eval_scenarios, limits, backend, workers)
    scaled = scaled_objectives([c.objective for c in results], problem.minimize)
    return [SensitivityRow(c.delta, c.objective, float(s), c.solve_time, c.nodes, c.status)
            for c, s in zip(results, scaled)]


# -- benchmarks ------------------------------------------------------------------

@dataclass
class BenchmarkConfig:
    problem: str = "cflp-5-5"
    instance_seed: int = 0
    instance_file: str | None = None
    methods: tuple = METHODS
    lambdas: tuple = (0.0,)
    alphas: tuple = (0.9,)
    n_samples: int = 2000
    data_seed: int = 0
    trials: int = 1
    train: dict = field(default_factory=dict)
    deltas: tuple = DEFAULT_DELTAS
    selection_size: int = 50
    selection_seed: int = 5000
    saa_scenarios: int = 50
    saa_seed: int = 1
    eval_set_sizes: tuple = (200,)
    eval_set_count: int = 10
    eval_seed: int = 10_000
    time_limit: float = 600.0
    gap_tol: float = 1e-4
    solver: str | None = None
    workers: int = 1

    def __post_init__(self):
        self.methods = tuple(self.methods)
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.alphas = tuple(float(v) for v in self.alphas)
        self.eval_set_sizes = tuple(int(v) for v in self.eval_set_sizes)
        self.deltas = tuple(None if d is None else parse_delta(d) for d in self.deltas)
        unknown = set(self.train) - {f.name for f in fields(TrainConfig)}
        if unknown:
            raise ConfigError(f"unknown training settings {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown benchmark settings {sorted(unknown)}")
        return cls(**d)

    @property
    def limits(self) -> SolveLimits:
        return SolveLimits(self.time_limit, self.gap_tol)

    def make_problem(self) -> TwoStageProblem:
        if self.instance_file:
            from .problems import load_instance
            return load_instance(self.instance_file)
        return make_problem(self.problem, self.instance_seed)


@dataclass
class BenchmarkRow:
    problem: str
    method: str
    lam: float
    alpha: float
    eval_set_size: int
    eval_set_count: int
    mean_true_objective: float
    std: float
    relative_gap_vs_saa: float
    build_time: float
    solve_time: float
    train_time: float = 0.0
    delta: str = ""
    first_stage: str = ""
    dataset_hash: str = ""


def relative_gap(value: float, reference: float) -> float:
    """``(value - reference) / |reference|``; exactly 0 when they coincide."""
    if value == reference:
        return 0.0
    return (value - reference) / abs(reference) if reference != 0 else math.inf


def eval_sets(problem, size: int, count: int, base_seed: int) -> list[ScenarioSet]:
    return [problem.sample_scenarios(size, base_seed + size * 1000 + k) for k in range(count)]


def evaluate_on_sets(problem, x, sets, risk, workers=1, backend=None):
    totals = [evaluate_fixed_x(problem, x, s, risk, workers, backend).total for s in sets]
    return float(np.mean(totals)), float(np.std(totals, ddof=1)) if len(totals) > 1 else 0.0


@dataclass
class TrainedModels:
    dataset: Dataset | None
    networks: dict
    train_time: dict

    @property
    def dataset_hash(self) -> str:
        return self.dataset.content_hash() if self.dataset is not None else ""


def train_models(problem, cfg: BenchmarkConfig, backend=None) -> TrainedModels:
    kinds = [m for m in cfg.methods if m != "saa"]
    if not kinds:
        return TrainedModels(None, {}, {})
    ds = generate(problem, cfg.n_samples, cfg.data_seed, cfg.workers, backend)
    nets, times = {}, {}
    for kind in kinds:
        t0 = time.perf_counter()
        if cfg.trials > 1:
            res = hyperparameter_search(ds, kind, cfg.trials, cfg.data_seed,
                                        workers=cfg.workers, **cfg.train)
            nets[kind] = res.network
        else:
            nets[kind] = train(ds, kind, TrainConfig(**{"seed": cfg.data_seed, **cfg.train}))[0]
        times[kind] = time.perf_counter() - t0
    return TrainedModels(ds, nets, times)


def _write_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(BenchmarkRow)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


def run_benchmark(cfg: BenchmarkConfig, out_dir=None, models: TrainedModels | None = None,
                  backend=None) -> list[BenchmarkRow]:
    """Solve every configured method for every (lambda, alpha) and evaluate out of sample.

    Surrogate networks are trained once and reused for all risk settings.  If
    ``out_dir`` is given, ``benchmark.csv`` is rewritten after every row so a
    failure leaves the finished rows on disk.
    """
    backend = backend if backend is not None else cfg.solver
    problem = cfg.make_problem()
    models = models or train_models(problem, cfg, backend)
    ds_hash = models.dataset_hash
    csv_path = Path(out_dir) / "benchmark.csv" if out_dir else None
    rows: list[BenchmarkRow] = []

    def emit(row):
        rows.append(row)
        if csv_path is not None:
            _write_csv(rows, csv_path)

    sets_by_size = {n: eval_sets(problem, n, cfg.eval_set_count, cfg.eval_seed) for n in cfg.eval_set_sizes}
    selection = problem.sample_scenarios(cfg.selection_size, cfg.selection_seed)
    saa_scen = problem.sample_scenarios(cfg.saa_scenarios, cfg.saa_seed)
    for lam in cfg.lambdas:
        for alpha in cfg.alphas:
            risk = RiskSpec(lam, alpha) if lam > 0 else None
            spec = SurrogateSpec(lam=lam, alpha=alpha)
            solutions = {}
            for method in cfg.methods:
                delta = ""
                if method == "saa":
                    sol = solve_saa(problem, saa_scen, risk, cfg.limits, backend)
                    solutions[method] = (sol.x, sol.build_time, sol.solve_time, 0.0, delta)
                    continue
                net = models.networks[method]
                if models.dataset is not None and models.dataset.content_hash() != ds_hash:
                    raise RuntimeError("training data changed between benchmark rows")
                if method == "qnn":
                    sel = select_delta(problem, net, spec, cfg.deltas, selection, cfg.selection_seed,
                                       limits=cfg.limits, backend=backend, workers=cfg.workers)
                    spec_m = spec.with_delta(sel.chosen)
                    delta = delta_label(sel.chosen)
                else:
                    spec_m = spec
                sur = build_surrogate(problem, net, spec_m)
                s = sur.solve(cfg.limits, backend)
                solutions[method] = (s.x, sur.build_time, s.solve_time,
                                     models.train_time.get(method, 0.0), delta)
            for size, sets in sets_by_size.items():
                evaluated = {m: evaluate_on_sets(problem, sol[0], sets, risk, cfg.workers, backend)
                             for m, sol in solutions.items()}
                ref = evaluated["saa"][0] if "saa" in evaluated else math.nan
                for method in cfg.methods:
                    x, bt, st, tt, delta = solutions[method]
                    mean, std = evaluated[method]
                    gap = relative_gap(mean, ref) if "saa" in evaluated else math.nan
                    emit(BenchmarkRow(problem.name, method, lam, alpha, size, len(sets), mean, std, gap,
                                      bt, st, tt, delta, json.dumps(np.asarray(x).tolist()),
                                      ds_hash if method != "saa" else ""))
    return rows


def write_benchmark_csv(rows, path) -> None:
    _write_csv(rows, path)


def write_sensitivity_csv(rows: list[SensitivityRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "true_objective", "scaled_objective", "solve_time", "nodes", "status"])
        for r in rows:
            w.writerow([delta_label(r.delta), repr(r.true_objective), repr(r.scaled_objective),
                        f"{r.solve_time:.4f}", "" if r.nodes is None else r.nodes, r.status])


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "-"
        return f"{v:.4g}" if abs(v) < 1e-2 or abs(v) >= 1e5 else f"{v:.4f}".rstrip("0").rstrip(".")
    return str(v)


def markdown_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def benchmark_markdown(rows: list[BenchmarkRow]) -> str:
    header = ["problem", "method", "lambda", "alpha", "eval", "mean", "std", "gap vs saa", "solve s"]
    body = [[r.problem, r.method, r.lam, r.alpha, f"{r.eval_set_count}x{r.eval_set_size}",
             r.mean_true_objective, r.std,
             "-" if math.isnan(r.relative_gap_vs_saa) else f"{100 * r.relative_gap_vs_saa:.2f}%",
             r.solve_time] for r in rows]
    return markdown_table(header, body)


def sensitivity_markdown(rows: list[SensitivityRow]) -> str:
    header = ["delta", "true obj.", "scaled", "solve s", "nodes", "status"]
    body = [[delta_label(r.delta), r.true_objective, f"{r.scaled_objective:.2f}", r.solve_time,
             "-" if r.nodes is None else r.nodes, r.status] for r in rows]
    return markdown_table(header, body)
