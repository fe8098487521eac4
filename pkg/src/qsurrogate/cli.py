"""Command-line entry point: ``qsurrogate <command> [flags]``.

Settings can also come from a JSON file (``--config``) whose keys are the
flag names with dashes replaced by underscores; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import milp, pipeline
from .datagen import generate, load_dataset, save_dataset
from .embed import SurrogateSpec, build_surrogate
from .errors import ConfigError, DimensionMismatch, QSurrogateError
from .problems import ScenarioSet, load_instance, make_problem, save_instance
from .qnn import TrainConfig, hyperparameter_search, load_network, save_network, train
from .saa import RiskSpec, evaluate_fixed_x, solve_saa

log = logging.getLogger("qsurrogate")


def _csv_floats(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _csv_deltas(text):
    return [pipeline.parse_delta(t) for t in str(text).split(",") if t.strip()]


def _csv_words(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _csv_ints(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


# -- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="master random seed (default: %(default)s)")
    g.add_argument("--workers", type=int, default=1, help="worker processes (default: %(default)s)")
    g.add_argument("--solver", default=None,
                   help="MILP backend: highs or enumerate (default: $QSURROGATE_SOLVER, else highs)")
    g.add_argument("--time-limit", type=float, default=600.0,
                   help="per-solve time limit in seconds (default: %(default)s)")
    g.add_argument("--gap", type=float, default=1e-4, help="relative MIP gap (default: %(default)s)")
    g.add_argument("--out-dir", default=".", help="directory for outputs (default: %(default)s)")
    g.add_argument("--config", default=None, help="JSON file with default values for these flags")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _problem_args(p):
    p.add_argument("--problem", default=None,
                   help="problem name: cflp-N-M or investment (or use --instance-file)")
    p.add_argument("--instance-seed", type=int, default=0,
                   help="seed of the generated instance data (default: %(default)s)")
    p.add_argument("--instance-file", default=None, help="JSON instance written by --save-instance")


def _risk_args(p):
    p.add_argument("--lam", type=float, default=0.0, help="risk weight lambda (default: %(default)s)")
    p.add_argument("--alpha", type=float, default=0.9, help="CVaR level alpha (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsurrogate",
                                     description="Quantile-network surrogates for two-stage stochastic programs.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = argparse.ArgumentParser(add_help=False)
    _common(common)

    p = sub.add_parser("gen-data", parents=[common], help="sample first-stage points and solve their recourse problems")
    _problem_args(p)
    p.add_argument("--samples", type=int, default=1000, help="number of samples (default: %(default)s)")
    p.add_argument("--out", default=None, help="dataset CSV path (default: OUT_DIR/data.csv)")
    p.add_argument("--save-instance", default=None, help="also write the instance as JSON here")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="fit a quantile network to a dataset")
    p.add_argument("--data", required=False, default=None, help="dataset CSV written by gen-data")
    p.add_argument("--kind", choices=("qnn", "iqnn"), default="iqnn", help="network head (default: %(default)s)")
    p.add_argument("--trials", type=int, default=1,
                   help="random-search trials; 1 trains the fixed configuration (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=300, help="maximum epochs (default: %(default)s)")
    p.add_argument("--hidden-width", type=int, default=64, help="hidden neurons when trials=1 (default: %(default)s)")
    p.add_argument("--learning-rate", type=float, default=1e-3, help="step size when trials=1 (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=128, help="minibatch size when trials=1 (default: %(default)s)")
    p.add_argument("--optimizer", choices=("adam", "adagrad", "rmsprop"), default="adam",
                   help="update rule when trials=1 (default: %(default)s)")
    p.add_argument("--patience", type=int, default=30, help="early-stopping patience (default: %(default)s)")
    p.add_argument("--n-quantiles", type=int, default=50, help="quantile levels on 0.01..0.99 (default: %(default)s)")
    p.add_argument("--out", default=None, help="network JSON path (default: OUT_DIR/model.json)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", parents=[common], help="solve the surrogate (or SAA) problem")
    _problem_args(p)
    p.add_argument("--model", default=None, help="network JSON; omit with --method saa")
    p.add_argument("--method", choices=("surrogate", "saa"), default="surrogate",
                   help="surrogate MILP or SAA extensive form (default: %(default)s)")
    p.add_argument("--scenarios", type=int, default=50, help="SAA scenario count (default: %(default)s)")
    _risk_args(p)
    p.add_argument("--delta", default="unconstrained",
                   help="crossing tolerance for qnn networks (default: %(default)s)")
    p.add_argument("--dump-lp", default=None, help="write the model in LP format to this path")
    p.add_argument("--out", default=None, help="solution JSON path (default: OUT_DIR/solution.json)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", parents=[common], help="true objective of a fixed first-stage decision")
    _problem_args(p)
    p.add_argument("--x", default=None, help="comma-separated first-stage decision")
    p.add_argument("--solution", default=None, help="solution JSON written by solve")
    p.add_argument("--scenarios", type=int, default=200, help="sampled scenario count (default: %(default)s)")
    p.add_argument("--scenario-file", default=None,
                   help='JSON {"xi": [[...], ...], "weights": [...]} instead of sampling')
    _risk_args(p)
    p.add_argument("--out", default=None, help="write the decomposition JSON here as well")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("select-delta", cmd_select_delta, "pick the qnn crossing tolerance"),
                                 ("delta-sensitivity", cmd_delta_sensitivity,
                                  "true objective per crossing tolerance")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        _problem_args(p)
        p.add_argument("--model", default=None, help="qnn network JSON")
        p.add_argument("--deltas", default="0,10,50,100,500,unconstrained",
                       help="comma-separated candidates (default: %(default)s)")
        p.add_argument("--eval-size", type=int, default=50,
                       help="evaluation scenario count (default: %(default)s)")
        _risk_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("benchmark", parents=[common], help="surrogates versus SAA on fresh scenario sets")
    _problem_args(p)
    p.add_argument("--methods", default="qnn,iqnn,saa", help="comma-separated methods (default: %(default)s)")
    p.add_argument("--lambdas", default="0", help="comma-separated lambda values (default: %(default)s)")
    p.add_argument("--alphas", default="0.9", help="comma-separated alpha values (default: %(default)s)")
    p.add_argument("--samples", type=int, default=2000, help="training samples (default: %(default)s)")
    p.add_argument("--trials", type=int, default=1, help="random-search trials per kind (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=300, help="maximum epochs (default: %(default)s)")
    p.add_argument("--deltas", default="0,10,50,100,500,unconstrained",
                   help="qnn crossing tolerance candidates (default: %(default)s)")
    p.add_argument("--saa-scenarios", type=int, default=50, help="SAA scenario count (default: %(default)s)")
    p.add_argument("--eval-sizes", default="200", help="comma-separated evaluation set sizes (default: %(default)s)")
    p.add_argument("--eval-count", type=int, default=10, help="evaluation sets per size (default: %(default)s)")
    p.set_defaults(func=cmd_benchmark)
    return parser


def _all_subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def _apply_config(parser, argv):
    """Install JSON config values as parser defaults so explicit flags still win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {known.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    command = next((a for a in argv if a in _all_subparsers(parser)), None)
    sp = _all_subparsers(parser).get(command)
    if sp is None:
        return
    dests = {a.dest for a in sp._actions} - {"help", "config", "func"}
    unknown = set(cfg) - dests
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    sp.set_defaults(**{k: (",".join(map(str, v)) if isinstance(v, list) else v) for k, v in cfg.items()})


# -- helpers ---------------------------------------------------------------------

class _UsageError(Exception):
    pass


def _problem(args):
    if args.instance_file:
        return load_instance(args.instance_file)
    if not args.problem:
        raise _UsageError("one of --problem or --instance-file is required")
    return make_problem(args.problem, args.instance_seed)


def _out(args, name, explicit=None):
    path = Path(explicit) if explicit else Path(args.out_dir) / name
    if not explicit:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _limits(args):
    return milp.SolveLimits(args.time_limit, args.gap)


def _print_json(obj):
    print(json.dumps(obj, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"{type(o).__name__} is not JSON serialisable")


def _load_net_for(problem, path, expected_kind=None):
    if not path:
        raise _UsageError("--model is required")
    net = load_network(path, expected_kind)
    if net.n_inputs != problem.n_first:
        raise DimensionMismatch(f"dimension mismatch: network {path} takes {net.n_inputs} inputs "
                                f"but {problem.name} has {problem.n_first} first-stage variables")
    return net


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args):
    problem = _problem(args)
    out = _out(args, "data.csv", args.out)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"output directory {out.parent} does not exist")
    t0 = time.perf_counter()
    ds = generate(problem, args.samples, args.seed, args.workers, args.solver)
    save_dataset(ds, out)
    if args.save_instance:
        save_instance(problem, args.save_instance)
    print(f"wrote {len(ds)} rows to {out} in {time.perf_counter() - t0:.2f} s")
    return 0


def cmd_train(args):
    if not args.data:
        raise _UsageError("--data is required")
    ds = load_dataset(args.data)
    out = _out(args, "model.json", args.out)
    t0 = time.perf_counter()
    overrides = {"patience": args.patience, "n_quantiles": args.n_quantiles}
    if args.trials > 1:
        res = hyperparameter_search(ds, args.kind, args.trials, args.seed, args.epochs, args.workers,
                                    **overrides)
        net, report = res.network, res.report
    else:
        cfg = TrainConfig(batch_size=args.batch_size, learning_rate=args.learning_rate,
                          optimizer=args.optimizer, epochs=args.epochs, hidden_width=args.hidden_width,
                          seed=args.seed, **overrides)
        net, report = train(ds, args.kind, cfg)
    save_network(net, out)
    print(f"trained {args.kind} in {time.perf_counter() - t0:.2f} s; "
          f"validation loss {report.final_validation_loss:.6g} (epoch {report.best_epoch}); wrote {out}")
    return 0


def cmd_solve(args):
    problem = _problem(args)
    limits = _limits(args)
    t0 = time.perf_counter()
    if args.method == "saa":
        risk = RiskSpec(args.lam, args.alpha) if args.lam > 0 else None
        sol = solve_saa(problem, problem.sample_scenarios(args.scenarios, args.seed), risk, limits, args.solver)
        result = {"method": "saa", "x": sol.x, "objective": sol.objective, "status": sol.status.value,
                  "gap": sol.gap, "build_time": sol.build_time, "solve_time": sol.solve_time}
    else:
        net = _load_net_for(problem, args.model)
        spec = SurrogateSpec(args.lam, args.alpha, pipeline.parse_delta(args.delta))
        sur = build_surrogate(problem, net, spec)
        sol = sur.solve(limits, args.solver, args.dump_lp)
        result = {"method": net.kind, "x": sol.x, "objective": sol.objective, "status": sol.status.value,
                  "gap": sol.gap, "build_time": sol.build_time, "solve_time": sol.solve_time,
                  "binaries": len(sur.sigma_vars), "delta": args.delta}
    result["problem"] = problem.name
    result["wall_time"] = time.perf_counter() - t0
    out = _out(args, "solution.json", args.out)
    out.write_text(json.dumps(result, indent=1, default=_json_default), encoding="utf-8")
    print("x = " + " ".join(f"{v:g}" for v in result["x"]))
    print(f"objective = {result['objective']:.6f}  status = {result['status']}  "
          f"solve {result['solve_time']:.3f} s  total {result['wall_time']:.3f} s")
    return 0


def cmd_evaluate(args):
    problem = _problem(args)
    if args.x is not None:
        x = np.array(_csv_floats(args.x))
    elif args.solution:
        x = np.array(json.loads(Path(args.solution).read_text(encoding="utf-8"))["x"], dtype=float)
    else:
        raise _UsageError("one of --x or --solution is required")
    if len(x) != problem.n_first:
        raise DimensionMismatch(f"dimension mismatch: got {len(x)} first-stage values, "
                                f"{problem.name} has {problem.n_first}")
    if args.scenario_file:
        d = json.loads(Path(args.scenario_file).read_text(encoding="utf-8"))
        scenarios = ScenarioSet(d["xi"], d.get("weights"))
    else:
        scenarios = problem.sample_scenarios(args.scenarios, args.seed)
    risk = RiskSpec(args.lam, args.alpha)
    ev = evaluate_fixed_x(problem, x, scenarios, risk, args.workers, args.solver)
    row = ev.to_row()
    row["x"] = x.tolist()
    row["n_scenarios"] = len(scenarios)
    if args.out:
        Path(args.out).write_text(json.dumps(ev.to_dict(), indent=1), encoding="utf-8")
    _print_json(row)
    return 0


def _delta_args(args):
    problem = _problem(args)
    net = _load_net_for(problem, args.model, "qnn")
    spec = SurrogateSpec(args.lam, args.alpha)
    return problem, net, spec, _csv_deltas(args.deltas)


def cmd_select_delta(args):
    problem, net, spec, deltas = _delta_args(args)
    res = pipeline.select_delta(problem, net, spec, deltas, seed=args.seed, eval_size=args.eval_size,
                                limits=_limits(args), backend=args.solver, workers=args.workers)
    out = _out(args, "delta_selection.json")
    out.write_text(json.dumps(res.to_dict(), indent=1, default=_json_default), encoding="utf-8")
    for c in res.candidates:
        print(f"delta={pipeline.delta_label(c.delta):>13}  objective={c.objective:.6f}  status={c.status}")
    print(f"chosen delta = {pipeline.delta_label(res.chosen)}")
    return 0


def cmd_delta_sensitivity(args):
    problem, net, spec, deltas = _delta_args(args)
    rows = pipeline.delta_sensitivity(problem, net, deltas, spec=spec, seed=args.seed,
                                      eval_size=args.eval_size, limits=_limits(args),
                                      backend=args.solver, workers=args.workers)
    pipeline.write_sensitivity_csv(rows, _out(args, "delta_sensitivity.csv"))
    table = pipeline.sensitivity_markdown(rows)
    _out(args, "delta_sensitivity.md").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_benchmark(args):
    if not args.problem and not args.instance_file:
        raise _UsageError("one of --problem or --instance-file is required")
    cfg = pipeline.BenchmarkConfig(
        problem=args.problem or "", instance_seed=args.instance_seed, instance_file=args.instance_file,
        methods=_csv_words(args.methods), lambdas=_csv_floats(args.lambdas), alphas=_csv_floats(args.alphas),
        n_samples=args.samples, data_seed=args.seed, trials=args.trials, train={"epochs": args.epochs},
        deltas=_csv_deltas(args.deltas), saa_scenarios=args.saa_scenarios,
        eval_set_sizes=_csv_ints(args.eval_sizes), eval_set_count=args.eval_count,
        eval_seed=10_000 + args.seed, time_limit=args.time_limit, gap_tol=args.gap,
        solver=args.solver, workers=args.workers)
    out_dir = Path(args.out_dir)
    rows = pipeline.run_benchmark(cfg, out_dir)
    table = pipeline.benchmark_markdown(rows)
    (out_dir / "benchmark.md").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except ConfigError as exc:
        print(f"qsurrogate: error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"qsurrogate {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (QSurrogateError, OSError, ValueError, KeyError) as exc:
        print(f"qsurrogate {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
