"""Two-stage stochastic benchmark problems.

Each problem knows how to add its first stage to a model, how to append one
copy of its second stage for a given scenario (with the first-stage decision
given either as model variables or as fixed numbers), and how to sample its
uncertain parameters.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import milp
from .errors import ConfigError, FormatError, InfeasibleSecondStage, SamplingExhausted
from .milp import LinExpr, MipModel, Relation, Sense, VarKind, quicksum

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Scenario:
    xi: np.ndarray
    weight: float


class ScenarioSet:
    """Scenario realisations (rows of ``xi``) with probabilities."""

    def __init__(self, xi, weights=None, seed: int | None = None):
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        if weights is None:
            weights = np.full(len(xi), 1.0 / len(xi))
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(xi),):
            raise ValueError("one weight per scenario required")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("scenario weights must be nonnegative and sum to 1")
        xi.setflags(write=False)
        weights.setflags(write=False)
        self.xi = xi
        self.weights = weights
        self.seed = seed

    def __len__(self):
        return len(self.xi)

    def __getitem__(self, i) -> Scenario:
        return Scenario(self.xi[i], float(self.weights[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        return (isinstance(other, ScenarioSet) and np.array_equal(self.xi, other.xi)
                and np.array_equal(self.weights, other.weights))

    def to_dict(self) -> dict:
        return {"xi": self.xi.tolist(), "weights": self.weights.tolist(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSet":
        return cls(d["xi"], d.get("weights"), d.get("seed"))


@dataclass(frozen=True)
class SecondStageSpec:
    n_second: int
    builder: Callable[[np.ndarray, Scenario], MipModel]
    complete_recourse: bool


@dataclass(frozen=True)
class LinearRow:
    """``coefs @ x  (relation)  rhs`` over the first-stage vector."""

    coefs: tuple
    relation: Relation
    rhs: float


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class TwoStageProblem:
    """Base class; subclasses implement the second stage and the sampler."""

    kind = "abstract"

    def __init__(self, name: str, first_stage_cost, first_stage_kind: Sequence[VarKind],
                 lower, upper, sense: Sense | str,
                 first_stage_constraints: Sequence[LinearRow] = (),
                 n_second: int = 0, complete_recourse: bool = True):
        self.name = name
        self.first_stage_cost = _frozen(first_stage_cost)
        self.n_first = len(self.first_stage_cost)
        self.first_stage_kind = tuple(VarKind(k) for k in first_stage_kind)
        self.first_lower = _frozen(lower)
        self.first_upper = _frozen(upper)
        self.sense = Sense(sense)
        self.first_stage_constraints = tuple(first_stage_constraints)
        self.n_second = n_second
        self.complete_recourse = complete_recourse
        if not (len(self.first_stage_kind) == len(self.first_lower)
                == len(self.first_upper) == self.n_first):
            raise ValueError("first-stage cost, kinds and bounds must share one length")
        self._check_nonempty()

    # -- first stage ------------------------------------------------------
    @property
    def minimize(self) -> bool:
        return self.sense is Sense.MINIMIZE

    @property
    def binary_mask(self) -> np.ndarray:
        return np.array([k is VarKind.BINARY for k in self.first_stage_kind])

    def add_first_stage(self, model: MipModel) -> list:
        xs = [model.add_var(k, lo, hi, f"X[{i}]")
              for i, (k, lo, hi) in enumerate(zip(self.first_stage_kind, self.first_lower,
                                                   self.first_upper))]
        for row in self.first_stage_constraints:
            model.add_constraint(LinExpr.from_arrays(xs, row.coefs), row.relation, row.rhs)
        return xs

    def first_stage_value(self, x) -> float:
        return float(self.first_stage_cost @ np.asarray(x, dtype=float))

    def is_feasible_first_stage(self, x, tol: float = 1e-9) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_first,):
            return False
        if np.any(x < self.first_lower - tol) or np.any(x > self.first_upper + tol):
            return False
        bm = self.binary_mask
        if np.any(np.abs(x[bm] - np.round(x[bm])) > tol):
            return False
        for row in self.first_stage_constraints:
            lhs = float(np.dot(row.coefs, x))
            if ((row.relation is Relation.LE and lhs > row.rhs + tol)
                    or (row.relation is Relation.GE and lhs < row.rhs - tol)
                    or (row.relation is Relation.EQ and abs(lhs - row.rhs) > tol)):
                return False
        return True

    def _check_nonempty(self):
        if not self.first_stage_constraints:
            return
        model = MipModel(f"{self.name}-first-stage")
        self.add_first_stage(model)
        res = milp.solve(model)
        if not res.has_solution:
            raise ValueError(f"first-stage feasible set of {self.name} is empty")

    def sample_feasible_first_stage(self, seed=None, max_attempts: int = 10_000) -> np.ndarray:
        """Uniform draw per coordinate, rejected until it satisfies every row."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        bm = self.binary_mask
        for _ in range(max_attempts):
            x = rng.uniform(self.first_lower, self.first_upper)
            x[bm] = rng.integers(0, 2, size=int(bm.sum()))
            if self.is_feasible_first_stage(x):
                return x
        raise SamplingExhausted(
            f"no feasible first-stage point for {self.name} after {max_attempts} draws")

    # -- second stage -----------------------------------------------------
    def add_second_stage(self, model: MipModel, x, xi, tag: str = "") -> LinExpr:
        """Append one second-stage copy; return its objective ``f`` as an expression.

        ``x`` holds the first-stage decision, entries being model variables
        or plain numbers.
        """
        raise NotImplementedError

    def second_stage_model(self, x, scenario) -> MipModel:
        xi = scenario.xi if isinstance(scenario, Scenario) else np.asarray(scenario, dtype=float)
        x = [float(v) for v in np.asarray(x, dtype=float)]
        model = MipModel(f"{self.name}-second-stage", self.sense)
        model.set_objective(self.add_second_stage(model, x, xi))
        return model

    @property
    def second_stage(self) -> SecondStageSpec:
        return SecondStageSpec(self.n_second, self.second_stage_model, self.complete_recourse)

    def second_stage_value(self, x, scenario, backend=None, limits=None) -> float:
        """``V(x, xi)`` by solving the single-scenario recourse problem."""
        model = self.second_stage_model(x, scenario)
        res = milp.solve(model, limits, backend)
        if res.status is not milp.Status.OPTIMAL:
            xi = scenario.xi if isinstance(scenario, Scenario) else scenario
            raise InfeasibleSecondStage(
                f"second stage of {self.name} returned {res.status.value} at x={list(x)}, "
                f"xi={list(np.asarray(xi))}")
        return float(res.objective)

    # -- uncertainty ------------------------------------------------------
    def sample_xi(self, rng: np.random.Generator, count: int) -> np.ndarray:
        raise NotImplementedError

    def sample_scenarios(self, count: int, seed: int) -> ScenarioSet:
        if count < 1:
            raise ValueError("count must be at least 1")
        rng = np.random.default_rng(seed)
        return ScenarioSet(self.sample_xi(rng, count), seed=seed)

    # -- serialisation ----------------------------------------------------
    def data(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"schema": SCHEMA_VERSION, "type": self.kind, "name": self.name, "data": self.data()}

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, n_first={self.n_first}, {self.sense.value})"


class CFLP(TwoStageProblem):
    """Capacitated facility location with single-source assignment.

    First stage opens facilities (binary, fixed cost).  Second stage assigns
    each customer to one open facility or leaves it unmet at penalty
    ``penalty * demand``.  Demands are ``base_demand * xi`` with ``xi``
    uniform on ``demand_range``.
    """

    kind = "cflp"

    def __init__(self, fixed_costs, capacities, unit_costs, base_demand, penalty,
                 demand_range=(0.8, 1.2), instance_seed: int | None = None, name=None):
        self.fixed_costs = _frozen(fixed_costs)
        self.capacities = _frozen(capacities)
        self.unit_costs = _frozen(unit_costs)
        self.base_demand = _frozen(base_demand)
        self.penalty = float(penalty)
        self.demand_range = (float(demand_range[0]), float(demand_range[1]))
        self.instance_seed = instance_seed
        n, m = self.unit_costs.shape
        if self.fixed_costs.shape != (n,) or self.capacities.shape != (n,) or self.base_demand.shape != (m,):
            raise ValueError("inconsistent CFLP array shapes")
        self.n_facilities, self.m_customers = n, m
        super().__init__(name or f"cflp-{n}-{m}", self.fixed_costs, [VarKind.BINARY] * n,
                         np.zeros(n), np.ones(n), Sense.MINIMIZE, n_second=n * m + m)

    def add_second_stage(self, model, x, xi, tag=""):
        n, m = self.n_facilities, self.m_customers
        demand = self.base_demand * np.asarray(xi, dtype=float)
        assign = [[model.add_var(VarKind.BINARY, 0, 1, f"assign{tag}[{i},{j}]") for j in range(m)]
                  for i in range(n)]
        unmet = [model.add_var(VarKind.CONTINUOUS, 0, 1, f"unmet{tag}[{j}]") for j in range(m)]
        for i in range(n):
            row = LinExpr.from_arrays(assign[i], demand) - float(self.capacities[i]) * x[i]
            model.add_constraint(row, Relation.LE, 0.0)
            for j in range(m):
                model.add_constraint(assign[i][j] - x[i], Relation.LE, 0.0)
        for j in range(m):
            model.add_constraint(quicksum(assign[i][j] for i in range(n)) + unmet[j], Relation.EQ, 1.0)
        terms = [(assign[i][j], self.unit_costs[i, j] * demand[j]) for i in range(n) for j in range(m)]
        terms += [(unmet[j], self.penalty * demand[j]) for j in range(m)]
        return LinExpr(terms)

    def sample_xi(self, rng, count):
        lo, hi = self.demand_range
        return rng.uniform(lo, hi, size=(count, self.m_customers))

    def data(self):
        return {"fixed_costs": self.fixed_costs.tolist(), "capacities": self.capacities.tolist(),
                "unit_costs": self.unit_costs.tolist(), "base_demand": self.base_demand.tolist(),
                "penalty": self.penalty, "demand_range": list(self.demand_range),
                "instance_seed": self.instance_seed}


def make_cflp(n_facilities: int, m_customers: int, instance_seed: int = 0) -> CFLP:
    """Random CFLP instance with capacity-dependent fixed costs (fully determined by the seed).

    * capacities ``U[50, 100] * m / n``
    * fixed costs ``U[0, 90] + U[100, 110] * sqrt(capacity)``
    * unit assignment costs ``U[5, 35]`` per unit of demand
    * nominal demands ``U[5, 15]``
    * unmet-demand penalty: 5 x the largest unit cost
    """
    if n_facilities < 1 or m_customers < 1:
        raise ValueError("need at least one facility and one customer")
    rng = np.random.default_rng(instance_seed)
    n, m = n_facilities, m_customers
    capacities = rng.uniform(50, 100, n) * (m / n)
    fixed = rng.uniform(0, 90, n) + rng.uniform(100, 110, n) * np.sqrt(capacities)
    unit = rng.uniform(5, 35, (n, m))
    demand = rng.uniform(5, 15, m)
    return CFLP(fixed, capacities, unit, demand, 5.0 * unit.max(), instance_seed=instance_seed)


class InvestmentProblem(TwoStageProblem):
    """Two-variable investment problem with binary recourse (maximisation).

    ``max r^T x + E[max q^T y]`` with ``x in [0, 5]^2``, ``y in {0,1}^4`` and
    ``T y <= xi - x``; ``xi`` uniform on ``[5, 15]^2``.
    """

    kind = "investment"
    DEFAULT_GRID_COUNTS = (121, 441, 1681, 10000)

    def __init__(self, first_stage_reward=(1.5, 4.0), rewards=(16, 19, 23, 28),
                 technology=((2, 3, 4, 5), (6, 1, 3, 2)), x_upper=5.0, xi_range=(5.0, 15.0),
                 grid_counts=DEFAULT_GRID_COUNTS, name="investment"):
        self.rewards = _frozen(rewards)
        self.technology = _frozen(technology)
        self.xi_range = (float(xi_range[0]), float(xi_range[1]))
        self.grid_counts = tuple(int(g) for g in grid_counts)
        super().__init__(name, first_stage_reward, [VarKind.CONTINUOUS] * 2,
                         np.zeros(2), np.full(2, float(x_upper)), Sense.MAXIMIZE,
                         n_second=len(self.rewards))

    def add_second_stage(self, model, x, xi, tag=""):
        y = [model.add_var(VarKind.BINARY, 0, 1, f"y{tag}[{k}]") for k in range(len(self.rewards))]
        for r, row in enumerate(self.technology):
            model.add_constraint(LinExpr.from_arrays(y, row) + x[r], Relation.LE, float(xi[r]))
        return LinExpr.from_arrays(y, self.rewards)

    def sample_xi(self, rng, count):
        lo, hi = self.xi_range
        return rng.uniform(lo, hi, size=(count, 2))

    def sample_scenarios(self, count, seed):
        """Square grids for the classical scenario counts, i.i.d. uniform otherwise."""
        k = math.isqrt(count)
        if count in self.grid_counts and k * k == count:
            g = np.linspace(*self.xi_range, k)
            a, b = np.meshgrid(g, g, indexing="ij")
            return ScenarioSet(np.column_stack([a.ravel(), b.ravel()]), seed=seed)
        return super().sample_scenarios(count, seed)

    def data(self):
        return {"first_stage_reward": self.first_stage_cost.tolist(), "rewards": self.rewards.tolist(),
                "technology": self.technology.tolist(), "x_upper": float(self.first_upper[0]),
                "xi_range": list(self.xi_range), "grid_counts": list(self.grid_counts)}


def make_investment(**kwargs) -> InvestmentProblem:
    return InvestmentProblem(**kwargs)


_CFLP_NAME = re.compile(r"^cflp-(\d+)-(\d+)$")


def make_problem(name: str, instance_seed: int = 0) -> TwoStageProblem:
    """Problem from a short name: ``cflp-N-M`` or ``investment`` (alias ``ip-i-h``)."""
    key = name.strip().lower()
    m = _CFLP_NAME.match(key)
    if m:
        return make_cflp(int(m.group(1)), int(m.group(2)), instance_seed)
    if key in ("investment", "ip-i-h", "ip"):
        return make_investment()
    raise ConfigError(f"unknown problem {name!r} (expected cflp-N-M or investment)")


def problem_from_dict(d: dict) -> TwoStageProblem:
    if d.get("schema") != SCHEMA_VERSION:
        raise FormatError(f"unsupported instance schema {d.get('schema')!r}")
    data, kind = d.get("data", {}), d.get("type")
    try:
        if kind == "cflp":
            return CFLP(data["fixed_costs"], data["capacities"], data["unit_costs"],
                        data["base_demand"], data["penalty"], data.get("demand_range", (0.8, 1.2)),
                        data.get("instance_seed"), name=d.get("name"))
        if kind == "investment":
            return InvestmentProblem(data["first_stage_reward"], data["rewards"], data["technology"],
                                     data["x_upper"], data["xi_range"],
                                     data.get("grid_counts", InvestmentProblem.DEFAULT_GRID_COUNTS),
                                     name=d.get("name", "investment"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed {kind} instance: {exc}") from exc
    raise FormatError(f"unknown problem type {kind!r}")


def save_instance(problem: TwoStageProblem, path) -> None:
    Path(path).write_text(json.dumps(problem.to_dict(), indent=1), encoding="utf-8")


def load_instance(path) -> TwoStageProblem:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return problem_from_dict(d)
