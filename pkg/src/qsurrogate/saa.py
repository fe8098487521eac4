"""Sample average approximation: extensive forms and fixed-decision evaluation.

Minimisation problems use the right tail of the second-stage cost::

    (1 + lam) c^T X + sum_w p_w f_w + lam * (nu + 1/(1 - alpha) * sum_w p_w eta_w)
    eta_w >= 0,  f_w - nu - eta_w <= 0

Maximisation problems use the left tail of the second-stage profit::

    (1 + lam) c^T X + sum_w p_w f_w + lam * (nu - 1/(1 - alpha) * sum_w p_w eta_w)
    eta_w >= 0,  nu - f_w - eta_w <= 0
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np

from . import milp
from .milp import LinExpr, MipModel, Relation, SolveLimits, VarKind, quicksum
from .parallel import pmap
from .problems import ScenarioSet, TwoStageProblem

# Second-stage and fixed-X solves are small; solve them to (near) proven optimality.
EXACT_LIMITS = SolveLimits(time_limit=600.0, gap_tol=1e-9)


@dataclass(frozen=True)
class RiskSpec:
    lam: float = 0.0
    alpha: float = 0.9

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


# -- empirical CVaR ------------------------------------------------------------

def empirical_var(values, weights, alpha: float) -> float:
    """Lower ``alpha``-quantile of a discrete distribution."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(weights[order])
    k = int(np.searchsorted(cum, alpha - 1e-12, side="left"))
    return float(values[order][min(k, len(values) - 1)])


def rockafellar_objective(values, weights, alpha: float, nu: float) -> float:
    """``nu + E[(Z - nu)^+] / (1 - alpha)``; minimised over ``nu`` it is CVaR."""
    values = np.asarray(values, dtype=float)
    excess = np.maximum(values - nu, 0.0)
    return float(nu + np.dot(weights, excess) / (1.0 - alpha))


def empirical_cvar(values, weights, alpha: float, tail: str = "right") -> float:
    """CVaR of a discrete distribution.

    ``tail="right"`` averages the upper ``1 - alpha`` mass (losses);
    ``tail="left"`` averages the lower ``1 - alpha`` mass (profits).  The
    Rockafellar objective is evaluated at ``nu = VaR``, one of its minimisers,
    so non-divisible ``alpha * n`` is handled exactly.
    """
    values = np.asarray(values, dtype=float)
    if tail == "left":
        return -empirical_cvar(-values, weights, alpha, "right")
    if tail != "right":
        raise ValueError(f"tail must be 'right' or 'left', got {tail!r}")
    nu = empirical_var(values, weights, alpha)
    return rockafellar_objective(values, weights, alpha, nu)


def cvar_lp(values, weights, alpha: float, backend=None) -> tuple[float, float]:
    """Right-tail CVaR by solving the ``nu``/``eta`` linear program.

    Returns ``(cvar, nu_opt)``.
    """
    model = MipModel("cvar-lp")
    nu = model.add_var(VarKind.CONTINUOUS, -math.inf, math.inf, "nu")
    eta = model.add_vars(len(values), VarKind.CONTINUOUS, 0.0, math.inf, "eta")
    for v, e in zip(values, eta):
        model.add_constraint(-nu - e, Relation.LE, -float(v))
    model.set_objective(nu + LinExpr.from_arrays(eta, np.asarray(weights) / (1.0 - alpha)))
    res = milp.solve(model, EXACT_LIMITS, backend)
    if res.status is not milp.Status.OPTIMAL:
        raise milp.SolverError(f"CVaR LP returned {res.status.value}")
    return res.objective, res[nu]


# -- extensive form --------------------------------------------------------------

@dataclass
class ExtensiveForm:
    model: MipModel
    x_vars: list
    scenario_values: list        # f(Y_w, X, xi_w) per scenario, as expressions
    nu: milp.VarRef | None = None
    eta: list = field(default_factory=list)
    risk: RiskSpec | None = None

    def fix_first_stage(self, x):
        for var, val in zip(self.x_vars, np.asarray(x, dtype=float)):
            self.model.fix(var, val)


def build_saa(problem: TwoStageProblem, scenarios: ScenarioSet, risk: RiskSpec | None = None) -> ExtensiveForm:
    """Monolithic SAA model: shared first stage, one recourse copy per scenario."""
    if abs(float(np.sum(scenarios.weights)) - 1.0) > 1e-9:
        raise ValueError("scenario weights must sum to 1")
    model = MipModel(f"saa-{problem.name}-{len(scenarios)}", problem.sense)
    x = problem.add_first_stage(model)
    f = [problem.add_second_stage(model, x, sc.xi, tag=f"@{w}") for w, sc in enumerate(scenarios)]
    lam = risk.lam if risk else 0.0
    first = LinExpr.from_arrays(x, (1.0 + lam) * problem.first_stage_cost)
    expectation = quicksum(float(p) * fw for p, fw in zip(scenarios.weights, f))
    objective = first + expectation
    nu, eta = None, []
    if risk is not None:
        nu = model.add_var(VarKind.CONTINUOUS, -math.inf, math.inf, "nu")
        eta = model.add_vars(len(scenarios), VarKind.CONTINUOUS, 0.0, math.inf, "eta")
        scale = 1.0 / (1.0 - risk.alpha)
        tail = LinExpr.from_arrays(eta, scale * np.asarray(scenarios.weights))
        for fw, e in zip(f, eta):
            if problem.minimize:
                model.add_constraint(fw - nu - e, Relation.LE, 0.0)
            else:
                model.add_constraint(nu - fw - e, Relation.LE, 0.0)
        objective = objective + lam * (nu + tail if problem.minimize else nu - tail)
    model.set_objective(objective)
    return ExtensiveForm(model, x, f, nu, eta, risk)


@dataclass
class SAASolution:
    x: np.ndarray
    objective: float
    status: milp.Status
    gap: float
    solve_time: float
    build_time: float


def solve_saa(problem, scenarios, risk=None, limits=None, backend=None) -> SAASolution:
    t0 = time.perf_counter()
    ef = build_saa(problem, scenarios, risk)
    build_time = time.perf_counter() - t0
    res = milp.solve(ef.model, limits, backend)
    if not res.has_solution:
        raise milp.SolverError(f"SAA solve for {problem.name} returned {res.status.value}: {res.message}")
    x = _clean_first_stage(problem, np.array([res[v] for v in ef.x_vars]))
    return SAASolution(x, res.objective, res.status, res.gap, res.wall_time, build_time)


def _clean_first_stage(problem, x):
    x = np.clip(x, problem.first_lower, problem.first_upper)
    bm = problem.binary_mask
    x[bm] = np.round(x[bm])
    return x


# -- fixed first stage -----------------------------------------------------------

@dataclass
class TrueObjective:
    total: float
    first_stage: float
    expectation_part: float
    cvar_part: float | None
    var: float | None
    per_scenario_values: list
    lam: float
    alpha: float | None
    sense: str

    def to_row(self) -> dict:
        row = asdict(self)
        row.pop("per_scenario_values")
        return row

    def to_dict(self) -> dict:
        return asdict(self)


def _second_stage_value(problem, x, backend, xi):
    return problem.second_stage_value(x, xi, backend, EXACT_LIMITS)


def assemble_objective(problem, x, values, weights, risk: RiskSpec | None) -> TrueObjective:
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    lam = risk.lam if risk else 0.0
    first = problem.first_stage_value(x)
    expectation = float(np.dot(weights, values))
    cvar = var = None
    if risk is not None:
        tail = "right" if problem.minimize else "left"
        cvar = empirical_cvar(values, weights, risk.alpha, tail)
        var = (empirical_var(values, weights, risk.alpha) if problem.minimize
               else -empirical_var(-values, weights, risk.alpha))
    total = (1.0 + lam) * first + expectation + (lam * cvar if cvar is not None else 0.0)
    return TrueObjective(total, first, expectation, cvar, var, values.tolist(), lam,
                         risk.alpha if risk else None, problem.sense.value)


def evaluate_fixed_x(problem: TwoStageProblem, x, scenarios: ScenarioSet,
                     risk: RiskSpec | None = None, workers: int = 1, backend=None) -> TrueObjective:
    """True objective of a fixed first-stage decision on a scenario set.

    Each scenario's recourse problem is solved independently; CVaR comes from
    the empirical distribution of the resulting values.
    """
    x = np.asarray(x, dtype=float)
    if not problem.is_feasible_first_stage(x, tol=1e-6):
        raise ValueError(f"first-stage decision {x.tolist()} is not feasible for {problem.name}")
    fn = partial(_second_stage_value, problem, x, backend)
    values = pmap(fn, list(scenarios.xi), workers)
    return assemble_objective(problem, x, values, scenarios.weights, risk)
