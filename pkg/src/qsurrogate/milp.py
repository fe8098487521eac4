"""Solver-agnostic mixed-integer linear programs.

A :class:`MipModel` holds variables, linear constraints and a linear
objective.  Models are solved through a :class:`Backend`; two are shipped:

* ``highs`` -- :func:`scipy.optimize.milp` (HiGHS branch and bound), followed
  by an LP polish with the binaries fixed so that continuous values are
  exact to LP precision rather than to the MIP integrality tolerance.
* ``enumerate`` -- exhaustive enumeration over the binaries with an LP over the
  continuous part.  Exponential, capped at 20 binaries, used as a test oracle.
"""

from __future__ import annotations

import itertools
import math
import os
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, linprog, milp
from scipy.sparse import coo_array, csr_array, vstack

from .errors import BackendUnavailable, BoundsError, SolverError, UnknownVariable

ENV_BACKEND = "QSURROGATE_SOLVER"
DEFAULT_BACKEND = "highs"

_LP_TOL = 1e-10


class VarKind(str, Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class Relation(str, Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class Sense(str, Enum):
    MINIMIZE = "minimize"
    MAXIMIZE = "maximize"


class Status(str, Enum):
    OPTIMAL = "optimal"
    FEASIBLE_LIMIT = "feasible_limit"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ERROR = "error"


def _as_relation(rel) -> Relation:
    if isinstance(rel, Relation):
        return rel
    aliases = {"<=": Relation.LE, "<": Relation.LE, "le": Relation.LE,
               "=": Relation.EQ, "==": Relation.EQ, "eq": Relation.EQ,
               ">=": Relation.GE, ">": Relation.GE, "ge": Relation.GE}
    try:
        return aliases[str(rel).lower()]
    except KeyError:
        raise ValueError(f"unknown relation {rel!r}") from None


class _Arith:
    """Arithmetic shared by variables and expressions; results are LinExpr."""

    def _expr(self) -> "LinExpr":
        raise NotImplementedError

    def __add__(self, other):
        return self._expr()._combined(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._expr()._combined(other, -1.0)

    def __rsub__(self, other):
        return (-self._expr())._combined(other, 1.0)

    def __mul__(self, k):
        if not isinstance(k, (int, float, np.floating, np.integer)):
            return NotImplemented
        e = self._expr()
        k = float(k)
        return LinExpr({v: c * k for v, c in e.terms.items()}, e.constant * k)

    __rmul__ = __mul__

    def __truediv__(self, k):
        return self * (1.0 / float(k))

    def __neg__(self):
        return self * -1.0


@dataclass(eq=False)
class VarRef(_Arith):
    """Handle to a registered variable.  Hashes by identity."""

    index: int
    kind: VarKind
    lower: float
    upper: float
    name: str
    _owner: int = field(default=0, repr=False)

    def _expr(self) -> "LinExpr":
        return LinExpr({self: 1.0})

    @property
    def is_binary(self) -> bool:
        return self.kind is VarKind.BINARY


class LinExpr(_Arith):
    """Sum of ``coefficient * variable`` terms plus a constant.

    Terms are kept in a dict keyed by :class:`VarRef`, so duplicates are
    merged on construction.
    """

    __slots__ = ("terms", "constant")

    def __init__(self, terms=None, constant: float = 0.0):
        merged: dict[VarRef, float] = {}
        if terms:
            items = terms.items() if isinstance(terms, dict) else terms
            for var, coef in items:
                merged[var] = merged.get(var, 0.0) + float(coef)
        self.terms = merged
        self.constant = float(constant)

    @classmethod
    def from_arrays(cls, variables, coefs, constant=0.0) -> "LinExpr":
        return cls(zip(variables, coefs), constant)

    def _expr(self) -> "LinExpr":
        return self

    def _combined(self, other, sign: float) -> "LinExpr":
        out = LinExpr(self.terms, self.constant)
        if isinstance(other, (int, float, np.floating, np.integer)):
            out.constant += sign * float(other)
            return out
        if isinstance(other, _Arith):
            o = other._expr()
            for v, c in o.terms.items():
                out.terms[v] = out.terms.get(v, 0.0) + sign * c
            out.constant += sign * o.constant
            return out
        return NotImplemented

    def value(self, values) -> float:
        """Evaluate at ``values`` (mapping VarRef -> float, or a SolveResult)."""
        if isinstance(values, SolveResult):
            values = values.values
        return self.constant + sum(c * values[v] for v, c in self.terms.items())

    def __repr__(self):
        parts = [f"{c:+g}*{v.name}" for v, c in self.terms.items()]
        if self.constant or not parts:
            parts.append(f"{self.constant:+g}")
        return "LinExpr(" + " ".join(parts) + ")"


def as_expr(x) -> LinExpr:
    if isinstance(x, _Arith):
        return x._expr()
    return LinExpr(constant=float(x))


def quicksum(items) -> LinExpr:
    out = LinExpr()
    for it in items:
        e = as_expr(it)
        for v, c in e.terms.items():
            out.terms[v] = out.terms.get(v, 0.0) + c
        out.constant += e.constant
    return out


@dataclass
class Constraint:
    expr: LinExpr
    relation: Relation
    rhs: float
    name: str = ""


class MipModel:
    """A mixed-integer linear program under construction.

    Variables may only appear in constraints or the objective of the model
    that created them.
    """

    def __init__(self, name: str = "model", sense: Sense | str = Sense.MINIMIZE):
        self.name = name
        self.sense = Sense(sense)
        self.variables: list[VarRef] = []
        self.constraints: list[Constraint] = []
        self.objective = LinExpr()

    # -- construction -----------------------------------------------------
    def add_var(self, kind=VarKind.CONTINUOUS, lower: float = 0.0,
                upper: float = math.inf, name: str | None = None) -> VarRef:
        kind = VarKind(kind)
        lower = -math.inf if lower is None else float(lower)
        upper = math.inf if upper is None else float(upper)
        if lower > upper:
            raise BoundsError(f"lower bound {lower} exceeds upper bound {upper}")
        if kind is VarKind.BINARY and (lower < 0.0 or upper > 1.0):
            raise BoundsError(f"binary variable bounds [{lower}, {upper}] not within [0, 1]")
        idx = len(self.variables)
        var = VarRef(idx, kind, lower, upper, name or f"v{idx}", id(self))
        self.variables.append(var)
        return var

    def add_vars(self, n: int, kind=VarKind.CONTINUOUS, lower=0.0, upper=math.inf,
                 prefix: str = "v") -> list[VarRef]:
        return [self.add_var(kind, lower, upper, f"{prefix}[{i}]") for i in range(n)]

    def _check(self, expr: LinExpr):
        me = id(self)
        for v in expr.terms:
            if v._owner != me or v.index >= len(self.variables) or self.variables[v.index] is not v:
                raise UnknownVariable(f"variable {v.name!r} is not registered in model {self.name!r}")

    def add_constraint(self, expr, relation, rhs: float = 0.0, name: str = "") -> int:
        expr = as_expr(expr)
        self._check(expr)
        cid = len(self.constraints)
        self.constraints.append(Constraint(expr, _as_relation(relation), float(rhs), name or f"c{cid}"))
        return cid

    def set_objective(self, expr, sense: Sense | str | None = None):
        expr = as_expr(expr)
        self._check(expr)
        self.objective = expr
        if sense is not None:
            self.sense = Sense(sense)

    def fix(self, var: VarRef, value: float):
        """Fix ``var`` to ``value`` through its bounds."""
        self._check(var._expr())
        value = float(value)
        if var.is_binary:
            value = float(round(value))
        var.lower = var.upper = value

    # -- inspection -------------------------------------------------------
    @property
    def n_binaries(self) -> int:
        return sum(v.is_binary for v in self.variables)

    def violation(self, values) -> float:
        """Largest bound or constraint violation at ``values``."""
        worst = 0.0
        for v in self.variables:
            x = values[v]
            worst = max(worst, v.lower - x, x - v.upper)
        for c in self.constraints:
            lhs = c.expr.value(values)
            if c.relation is Relation.LE:
                worst = max(worst, lhs - c.rhs)
            elif c.relation is Relation.GE:
                worst = max(worst, c.rhs - lhs)
            else:
                worst = max(worst, abs(lhs - c.rhs))
        return worst

    def to_arrays(self):
        """Dense objective, sparse row matrix and row/column bounds.

        The objective is returned in minimisation orientation.
        """
        n = len(self.variables)
        c = np.zeros(n)
        for v, coef in self.objective.terms.items():
            c[v.index] += coef
        if self.sense is Sense.MAXIMIZE:
            c = -c
        rows, cols, data = [], [], []
        lo = np.empty(len(self.constraints))
        hi = np.empty(len(self.constraints))
        for r, con in enumerate(self.constraints):
            for v, coef in con.expr.terms.items():
                rows.append(r)
                cols.append(v.index)
                data.append(coef)
            b = con.rhs - con.expr.constant
            lo[r] = b if con.relation is not Relation.LE else -np.inf
            hi[r] = b if con.relation is not Relation.GE else np.inf
        A = coo_array((data, (rows, cols)), shape=(len(self.constraints), n)).tocsr()
        lb = np.array([v.lower for v in self.variables])
        ub = np.array([v.upper for v in self.variables])
        integrality = np.array([1 if v.is_binary else 0 for v in self.variables])
        return c, A, lo, hi, lb, ub, integrality

    def __repr__(self):
        return (f"MipModel({self.name!r}, {self.sense.value}, vars={len(self.variables)}, "
                f"binaries={self.n_binaries}, constraints={len(self.constraints)})")


@dataclass
class SolveLimits:
    time_limit: float = 600.0
    gap_tol: float = 1e-4
    threads: int = 1


@dataclass
class SolveResult:
    status: Status
    objective: float
    values: dict
    gap: float
    wall_time: float
    nodes: int | None = None
    message: str = ""

    @property
    def has_solution(self) -> bool:
        return self.status in (Status.OPTIMAL, Status.FEASIBLE_LIMIT)

    def __getitem__(self, var_or_expr):
        if isinstance(var_or_expr, VarRef):
            return self.values[var_or_expr]
        return as_expr(var_or_expr).value(self.values)


def _trivial_rows_infeasible(model: MipModel) -> bool:
    for con in model.constraints:
        if con.expr.terms:
            continue
        lhs, rhs = con.expr.constant, con.rhs
        if ((con.relation is Relation.LE and lhs > rhs + 1e-9)
                or (con.relation is Relation.GE and lhs < rhs - 1e-9)
                or (con.relation is Relation.EQ and abs(lhs - rhs) > 1e-9)):
            return True
    return False


def _lp(c, A, lo, hi, lb, ub):
    """Solve ``min c x`` s.t. ``lo <= A x <= hi``, ``lb <= x <= ub`` with HiGHS."""
    A = csr_array(A)
    fin_hi, fin_lo = np.isfinite(hi), np.isfinite(lo)
    eq = fin_hi & fin_lo & (hi == lo)
    ub_rows = fin_hi & ~eq
    lb_rows = fin_lo & ~eq
    blocks, rhs = [], []
    if ub_rows.any():
        blocks.append(A[ub_rows])
        rhs.append(hi[ub_rows])
    if lb_rows.any():
        blocks.append(-A[lb_rows])
        rhs.append(-lo[lb_rows])
    A_ub = vstack(blocks).tocsr() if blocks else None
    b_ub = np.concatenate(rhs) if rhs else None
    A_eq = A[eq] if eq.any() else None
    b_eq = lo[eq] if eq.any() else None
    bounds = list(zip(lb, ub))
    return linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                   method="highs",
                   options={"primal_feasibility_tolerance": _LP_TOL,
                            "dual_feasibility_tolerance": _LP_TOL})


def _result(model, x, status, gap, t0, nodes=None, message=""):
    values = {v: float(x[v.index]) for v in model.variables}
    obj = model.objective.value(values)
    return SolveResult(status, obj, values, gap, time.perf_counter() - t0, nodes, message)


class Backend(ABC):
    """Solves a :class:`MipModel`.  Instances hold no state across solves."""

    name = "abstract"

    @abstractmethod
    def solve(self, model: MipModel, limits: SolveLimits) -> SolveResult:
        ...


class HighsBackend(Backend):
    """Branch and bound through :func:`scipy.optimize.milp`."""

    name = "highs"

    def __init__(self, polish: bool = True):
        self.polish = polish

    def solve(self, model, limits):
        t0 = time.perf_counter()
        if _trivial_rows_infeasible(model):
            return SolveResult(Status.INFEASIBLE, math.nan, {}, math.inf, time.perf_counter() - t0,
                               message="constant constraint violated")
        c, A, lo, hi, lb, ub, integrality = model.to_arrays()
        if not model.variables:
            return _result(model, np.zeros(0), Status.OPTIMAL, 0.0, t0)
        constraints = [LinearConstraint(A, lo, hi)] if A.shape[0] else []
        try:
            res = milp(c, constraints=constraints, integrality=integrality,
                       bounds=Bounds(lb, ub),
                       options={"time_limit": float(limits.time_limit),
                                "mip_rel_gap": float(limits.gap_tol)})
        except Exception as exc:  # pragma: no cover - defensive
            raise SolverError(f"HiGHS failed: {exc}") from exc
        nodes = getattr(res, "mip_node_count", None)
        gap = getattr(res, "mip_gap", None)
        gap = 0.0 if gap is None or not integrality.any() else float(gap)
        if res.status == 2:
            return SolveResult(Status.INFEASIBLE, math.nan, {}, math.inf,
                               time.perf_counter() - t0, nodes, res.message)
        if res.status == 3:
            return SolveResult(Status.UNBOUNDED, math.nan, {}, math.inf,
                               time.perf_counter() - t0, nodes, res.message)
        if res.x is None:
            return SolveResult(Status.ERROR, math.nan, {}, math.inf,
                               time.perf_counter() - t0, nodes,
                               f"no incumbent: {res.message}")
        status = Status.OPTIMAL if res.status == 0 else Status.FEASIBLE_LIMIT
        if status is Status.OPTIMAL and gap > limits.gap_tol:
            status = Status.FEASIBLE_LIMIT
        x = np.asarray(res.x, dtype=float)
        if self.polish:
            x = self._polish(x, c, A, lo, hi, lb, ub, integrality)
        return _result(model, x, status, gap, t0, nodes, res.message)

    @staticmethod
    def _polish(x, c, A, lo, hi, lb, ub, integrality):
        """Round binaries, fix them and re-solve the LP over the continuous part."""
        if not integrality.any():
            plb, pub = lb, ub
        else:
            mask = integrality.astype(bool)
            xr = np.round(x[mask])
            plb, pub = lb.copy(), ub.copy()
            plb[mask] = pub[mask] = xr
        res = _lp(c, A, lo, hi, plb, pub)
        if res.status != 0:
            return x
        return np.asarray(res.x, dtype=float)


class EnumerationBackend(Backend):
    """Exhaustive search over binary assignments; LP for the continuous rest."""

    name = "enumerate"
    max_binaries = 20

    def solve(self, model, limits):
        t0 = time.perf_counter()
        if _trivial_rows_infeasible(model):
            return SolveResult(Status.INFEASIBLE, math.nan, {}, math.inf, time.perf_counter() - t0,
                               message="constant constraint violated")
        c, A, lo, hi, lb, ub, integrality = model.to_arrays()
        bins = np.flatnonzero(integrality)
        if len(bins) > self.max_binaries:
            raise BackendUnavailable(
                f"enumeration backend handles at most {self.max_binaries} binaries, got {len(bins)}")
        choices = []
        for j in bins:
            choices.append([v for v in (0.0, 1.0) if lb[j] <= v <= ub[j]])
        cont = np.flatnonzero(integrality == 0)
        A_b = A[:, bins].toarray() if len(bins) else np.zeros((A.shape[0], 0))
        A_c = A[:, cont]
        best_val, best_x, unbounded = math.inf, None, False
        for combo in itertools.product(*choices):
            if time.perf_counter() - t0 > limits.time_limit:
                break
            xb = np.array(combo, dtype=float)
            shift = A_b @ xb if len(bins) else np.zeros(A.shape[0])
            fixed_obj = float(c[bins] @ xb) if len(bins) else 0.0
            if len(cont):
                res = _lp(c[cont], A_c, lo - shift, hi - shift, lb[cont], ub[cont])
                if res.status == 3:
                    unbounded = True
                    break
                if res.status != 0:
                    continue
                val = fixed_obj + res.fun
                xc = res.x
            else:
                if np.any(shift > hi + 1e-9) or np.any(shift < lo - 1e-9):
                    continue
                val, xc = fixed_obj, np.zeros(0)
            if val < best_val - 1e-12:
                best_val = val
                best_x = np.zeros(len(model.variables))
                best_x[bins] = xb
                best_x[cont] = xc
        if unbounded:
            return SolveResult(Status.UNBOUNDED, math.nan, {}, math.inf, time.perf_counter() - t0)
        if best_x is None:
            return SolveResult(Status.INFEASIBLE, math.nan, {}, math.inf, time.perf_counter() - t0)
        return _result(model, best_x, Status.OPTIMAL, 0.0, t0)


_BACKENDS = {"highs": HighsBackend, "enumerate": EnumerationBackend}


def get_backend(name: str | None = None) -> Backend:
    """Instantiate a backend.

    Resolution order: explicit ``name``, then ``$QSURROGATE_SOLVER``, then
    ``highs``.
    """
    name = name or os.environ.get(ENV_BACKEND) or DEFAULT_BACKEND
    try:
        return _BACKENDS[name.lower()]()
    except KeyError:
        raise BackendUnavailable(f"unknown solver backend {name!r}; "
                                 f"available: {sorted(_BACKENDS)}") from None


def solve(model: MipModel, limits: SolveLimits | None = None,
          backend: Backend | str | None = None, dump_lp: str | Path | None = None) -> SolveResult:
    """Solve ``model``; optionally write it to an LP file first."""
    limits = limits or SolveLimits()
    if not isinstance(backend, Backend):
        backend = get_backend(backend)
    if dump_lp:
        write_lp(model, dump_lp)
    return backend.solve(model, limits)


# -- LP file output -----------------------------------------------------------

def _lp_name(v: VarRef) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "_." else "_" for ch in v.name)
    return f"x{v.index}_{safe}"


def _lp_terms(expr: LinExpr) -> str:
    if not expr.terms:
        return "0 " + _lp_name_placeholder()
    out = []
    for v, c in expr.terms.items():
        out.append(f"{'-' if c < 0 else '+'} {abs(c):.17g} {_lp_name(v)}")
    return " ".join(out)


def _lp_name_placeholder() -> str:
    return "__zero__"


def write_lp(model: MipModel, path) -> None:
    """Write ``model`` in CPLEX LP text format (debugging aid)."""
    lines = [f"\\ {model.name}",
             "Maximize" if model.sense is Sense.MAXIMIZE else "Minimize",
             f" obj: {_lp_terms(model.objective)}"
             + (f" + {model.objective.constant:.17g}" if model.objective.constant else ""),
             "Subject To"]
    ops = {Relation.LE: "<=", Relation.GE: ">=", Relation.EQ: "="}
    uses_zero = not model.objective.terms
    for con in model.constraints:
        if not con.expr.terms:
            uses_zero = True
        rhs = con.rhs - con.expr.constant
        lines.append(f" {con.name}: {_lp_terms(con.expr)} {ops[con.relation]} {rhs:.17g}")
    lines.append("Bounds")
    for v in model.variables:
        lo = "-inf" if v.lower == -math.inf else f"{v.lower:.17g}"
        hi = "+inf" if v.upper == math.inf else f"{v.upper:.17g}"
        lines.append(f" {lo} <= {_lp_name(v)} <= {hi}")
    if uses_zero:
        lines.append(f" {_lp_name_placeholder()} = 0")
    binaries = [_lp_name(v) for v in model.variables if v.is_binary]
    if binaries:
        lines.append("Binaries")
        lines.extend(f" {b}" for b in binaries)
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
