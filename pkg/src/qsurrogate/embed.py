"""Mixed-integer embedding of quantile networks and the surrogate problems.

Every hidden ReLU ``a = max(0, z)`` with valid preactivation bounds
``lo <= z <= hi`` is written as::

    a >= z,   a <= z - lo * (1 - s),   0 <= a <= hi * s,   s binary

Neurons whose bounds do not straddle zero need no binary: ``hi <= 0`` gives
``a = 0`` and ``lo >= 0`` gives ``a = z``.  Bounds come from interval
arithmetic over the first-stage box.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import milp
from .errors import DimensionMismatch, InvalidBounds, UnboundedInput
from .milp import LinExpr, MipModel, Relation, SolveLimits, VarKind
from .qnn import QuantileNetwork

UNCONSTRAINED = None


# -- bounds ----------------------------------------------------------------------

@dataclass
class ActivationBounds:
    """Preactivation bounds per layer (scaled units) and the input box they derive from.

    ``pre[l]`` is a pair of arrays ``(M_minus, M_plus)`` for layer ``l``
    (hidden layers first, output layer last); ``post[l]`` is the box of the
    activations feeding layer ``l`` (``post[0]`` is the scaled input box).
    """

    pre: list
    post: list

    @property
    def n_layers(self) -> int:
        return len(self.pre)

    def layer(self, l):
        return self.pre[l]


def _scaled_box(net: QuantileNetwork, lower, upper):
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != (net.n_inputs,) or upper.shape != (net.n_inputs,):
        raise DimensionMismatch(f"input box has {lower.size} coordinates, network expects {net.n_inputs}")
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
        raise UnboundedInput("interval bounds need a finite box on every input coordinate")
    if np.any(lower > upper):
        raise InvalidBounds("input box has lower > upper")
    a = net.scale_inputs(lower)
    b = net.scale_inputs(upper)
    return np.minimum(a, b), np.maximum(a, b)


def interval_affine(W, b, lo, hi):
    """Tightest box of ``W a + b`` over ``lo <= a <= hi``."""
    Wp = np.maximum(W, 0.0)
    Wn = np.minimum(W, 0.0)
    return Wp @ lo + Wn @ hi + b, Wp @ hi + Wn @ lo + b


def propagate_bounds(net: QuantileNetwork, lower, upper) -> ActivationBounds:
    """Interval bounds for every preactivation given the (original-unit) input box."""
    lo, hi = _scaled_box(net, lower, upper)
    pre, post = [], [(lo, hi)]
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        m_lo, m_hi = interval_affine(W, b, lo, hi)
        pre.append((m_lo, m_hi))
        if l < net.n_hidden_layers:
            lo, hi = np.maximum(m_lo, 0.0), np.maximum(m_hi, 0.0)
            post.append((lo, hi))
    return ActivationBounds(pre, post)


# -- ReLU encoding ---------------------------------------------------------------

def encode_relu(model: MipModel, z, lo: float, hi: float, name: str = "a"):
    """Add ``a = max(0, z)``; returns ``(a, sigma)`` with ``sigma`` None for stable neurons."""
    lo, hi = float(lo), float(hi)
    if math.isnan(lo) or math.isnan(hi) or lo > hi or math.isinf(lo) or math.isinf(hi):
        raise InvalidBounds(f"invalid preactivation bounds [{lo}, {hi}] for {name}")
    z = milp.as_expr(z)
    if hi <= 0.0:
        return model.add_var(VarKind.CONTINUOUS, 0.0, 0.0, name), None
    if lo >= 0.0:
        a = model.add_var(VarKind.CONTINUOUS, lo, hi, name)
        model.add_constraint(a - z, Relation.EQ, 0.0)
        return a, None
    a = model.add_var(VarKind.CONTINUOUS, 0.0, hi, name)
    s = model.add_var(VarKind.BINARY, 0.0, 1.0, f"sigma_{name}")
    model.add_constraint(z - a, Relation.LE, 0.0)
    model.add_constraint(a - z - lo * s, Relation.LE, -lo)
    model.add_constraint(a - hi * s, Relation.LE, 0.0)
    return a, s


# -- surrogate problem -----------------------------------------------------------

@dataclass(frozen=True)
class SurrogateSpec:
    """Risk settings for the surrogate objective.

    ``delta`` is the quantile-crossing tolerance in target units (``None``
    drops the crossing constraints).  ``tail_side`` defaults to the right
    tail for minimisation and the left tail for maximisation.
    ``tail_divisor="count"`` makes the tail term a true mean over the tail
    levels; ``"complement"`` divides by ``n_quantiles - n_tail`` instead.
    """

    lam: float = 0.0
    alpha: float | None = 0.9
    delta: float | None = UNCONSTRAINED
    tail_side: str | None = None
    tail_divisor: str = "count"

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.lam > 0 and self.alpha is None:
            raise ValueError("a risk-averse surrogate needs alpha")
        if self.delta is not None and not self.delta >= 0:
            raise ValueError("delta must be nonnegative or None")
        if self.tail_side not in (None, "right", "left"):
            raise ValueError("tail_side must be 'right', 'left' or None")
        if self.tail_divisor not in ("count", "complement"):
            raise ValueError("tail_divisor must be 'count' or 'complement'")

    def side_for(self, minimize: bool) -> str:
        return self.tail_side or ("right" if minimize else "left")

    def tail_indices(self, tau, side: str) -> np.ndarray:
        """Indices of the quantile levels averaged in the risk term."""
        tau = np.asarray(tau, dtype=float)
        if self.alpha is None:
            return np.zeros(0, dtype=int)
        if side == "right":
            idx = np.flatnonzero(tau > self.alpha)
        else:
            idx = np.flatnonzero(tau < 1.0 - self.alpha)
        if not 1 <= len(idx) < len(tau):
            raise ValueError(f"alpha={self.alpha} leaves {len(idx)} of {len(tau)} levels in the tail")
        return idx

    def tail_count(self, tau, side: str = "right") -> int:
        return len(self.tail_indices(tau, side))

    def with_delta(self, delta) -> "SurrogateSpec":
        return SurrogateSpec(self.lam, self.alpha, delta, self.tail_side, self.tail_divisor)


@dataclass
class SurrogateSolution:
    x: np.ndarray
    objective: float
    q: np.ndarray
    status: milp.Status
    gap: float
    solve_time: float
    build_time: float
    nodes: int | None = None


@dataclass
class EmbeddedSurrogate:
    model: MipModel
    x_vars: list
    q_vars: list
    sigma_vars: list
    bounds: ActivationBounds
    problem: object = None
    spec: SurrogateSpec | None = None
    build_time: float = 0.0
    objective_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def fix_first_stage(self, x):
        for var, val in zip(self.x_vars, np.asarray(x, dtype=float)):
            self.model.fix(var, val)

    def release_first_stage(self):
        for var, lo, hi in zip(self.x_vars, self.problem.first_lower, self.problem.first_upper):
            var.lower, var.upper = float(lo), float(hi)

    def objective_at(self, x, q) -> float:
        """Surrogate objective evaluated from a first-stage point and its quantiles."""
        lam = self.spec.lam
        first = float(np.dot(self.problem.first_stage_cost, x))
        return (1.0 + lam) * first + float(np.dot(self.objective_weights, q))

    def solve(self, limits: SolveLimits | None = None, backend=None, dump_lp=None) -> SurrogateSolution:
        res = milp.solve(self.model, limits, backend, dump_lp)
        if not res.has_solution:
            raise milp.SolverError(f"surrogate solve returned {res.status.value}: {res.message}")
        x = np.array([res[v] for v in self.x_vars])
        x = np.clip(x, self.problem.first_lower, self.problem.first_upper)
        bm = self.problem.binary_mask
        x[bm] = np.round(x[bm])
        q = np.array([res[v] for v in self.q_vars])
        return SurrogateSolution(x, res.objective, q, res.status, res.gap, res.wall_time,
                                 self.build_time, res.nodes)


def build_surrogate(problem, net: QuantileNetwork, spec: SurrogateSpec | None = None) -> EmbeddedSurrogate:
    """First-stage problem with the network standing in for the recourse distribution."""
    t0 = time.perf_counter()
    spec = spec or SurrogateSpec(lam=0.0)
    if net.n_inputs != problem.n_first:
        raise DimensionMismatch(f"network takes {net.n_inputs} inputs but {problem.name} "
                                f"has {problem.n_first} first-stage variables")
    bounds = propagate_bounds(net, problem.first_lower, problem.first_upper)
    model = MipModel(f"surrogate-{net.kind}-{problem.name}", problem.sense)
    x = problem.add_first_stage(model)

    lo0, hi0 = bounds.post[0]
    a = []
    for j, xj in enumerate(x):
        aj = model.add_var(VarKind.CONTINUOUS, lo0[j], hi0[j], f"a0[{j}]")
        model.add_constraint(aj - (xj - net.input_shift[j]) / net.input_scale[j], Relation.EQ, 0.0)
        a.append(aj)

    sigmas = []
    for l in range(net.n_hidden_layers):
        W, b = net.weights[l], net.biases[l]
        m_lo, m_hi = bounds.pre[l]
        nxt = []
        for j in range(W.shape[0]):
            z = LinExpr.from_arrays(a, W[j], b[j])
            aj, s = encode_relu(model, z, m_lo[j], m_hi[j], f"a{l + 1}[{j}]")
            nxt.append(aj)
            if s is not None:
                sigmas.append(s)
        a = nxt

    W, b = net.weights[-1], net.biases[-1]
    m_lo, m_hi = bounds.pre[-1]
    shift, scale = net.target_shift, net.target_scale
    K = net.n_quantiles
    q = model.add_vars(K, VarKind.CONTINUOUS, -math.inf, math.inf, "q")
    z_out = [LinExpr.from_arrays(a, W[k], b[k]) for k in range(K)]
    if net.kind == "qnn":
        for k in range(K):
            model.add_constraint(q[k] - scale * z_out[k], Relation.EQ, shift)
        if spec.delta is not None:
            for k in range(K - 1):
                model.add_constraint(q[k] - q[k + 1], Relation.LE, float(spec.delta))
    else:
        model.add_constraint(q[0] - scale * z_out[0], Relation.EQ, shift)
        for k in range(1, K):
            inc, s = encode_relu(model, z_out[k], m_lo[k], m_hi[k], f"inc[{k}]")
            if s is not None:
                sigmas.append(s)
            model.add_constraint(q[k] - q[k - 1] - scale * inc, Relation.EQ, 0.0)

    weights = np.full(K, 1.0 / K)
    if spec.lam > 0:
        tail = spec.tail_indices(net.tau, spec.side_for(problem.minimize))
        divisor = len(tail) if spec.tail_divisor == "count" else K - len(tail)
        weights[tail] += spec.lam / divisor
    first = LinExpr.from_arrays(x, (1.0 + spec.lam) * problem.first_stage_cost)
    model.set_objective(first + LinExpr.from_arrays(q, weights))
    return EmbeddedSurrogate(model, x, q, sigmas, bounds, problem, spec,
                             time.perf_counter() - t0, weights)


def solve_surrogate(problem, net, spec=None, limits=None, backend=None, dump_lp=None) -> SurrogateSolution:
    return build_surrogate(problem, net, spec).solve(limits, backend, dump_lp)
