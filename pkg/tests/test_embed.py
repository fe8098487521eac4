import math

import numpy as np
import pytest

from conftest import random_net
from qsurrogate import embed, milp, qnn
from qsurrogate.embed import SurrogateSpec, build_surrogate, encode_relu, propagate_bounds
from qsurrogate.errors import DimensionMismatch, InvalidBounds, UnboundedInput
from qsurrogate.milp import MipModel, Relation, Status, VarKind


def single_neuron(w, b):
    W = np.array([w], dtype=float)
    return qnn.QuantileNetwork("qnn", [W, np.ones((1, 1))], [np.array([b], float), np.zeros(1)],
                               [0.5], np.zeros(W.shape[1]), np.ones(W.shape[1]))


# -- bounds --------------------------------------------------------------------

def test_interval_bounds_by_hand():
    bounds = propagate_bounds(single_neuron([1.0, -1.0], 0.0), [0, 0], [1, 1])
    lo, hi = bounds.pre[0]
    assert lo.tolist() == [-1.0] and hi.tolist() == [1.0]
    assert bounds.post[1][0].tolist() == [0.0] and bounds.post[1][1].tolist() == [1.0]


def test_zero_weights_give_point_bounds():
    net = qnn.QuantileNetwork("qnn", [np.zeros((3, 2)), np.zeros((4, 3))],
                              [np.array([1.0, -2.0, 0.5]), np.array([0.1, 0.2, 0.3, 0.4])],
                              qnn.default_tau(4), np.zeros(2), np.ones(2))
    b = propagate_bounds(net, [-5, -5], [5, 5])
    for layer, bias in zip(b.pre, net.biases):
        assert np.array_equal(layer[0], bias) and np.array_equal(layer[1], bias)


@pytest.mark.parametrize("seed", range(4))
def test_bounds_are_valid_by_sampling(seed):
    net = random_net("iqnn", [3, 12, 12, 6], seed)
    lo, hi = np.array([-1.0, 0.0, 2.0]), np.array([1.0, 3.0, 2.5])
    b = propagate_bounds(net, lo, hi)
    X = np.random.default_rng(seed).uniform(lo, hi, size=(5000, 3))
    a = net.scale_inputs(X)
    for l, (W, bias) in enumerate(zip(net.weights, net.biases)):
        z = a @ W.T + bias
        assert np.all(z >= b.pre[l][0] - 1e-12) and np.all(z <= b.pre[l][1] + 1e-12)
        a = np.maximum(z, 0)


def test_shrinking_box_never_loosens():
    net = random_net("qnn", [2, 10, 5], seed=7)
    wide = propagate_bounds(net, [-2, -2], [2, 2])
    narrow = propagate_bounds(net, [-1, 0], [1, 1.5])
    for (wl, wh), (nl, nh) in zip(wide.pre, narrow.pre):
        assert np.all(nl >= wl - 1e-12) and np.all(nh <= wh + 1e-12)


def test_unbounded_box_rejected():
    with pytest.raises(UnboundedInput):
        propagate_bounds(single_neuron([1.0], 0.0), [0.0], [math.inf])


# -- ReLU encoding -------------------------------------------------------------

def _relu_model(z_value, lo, hi):
    m = MipModel()
    z = m.add_var(VarKind.CONTINUOUS, -10, 10, "z")
    m.add_constraint(z, Relation.EQ, z_value)
    a, s = encode_relu(m, z, lo, hi)
    return m, a, s


def test_relu_positive_input():
    m, a, s = _relu_model(3.0, -5.0, 5.0)
    for backend in ("highs", "enumerate"):
        res = milp.solve(m, backend=backend)
        assert res[a] == pytest.approx(3.0, abs=1e-9) and res[s] == 1.0


def test_relu_negative_input():
    m, a, s = _relu_model(-2.0, -5.0, 5.0)
    m.set_objective(-1.0 * a)  # try to push a up; the encoding must hold it at 0
    res = milp.solve(m)
    assert res[a] == pytest.approx(0.0, abs=1e-9)


def test_dead_and_linear_neurons_need_no_binary():
    m, a, s = _relu_model(-2.0, -3.0, -1.0)
    assert s is None and m.n_binaries == 0 and a.upper == 0.0
    m2, a2, s2 = _relu_model(2.0, 1.0, 4.0)
    assert s2 is None and m2.n_binaries == 0
    assert milp.solve(m2)[a2] == pytest.approx(2.0)


@pytest.mark.parametrize("lo, hi", [(1.0, -1.0), (math.nan, 1.0), (-math.inf, 1.0)])
def test_invalid_bounds(lo, hi):
    m = MipModel()
    z = m.add_var(VarKind.CONTINUOUS, -1, 1)
    with pytest.raises(InvalidBounds):
        encode_relu(m, z, lo, hi)


# -- surrogate spec ------------------------------------------------------------

def test_tail_count_on_default_grid():
    tau = qnn.default_tau()
    spec = SurrogateSpec(lam=1.0, alpha=0.9)
    assert spec.tail_count(tau, "right") == 5
    np.testing.assert_allclose(tau[spec.tail_indices(tau, "right")], [0.91, 0.93, 0.95, 0.97, 0.99])
    np.testing.assert_allclose(tau[spec.tail_indices(tau, "left")], [0.01, 0.03, 0.05, 0.07, 0.09])
    with pytest.raises(ValueError):
        SurrogateSpec(lam=1.0, alpha=0.995).tail_indices(tau, "right")
    with pytest.raises(ValueError):
        SurrogateSpec(lam=1.0, alpha=None)
    with pytest.raises(ValueError):
        SurrogateSpec(delta=-1.0)


# -- surrogate model -----------------------------------------------------------

def _fixed_solve(sur, x, backend=None):
    sur.fix_first_stage(x)
    res = milp.solve(sur.model, backend=backend)
    return res, np.array([res[v] for v in sur.q_vars]) if res.has_solution else None


@pytest.mark.parametrize("kind", qnn.KINDS)
@pytest.mark.parametrize("problem_name", ["cflp", "investment"])
def test_fixed_x_solves_reproduce_forward(small_nets, cflp55, investment, kind, problem_name):
    problem = cflp55 if problem_name == "cflp" else investment
    net = small_nets[problem_name, kind]
    sur = build_surrogate(problem, net, SurrogateSpec())
    rng = np.random.default_rng(0)
    for _ in range(10):
        x = problem.sample_feasible_first_stage(rng)
        res, q = _fixed_solve(sur, x)
        np.testing.assert_allclose(q, net.forward(x), atol=1e-6, rtol=0)


@pytest.mark.parametrize("kind", qnn.KINDS)
def test_enumeration_oracle_agrees_on_tiny_nets(investment, kind):
    net = random_net(kind, [2, 4, 5], seed=11)
    net = qnn.QuantileNetwork(kind, net.weights, net.biases, net.tau, [0.0, 0.0], [5.0, 5.0],
                              net.target_shift, net.target_scale)
    for spec in (SurrogateSpec(), SurrogateSpec(lam=0.5, alpha=0.7)):
        sur = build_surrogate(investment, net, spec)
        assert sur.model.n_binaries <= 20
        r_h = milp.solve(sur.model, milp.SolveLimits(gap_tol=1e-9))
        r_e = milp.solve(sur.model, backend="enumerate")
        assert r_h.objective == pytest.approx(r_e.objective, abs=1e-6)
        x = np.array([r_e[v] for v in sur.x_vars])
        q = net.forward(x)
        assert sur.objective_at(x, q) == pytest.approx(r_e.objective, abs=1e-6)


def test_objective_consistency_at_solution(small_nets, cflp55):
    net = small_nets["cflp", "iqnn"]
    spec = SurrogateSpec(lam=0.8, alpha=0.9)
    sur = build_surrogate(cflp55, net, spec)
    sol = sur.solve()
    q = net.forward(sol.x)
    tail = q[spec.tail_indices(net.tau, "right")]
    expected = 1.8 * cflp55.first_stage_value(sol.x) + q.mean() + 0.8 * tail.mean()
    assert sol.objective == pytest.approx(expected, abs=1e-6)
    assert sur.objective_at(sol.x, sol.q) == pytest.approx(sol.objective, abs=1e-8)


def test_risk_neutral_objective_collapses(small_nets, investment):
    net = small_nets["investment", "qnn"]
    sur = build_surrogate(investment, net, SurrogateSpec(lam=0.0))
    np.testing.assert_allclose(sur.objective_weights, 1.0 / net.n_quantiles)
    assert sur.model.sense is milp.Sense.MAXIMIZE


def test_complement_divisor_switch(small_nets, cflp55):
    net = small_nets["cflp", "qnn"]
    a = build_surrogate(cflp55, net, SurrogateSpec(lam=1.0, alpha=0.9))
    b = build_surrogate(cflp55, net, SurrogateSpec(lam=1.0, alpha=0.9, tail_divisor="complement"))
    assert a.objective_weights[-1] == pytest.approx(1 / 50 + 1 / 5)
    assert b.objective_weights[-1] == pytest.approx(1 / 50 + 1 / 45)


def test_binary_count_matches_unstable_neurons(small_nets, cflp55):
    for kind in qnn.KINDS:
        net = small_nets["cflp", kind]
        sur = build_surrogate(cflp55, net, SurrogateSpec())
        units = [(l, j) for l in range(net.n_hidden_layers) for j in range(net.weights[l].shape[0])]
        unstable = sum(sur.bounds.pre[l][0][j] < 0 < sur.bounds.pre[l][1][j] for l, j in units)
        if kind == "iqnn":
            lo, hi = sur.bounds.pre[-1]
            unstable += int(np.sum((lo[1:] < 0) & (hi[1:] > 0)))
        assert len(sur.sigma_vars) == unstable == sur.model.n_binaries - cflp55.n_first


def test_zero_delta_detects_crossings(small_nets, cflp55):
    net = small_nets["cflp", "qnn"]
    sur = build_surrogate(cflp55, net, SurrogateSpec(delta=0.0))
    for bits in np.ndindex(*(2,) * 5):
        x = np.array(bits, dtype=float)
        res, _ = _fixed_solve(sur, x)
        crosses = np.any(np.diff(net.forward(x)) < -1e-7)
        assert (res.status is Status.INFEASIBLE) == crosses


@pytest.mark.parametrize("x0, crosses", [(0.0, True), (2.4, True), (2.6, False), (5.0, False)])
def test_zero_delta_detector_both_ways(investment, x0, crosses):
    # q = (0, x0 - 2.5): crossing exactly when x0 < 2.5
    net = qnn.QuantileNetwork("qnn", [np.array([[1.0, 0.0]]), np.array([[0.0], [5.0]])],
                              [np.zeros(1), np.array([0.0, -2.5])], [0.3, 0.7], [0.0, 0.0], [5.0, 5.0])
    sur = build_surrogate(investment, net, SurrogateSpec(delta=0.0))
    res, _ = _fixed_solve(sur, [x0, 1.0])
    assert (res.status is Status.INFEASIBLE) == crosses
    sur_wide = build_surrogate(investment, net, SurrogateSpec(delta=2.5))
    assert _fixed_solve(sur_wide, [x0, 1.0])[0].status is Status.OPTIMAL


def test_iqnn_ignores_delta(small_nets, cflp55):
    net = small_nets["cflp", "iqnn"]
    a = build_surrogate(cflp55, net, SurrogateSpec(delta=0.0))
    b = build_surrogate(cflp55, net, SurrogateSpec())
    assert len(a.model.constraints) == len(b.model.constraints)


def test_dimension_mismatch(small_nets, investment):
    with pytest.raises(DimensionMismatch):
        build_surrogate(investment, small_nets["cflp", "qnn"])


def test_release_restores_box(small_nets, investment):
    sur = build_surrogate(investment, small_nets["investment", "iqnn"])
    sur.fix_first_stage([1.0, 2.0])
    sur.release_first_stage()
    assert [v.upper for v in sur.x_vars] == [5.0, 5.0]
    assert embed.solve_surrogate(investment, small_nets["investment", "iqnn"]).status.value == "optimal"


@pytest.mark.parametrize("problem_name", ["cflp", "investment"])
def test_tail_value_improves_with_lambda(small_nets, cflp55, investment, problem_name):
    # weighting the tail more can only move the optimum towards a better surrogate tail
    problem = cflp55 if problem_name == "cflp" else investment
    net = small_nets[problem_name, "iqnn"]
    side = "right" if problem.minimize else "left"
    tails = []
    for lam in (0.0, 0.5, 1.0, 4.0):
        spec = SurrogateSpec(lam=lam, alpha=0.9)
        sol = build_surrogate(problem, net, spec).solve(milp.SolveLimits(gap_tol=1e-9))
        q = net.forward(sol.x)
        tails.append(problem.first_stage_value(sol.x) + q[spec.tail_indices(net.tau, side)].mean())
    steps = np.diff(tails) if problem.minimize else -np.diff(tails)
    assert np.all(steps <= 1e-6 * (1 + np.abs(tails[:-1])))
