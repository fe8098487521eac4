import numpy as np
import pytest

from qsurrogate import datagen, problems, qnn

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cflp55():
    return problems.make_problem("cflp-5-5")


@pytest.fixture(scope="session")
def investment():
    return problems.make_problem("investment")


@pytest.fixture(scope="session")
def cflp_data(cflp55):
    return datagen.generate(cflp55, 400, seed=3)


@pytest.fixture(scope="session")
def investment_data(investment):
    return datagen.generate(investment, 400, seed=3)


FAST = qnn.TrainConfig(epochs=25, hidden_width=8, learning_rate=1e-2, patience=None)


@pytest.fixture(scope="session")
def small_nets(cflp_data, investment_data):
    """One quickly trained network per (problem, kind)."""
    out = {}
    for name, ds in (("cflp", cflp_data), ("investment", investment_data)):
        for kind in qnn.KINDS:
            out[name, kind] = qnn.train(ds, kind, FAST)[0]
    return out


def random_net(kind, sizes, seed, n_quantiles=None):
    rng = np.random.default_rng(seed)
    W, b = qnn.init_params(sizes, rng)
    n_in = sizes[0]
    tau = qnn.default_tau(sizes[-1] if n_quantiles is None else n_quantiles)
    return qnn.QuantileNetwork(kind, W, b, tau, np.zeros(n_in), np.ones(n_in),
                               target_shift=rng.normal(), target_scale=rng.uniform(0.5, 3.0))
