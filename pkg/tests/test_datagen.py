import numpy as np
import pytest

from qsurrogate import datagen
from qsurrogate.errors import FormatError


def test_samples_are_feasible_and_reproducible(investment):
    ds = datagen.generate(investment, 30, seed=11)
    assert len(ds) == 30 and ds.n_first == 2
    assert all(investment.is_feasible_first_stage(x) for x in ds.X)
    again = datagen.generate(investment, 30, seed=11)
    assert again.content_hash() == ds.content_hash()
    assert datagen.generate(investment, 30, seed=12).content_hash() != ds.content_hash()


def test_value_equals_single_scenario_solve(cflp55):
    ds = datagen.generate(cflp55, 8, seed=2)
    for i in (0, 5):
        x, xi = datagen.draw_sample_inputs(cflp55, 2, i)
        assert np.array_equal(x, ds.X[i])
        assert ds.y[i] == cflp55.second_stage_value(x, xi)


def test_independent_of_worker_count(investment):
    serial = datagen.generate(investment, 12, seed=4, workers=1)
    parallel = datagen.generate(investment, 12, seed=4, workers=2)
    assert np.array_equal(serial.X, parallel.X)
    assert np.array_equal(serial.y, parallel.y)


def test_prefix_stability(investment):
    """Sample i does not depend on how many samples are requested."""
    short = datagen.generate(investment, 5, seed=8)
    long = datagen.generate(investment, 9, seed=8)
    assert np.array_equal(short.X, long.X[:5])


def test_csv_round_trip(tmp_path, cflp55):
    ds = datagen.generate(cflp55, 10, seed=1)
    path = tmp_path / "d.csv"
    datagen.save_dataset(ds, path)
    back = datagen.load_dataset(path)
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert back.problem_name == "cflp-5-5" and back.generator_seed == 1
    assert back.binary.all()
    assert path.read_text().splitlines()[0] == "x_0,x_1,x_2,x_3,x_4,value"


def test_load_without_sidecar(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("x_0,x_1,value\n0,2.5,1\n1,0.5,2\n")
    ds = datagen.load_dataset(path)
    assert ds.binary.tolist() == [True, False]
    assert ds.upper.tolist() == [1.0, 2.5]


@pytest.mark.parametrize("body, needle", [
    ("a,b\n1,2\n", "row 1"),
    ("x_0,value\n1\n", "row 2"),
    ("x_0,value\n1,abc\n", "row 2"),
    ("x_0,value\n1,2\n1,nan\n", "row 3"),
    ("x_0,value\n", "no data"),
    ("", "empty"),
])
def test_malformed_csv(tmp_path, body, needle):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(FormatError, match=needle):
        datagen.load_dataset(path)


def test_rejects_zero_samples(investment):
    with pytest.raises(ValueError):
        datagen.generate(investment, 0, seed=0)
