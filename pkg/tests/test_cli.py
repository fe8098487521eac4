import json

import numpy as np
import pytest

from oracles import brute_force_cflp, brute_force_investment, sorted_tail_cvar
from qsurrogate import cli, problems

SUBCOMMANDS = ["gen-data", "train", "solve", "evaluate", "select-delta", "delta-sensitivity", "benchmark"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_data_writes_rows(tmp_path, capsys):
    out = tmp_path / "d.csv"
    code, stdout, _ = run(capsys, "gen-data", "--problem", "cflp-5-5", "--samples", 1000, "--seed", 1,
                          "--out", out)
    assert code == 0
    assert len(out.read_text().splitlines()) == 1001
    assert "1000 rows" in stdout
    assert (tmp_path / "d.csv.json").exists()


def test_gen_data_missing_problem(capsys):
    code, _, err = run(capsys, "gen-data", "--samples", 5)
    assert code == 2 and "usage" in err


def test_gen_data_unwritable(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--problem", "cflp-5-5", "--samples", 5,
                       "--out", tmp_path / "missing" / "d.csv")
    assert code == 1 and "does not exist" in err


@pytest.mark.parametrize("command", SUBCOMMANDS)
def test_help_lists_flags_and_defaults(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    parser = cli._all_subparsers(cli.build_parser())[command]
    for action in parser._actions:
        if action.option_strings and action.dest != "help":
            assert action.option_strings[-1] in text
            assert action.help
    assert "default" in text


@pytest.fixture(scope="module")
def trained_model(tmp_path_factory):
    d = tmp_path_factory.mktemp("flow")
    assert cli.main(["gen-data", "--problem", "cflp-5-5", "--samples", "200", "--seed", "4",
                     "--out", str(d / "d.csv")]) == 0
    assert cli.main(["train", "--data", str(d / "d.csv"), "--kind", "iqnn", "--epochs", "15",
                     "--hidden-width", "8", "--learning-rate", "0.01", "--out", str(d / "m.json")]) == 0
    return d


def test_train_solve_evaluate_flow(trained_model, capsys):
    d = trained_model
    code, out, _ = run(capsys, "solve", "--problem", "cflp-5-5", "--model", d / "m.json",
                       "--out", d / "sol.json")
    assert code == 0 and out.startswith("x = ")
    sol = json.loads((d / "sol.json").read_text())
    assert sol["status"] == "optimal" and len(sol["x"]) == 5 and sol["wall_time"] < 60
    code, out, _ = run(capsys, "evaluate", "--problem", "cflp-5-5", "--solution", d / "sol.json",
                       "--scenarios", 5, "--lam", 0.5)
    row = json.loads(out)
    assert code == 0 and row["x"] == sol["x"] and row["n_scenarios"] == 5
    assert row["total"] == pytest.approx(1.5 * row["first_stage"] + row["expectation_part"] + 0.5 * row["cvar_part"])


def test_solve_is_seed_deterministic(trained_model, capsys):
    d = trained_model
    outs = []
    for name in ("a.json", "b.json"):
        run(capsys, "solve", "--problem", "cflp-5-5", "--method", "saa", "--scenarios", 5, "--seed", 3,
            "--out", d / name)
        outs.append(json.loads((d / name).read_text()))
    assert outs[0]["x"] == outs[1]["x"] and outs[0]["objective"] == outs[1]["objective"]


def test_dimension_mismatch(trained_model, capsys):
    code, _, err = run(capsys, "solve", "--problem", "investment", "--model", trained_model / "m.json",
                       "--out", trained_model / "x.json")
    assert code == 1 and "dimension mismatch" in err
    code, _, err = run(capsys, "evaluate", "--problem", "investment", "--x", "1,2,3")
    assert code == 1 and "dimension mismatch" in err


def test_kind_mismatch_for_delta_selection(trained_model, capsys):
    code, _, err = run(capsys, "select-delta", "--problem", "cflp-5-5", "--model", trained_model / "m.json")
    assert code == 1 and "qnn" in err


@pytest.mark.parametrize("name, x, oracle", [
    ("investment", [1.0, 2.0], brute_force_investment),
    ("cflp-5-5", [1.0, 0.0, 1.0, 0.0, 0.0], brute_force_cflp),
])
def test_evaluate_hand_built_scenarios(tmp_path, capsys, name, x, oracle):
    problem = problems.make_problem(name)
    if name == "investment":
        xi = [[5.0, 5.0], [7.0, 12.0], [10.0, 15.0], [15.0, 6.0]]
    else:
        xi = [[1.0] * 5, [1.5, 0.5, 1.0, 2.0, 1.2], [0.5] * 5, [2.0, 2.0, 0.1, 1.0, 1.0]]
    weights = [0.1, 0.2, 0.3, 0.4]
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"xi": xi, "weights": weights}))
    code, out, _ = run(capsys, "evaluate", "--problem", name, "--x", ",".join(map(str, x)),
                       "--scenario-file", path, "--lam", 1.0, "--alpha", 0.75)
    assert code == 0
    row = json.loads(out)
    values = np.array([oracle(np.array(x), np.array(s), problem) for s in xi])
    w = np.array(weights)
    if problem.minimize:
        expected = sorted_tail_cvar(values, w, 0.75)
    else:
        expected = -sorted_tail_cvar(-values, w, 0.75)
    assert row["cvar_part"] == pytest.approx(expected, rel=1e-9)
    assert row["expectation_part"] == pytest.approx(float(values @ w), rel=1e-9)


def test_benchmark_row_count(tmp_path, capsys):
    code, out, _ = run(capsys, "benchmark", "--problem", "cflp-5-5", "--methods", "qnn,iqnn,saa",
                       "--lambdas", "0,0.5", "--alphas", "0.9", "--samples", 100, "--epochs", 3,
                       "--deltas", "unconstrained", "--saa-scenarios", 5, "--eval-sizes", "5,8",
                       "--eval-count", 2, "--out-dir", tmp_path)
    assert code == 0
    lines = (tmp_path / "benchmark.csv").read_text().splitlines()
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 3 * 2 * 2
    methods = [r[1] for r in rows]
    assert methods == ["qnn", "iqnn", "saa"] * 4
    assert (tmp_path / "benchmark.md").exists()


def test_config_file_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": "investment", "samples": 7, "seed": 2}))
    code, out, _ = run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "a.csv")
    assert code == 0 and "7 rows" in out
    code, out, _ = run(capsys, "gen-data", "--config", cfg, "--samples", 3, "--out", tmp_path / "b.csv")
    assert code == 0 and "3 rows" in out
    a = (tmp_path / "a.csv").read_text().splitlines()
    b = (tmp_path / "b.csv").read_text().splitlines()
    assert a[:4] == b  # same seed from the file, shorter run


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"problem": "investment", "sampels": 7}))
    code, _, err = run(capsys, "gen-data", "--config", cfg)
    assert code == 2 and "sampels" in err
