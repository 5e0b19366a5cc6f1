import csv
import io
import json
import math

import numpy as np
import pytest
import scipy.io
from hypothesis import given, settings, strategies as st

from fdmstar.expcli import (
    ConfigError,
    ExperimentConfig,
    fit_slope,
    load_config,
    main,
    parse_config_text,
    report_nnz,
    run_poisson,
)
from fdmstar.refelem import reference_operators


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_config_round_trip():
    cfg = ExperimentConfig(problem="elasticity-mixed", degrees=[3, 7], lambdas=[1.0, math.inf],
                           pair="rt-dq", krylov="gmres30", rtol=1e-10, skip_boundary=True)
    back = ExperimentConfig.from_mapping(parse_config_text(cfg.to_text()))
    assert back == cfg


@given(st.lists(st.integers(2, 40), min_size=1, max_size=4),
       st.lists(st.floats(0, 1e6, allow_nan=False) | st.just(math.inf), min_size=1, max_size=4),
       st.floats(1e-14, 0.5))
@settings(max_examples=40, deadline=None)
def test_config_round_trip_property(degrees, lambdas, rtol):
    cfg = ExperimentConfig(problem="elasticity-primal", degrees=degrees, lambdas=lambdas, rtol=rtol)
    assert ExperimentConfig.from_mapping(parse_config_text(cfg.to_text())) == cfg


def test_config_file_with_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# table\nproblem = elasticity-primal\ndegree = 3, 5\nlambda = 1, inf\n"
                    "smoother.damping_formula = standard  # harmonic-midpoint rule\n")
    cfg = load_config(path, degree="7")
    assert cfg.degrees == [7] and cfg.lambdas == [1.0, math.inf]
    assert cfg.damping_formula == "standard"


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown configuration key"):
        ExperimentConfig.from_mapping({"degreee": "3"})
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("dim = 2\nnonsense\n")
    with pytest.raises(ConfigError, match="2D only"):
        ExperimentConfig.from_mapping({"problem": "elasticity-mixed", "dim": "3"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"degree": "1"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"smoother.damping": "-1"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"krylov": "bicgstab"})


def test_cli_exit_code_on_bad_config(capsys, tmp_path):
    assert main(["elasticity-mixed", "--dim", "3"]) == 2
    assert "2D only" in capsys.readouterr().err
    assert main(["elasticity-primal", "--lambda", "inf"]) == 2
    assert main(["elasticity-mixed", "--krylov", "pcg"]) == 2
    assert main(["poisson", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert main(["poisson", "--mesh", "parallelogram", "--disc", "dg", "--degree", "2"]) == 2


def test_poisson_csv_is_reproducible(tmp_path):
    outs = []
    for k in range(2):
        path = tmp_path / f"out{k}.csv"
        assert main(["poisson", "--degree", "3,4", "--cells", "2", "--no-timings", "--output", str(path)]) == 0
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    rows = read_csv(outs[0].decode())
    assert [r["p"] for r in rows] == ["3", "4"]
    assert rows[0]["factor_time"] == "nan"
    assert all(r["converged"] == "true" and int(r["iterations"]) <= 12 for r in rows)


def test_single_cell_quadratic_solves_in_one_iteration():
    # one free DOF: the preconditioned operator is a positive scalar
    cfg = ExperimentConfig(degrees=[2], cells=1)
    (row,) = run_poisson(cfg)
    assert row.ndofs == 1 and row.iterations == 1


def test_json_manifest(tmp_path, capsys):
    assert main(["poisson", "--degree", "3", "--cells", "2", "--format", "json", "--no-timings"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"config", "environment", "git_revision", "rows"}
    assert doc["config"]["degree"] == [3]
    assert {"numpy", "scipy", "python"} <= set(doc["environment"])
    assert doc["rows"][0]["problem"] == "poisson-cg"


def test_history_file(tmp_path):
    hist = tmp_path / "hist.csv"
    out = tmp_path / "out.csv"
    assert main(["poisson", "--degree", "3", "--cells", "2", "--history", str(hist), "--output", str(out)]) == 0
    rows = read_csv(hist.read_text())
    assert rows[0]["iteration"] == "0" and float(rows[0]["relative_residual"]) == 1.0
    assert float(rows[-1]["relative_residual"]) <= 1e-8


def test_mixed_driver_small(capsys):
    assert main(["elasticity-mixed", "--pair", "rt-dq", "--degree", "3", "--cells", "2",
                 "--lambda", "inf", "--no-timings"]) == 0
    (row,) = read_csv(capsys.readouterr().out)
    assert row["lam"] == "inf" and row["converged"] == "true"
    assert float(row["div_ratio"]) < 1e-6


def test_primal_driver_small(capsys):
    assert main(["elasticity-primal", "--degree", "3", "--cells", "2", "--lambda", "0,100"]) == 0
    rows = read_csv(capsys.readouterr().out)
    assert int(rows[0]["iterations"]) < int(rows[1]["iterations"])


def test_report_nnz_small_patch():
    (row,) = report_nnz(ExperimentConfig(degrees=[3]))
    # 2 x 2 cells of degree 3 without the outer boundary: (2 * 3 - 1)^2 DOFs
    assert row.ndofs == 25
    assert row.interior_row_nnz == 3
    assert 0 < row.ratio < 1.5


def test_dump_operators(tmp_path):
    out = tmp_path / "ops"
    assert main(["dump-operators", "--degree", "3", "--cells", "2", "--output", str(out)]) == 0
    A_hat = np.loadtxt(out / "A_hat_p3.csv", delimiter=",")
    np.testing.assert_array_equal(A_hat, reference_operators(3).A_hat)
    A = scipy.io.mmread(str(out / "A_p3_l0.mtx"))
    assert A.shape == (25, 25)
    assert (out / "A_tilde_p3_l0.mtx").exists() and (out / "S_p3_l0.mtx").exists()


def test_bench_small(capsys):
    assert main(["bench", "--degree", "3,5", "--format", "csv"]) == 0
    rows = read_csv(capsys.readouterr().out)
    phases = {r["phase"] for r in rows}
    assert phases == {"chol_setup", "chol_solve", "fdm_apply"}
    slopes = [r for r in rows if r["p"] == ""]
    assert len(slopes) == 3 and all(r["slope"] != "nan" for r in slopes)


def test_fit_slope():
    p = np.array([4, 8, 16, 32])
    assert fit_slope(p, 3.0 * p**2.0) == pytest.approx(2.0)
    assert fit_slope(p[:2], p[:2] ** 3.0) == pytest.approx(3.0)
