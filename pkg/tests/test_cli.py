import csv

import numpy as np
import pytest

from provprof.cli import EXIT_ESTIMATION, EXIT_FAIL, EXIT_OK, EXIT_VALIDATION, fmt, main, parse_learner
from provprof.dataset import from_arrays, load_csv, make_folds
from provprof.targeting import EstimationConfig, compute_all
from conftest import glm_config, synthetic


def write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def dataset_csv(path, d):
    rows = [[y, a, *w] for y, a, w in zip(d.outcomes, np.array(d.labels)[d.providers], d.covariates)]
    return write_rows(path, ["y", "provider"] + [f"w{j + 1}" for j in range(d.covariates.shape[1])],
                      rows)


GLM = ["--propensity-learners", "glm", "--outcome-learners", "glm"]


def test_toy4_smr(tmp_path):
    inp = write_rows(tmp_path / "toy4.csv", ["y", "provider", "w1"],
                     [[1, 1, 0.5], [0, 1, 0.5], [1, 2, 0.5], [1, 2, 0.5]])
    out = tmp_path / "out"
    code = main(["estimate", str(inp), "--parameters", "psi1,psi2,smr", "--folds", "1",
                 "--output-dir", str(out), *GLM])
    assert code == EXIT_OK
    rows = read_rows(out / "estimates.csv")
    assert [float(r["smr"]) for r in rows] == pytest.approx([2 / 3, 4 / 3], abs=1e-8)
    assert list(rows[0]) == ["provider_label", "n_a", "psi1", "se_psi1", "ci_lo_psi1", "ci_hi_psi1",
                             "psi2", "se_psi2", "ci_lo_psi2", "ci_hi_psi2", "smr", "se_smr",
                             "ci_lo_smr", "ci_hi_smr", "positivity_flag", "notes"]
    assert (out / "positivity.csv").exists()


def _violating_csv(tmp_path):
    rng = np.random.default_rng(0)
    n = 400
    W = rng.random(n)
    A = np.where(W < 0.3, rng.integers(1, 3, n), 1)  # provider 2 never treats W >= 0.3
    Y = W + rng.normal(size=n) * 0.1
    return write_rows(tmp_path / "viol.csv", ["y", "provider", "w1"], zip(Y, A, W))


def test_strict_positivity_refuses_phi(tmp_path, caplog):
    inp = _violating_csv(tmp_path)
    out = tmp_path / "out"
    args = ["estimate", str(inp), "--folds", "2", "--output-dir", str(out), *GLM]
    assert main(args) == EXIT_ESTIMATION
    assert "providers 2" in caplog.text
    flags = {r["provider_label"]: r["flag"] for r in read_rows(out / "positivity.csv")}
    assert flags["2"] == "practical_violation"
    assert main(args + ["--force-direct"]) == EXIT_OK
    rows = read_rows(out / "estimates.csv")
    assert "force-direct" in rows[1]["notes"]
    # indirect parameters alone are never refused
    assert main(["estimate", str(inp), "--folds", "2", "--parameters", "psi2,smr",
                 "--output-dir", str(tmp_path / "o2"), *GLM]) == EXIT_OK


def test_estimate_byte_identical(tmp_path):
    inp = dataset_csv(tmp_path / "d.csv", synthetic(300, 3, 2, seed=1))
    outs = []
    for k in range(2):
        out = tmp_path / f"o{k}"
        assert main(["estimate", str(inp), "--folds", "3", "--seed", "5", "--output-dir", str(out),
                     "--propensity-learners", "glm, gbt(trees=20)", "--outcome-learners",
                     "glm, knn(k=5)"]) == EXIT_OK
        outs.append((out / "estimates.csv").read_bytes() + (out / "positivity.csv").read_bytes())
    assert outs[0] == outs[1]


def test_estimates_round_trip_9_digits(tmp_path):
    d = synthetic(250, 3, 2, seed=2)
    inp = dataset_csv(tmp_path / "d.csv", d)
    out = tmp_path / "o"
    assert main(["estimate", str(inp), "--folds", "2", "--seed", "3", "--output-dir", str(out),
                 *GLM]) == EXIT_OK
    rows = read_rows(out / "estimates.csv")
    dd = load_csv(inp)
    pe = compute_all(dd, make_folds(dd, 2, 3), EstimationConfig(nuisance=glm_config()))
    for a, r in enumerate(rows):
        for p in pe.parameters:
            for col, arr in ((p, pe.estimate), (f"se_{p}", pe.se), (f"ci_lo_{p}", pe.ci_lo)):
                assert float(r[col]) == pytest.approx(arr[p][a], rel=1e-8, abs=1e-300), col
                assert r[col] == fmt(arr[p][a])


def test_validation_errors(tmp_path):
    assert main(["estimate", str(tmp_path / "missing.csv"), "--output-dir", str(tmp_path)]) == EXIT_VALIDATION
    inp = dataset_csv(tmp_path / "d.csv", synthetic(100, 2, 1, seed=0))
    assert main(["estimate", str(inp), "--parameters", "nope"]) == EXIT_VALIDATION
    assert main(["estimate", str(inp), "--level", "1.5"]) == EXIT_VALIDATION
    assert main(["estimate", str(inp), "--covariates", "zz"]) == EXIT_VALIDATION


def test_config_file_and_print_config(tmp_path, capsys):
    inp = dataset_csv(tmp_path / "d.csv", synthetic(150, 2, 1, seed=0))
    ini = tmp_path / "run.ini"
    ini.write_text(f"[run]\ninput = {inp}\nparameters = psi2, smr\nfolds = 2\nseed = 4\n"
                   f"output_dir = {tmp_path / 'o'}\n\n[learner.propensity]\nmembers = glm\n\n"
                   "[learner.outcome]\nmembers = glm, gbt(trees=10, depth=2)\n", encoding="utf-8")
    assert main(["estimate", "--config", str(ini), "--seed", "9", "--print-config"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "seed = 9" in text and "parameters = psi2, smr" in text
    assert "gbt(depth=2,trees=10)" in text
    assert list(read_rows(tmp_path / "o" / "estimates.csv")[0])[2] == "psi2"
    # the echoed configuration reproduces the run
    again = tmp_path / "again.ini"
    again.write_text(text.replace(str(tmp_path / "o"), str(tmp_path / "o2")), encoding="utf-8")
    assert main(["estimate", "--config", str(again)]) == EXIT_OK
    assert (tmp_path / "o" / "estimates.csv").read_bytes() == (tmp_path / "o2" / "estimates.csv").read_bytes()
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nfoo = 1\n", encoding="utf-8")
    assert main(["estimate", "--config", str(bad)]) == EXIT_VALIDATION


def test_parse_learner():
    spec = parse_learner("gbt(trees=50, depth=2)")
    assert spec.kind == "gbt" and spec.label() == "gbt(depth=2,trees=50)"
    with pytest.raises(ValueError):
        parse_learner("gbt(trees=")


SIM_ARGS = ["simulate", "--study", "sim1", "--N", "300", "--m", "3", "--replicates", "2",
            "--seed", "7", "--folds", "2", "--threads", "1"]


def test_simulate_schema_and_determinism(tmp_path):
    outs = []
    for k in range(2):
        path = tmp_path / f"s{k}.csv"
        assert main(SIM_ARGS + ["--output", str(path), "--audit", str(tmp_path / f"a{k}.csv")]) == EXIT_OK
        outs.append(path.read_bytes() + (tmp_path / f"a{k}.csv").read_bytes())
    assert outs[0] == outs[1]
    rows = read_rows(tmp_path / "s0.csv")
    assert list(rows[0]) == ["study", "scenario", "estimator", "parameter", "N", "ME", "MAE",
                             "coverage", "replicates", "failures"]
    assert {(r["estimator"], r["parameter"]) for r in rows} >= {
        (e, p) for e in ("tmle", "glm") for p in ("phi", "psi2", "er", "smr")}


def test_simulate_unknown_scenario(tmp_path):
    assert main(["simulate", "--study", "sim2", "--scenario", "s9", "--output",
                 str(tmp_path / "x.csv")]) == EXIT_VALIDATION
    assert main(SIM_ARGS + ["--scenario", "s2", "--output", str(tmp_path / "y.csv")]) == EXIT_VALIDATION


def _estimates_for_funnel(tmp_path, cols=("provider_label", "smr", "se_smr")):
    rows = [["A", 0.5, 0.01], ["B", 1.0, 0.1], ["C", 1.1, 0.2]]
    return write_rows(tmp_path / "est.csv", list(cols), rows)


def test_funnel_outputs(tmp_path):
    est = _estimates_for_funnel(tmp_path)
    svg = tmp_path / "f.svg"
    assert main(["funnel", str(est), "--output", str(tmp_path / "f.csv"), "--svg", str(svg)]) == EXIT_OK
    rows = read_rows(tmp_path / "f.csv")
    pts = [r for r in rows if r["record"] == "point"]
    assert [p["classification"] for p in pts] == ["low at 99.9%", "within limits", "within limits"]
    limits = [r for r in rows if r["record"] == "limit"]
    assert len(limits) == 3 * 200
    assert svg.read_text(encoding="utf-8").count("<circle") == 3
    assert main(["funnel", str(est), "--levels", "", "--output", str(tmp_path / "g.csv")]) == EXIT_OK
    assert len(read_rows(tmp_path / "g.csv")) == 3 + 600


def test_funnel_missing_columns(tmp_path):
    est = _estimates_for_funnel(tmp_path, ("provider_label", "smr", "se_psi2"))
    assert main(["funnel", str(est), "--output", str(tmp_path / "f.csv")]) == EXIT_VALIDATION


def test_oracle_check(capsys):
    assert main(["oracle-check", "--laws", "50", "--seed", "1"]) == EXIT_OK
    first = capsys.readouterr().out
    assert "psi2" in first and "ok" in first
    assert main(["oracle-check", "--laws", "50", "--seed", "1"]) == EXIT_OK
    assert capsys.readouterr().out == first
    assert main(["oracle-check", "--laws", "50", "--tolerance", "0"]) == EXIT_FAIL
    assert main(["oracle-check", "--laws", "0"]) == EXIT_VALIDATION
