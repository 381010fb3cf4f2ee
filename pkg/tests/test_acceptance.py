"""Acceptance criteria AC1 to AC8, each checked at its stated tolerance.

Every criterion prints one PASS/FAIL line (also collected in the terminal
summary). The two simulation studies dominate the runtime.
"""
import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE, glm_config, synthetic
from provprof.cli import main
from provprof.dataset import make_folds, scale_outcomes
from provprof.eif import control_limits, funnel, inference, joint_covariance, normal_quantile
from provprof.learners import EnsembleSpec, LearnerSpec
from provprof.nuisance import NuisanceConfig, estimate_nuisances
from provprof.oracle import (BASE, eif_variances, low_propensity_law, oracle_suite,
                             pathwise_derivative_check, random_direction, random_law)
from provprof.simulation import SimConfig, default_threads, run_study
from provprof.targeting import EstimationConfig, compute_all, target_all

SIM1_N = (1000, 2500, 5000)
SIM2_N = (5000, 20000)


def report(key, checks):
    """Record and print one line for a criterion; ``checks`` maps a description to (ok, value)."""
    ok = all(c[0] for c in checks.values())
    detail = "; ".join(f"{name} = {val}{'' if good else ' [fail]'}" for name, (good, val) in checks.items())
    ACCEPTANCE[key] = (ok, detail)
    print(f"\n{key} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def fmt3(x):
    return f"{x:.4f}"


# ---------------------------------------------------------------- AC1

def test_ac1_von_mises_identities():
    t0 = time.perf_counter()
    worst = oracle_suite(200, seed=0, max_w=3, max_m=3)
    elapsed = time.perf_counter() - t0
    checks = {f"max|residual| {k}": (v <= 1e-10, f"{v:.2e}") for k, v in worst.items()}
    checks["runtime s"] = (elapsed < 10, f"{elapsed:.2f}")
    report("AC1", checks)


# ---------------------------------------------------------------- AC2

def test_ac2_pathwise_derivatives():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = {k: 0.0 for k in BASE}
    for _ in range(50):
        P0 = random_law(rng, int(rng.integers(1, 4)), int(rng.integers(2, 4)))
        direction = random_direction(rng, P0, 0.5)
        rep = pathwise_derivative_check(P0, direction, names=BASE)
        for k in BASE:
            worst[k] = max(worst[k], float(np.max(rep.relative_error[k])))
    elapsed = time.perf_counter() - t0
    checks = {f"max rel err {k}": (v <= 1e-6, f"{v:.2e}") for k, v in worst.items()}
    checks["runtime s"] = (elapsed < 30, f"{elapsed:.2f}")
    report("AC2", checks)


# ---------------------------------------------------------------- AC3

def test_ac3_score_solving():
    rng = np.random.default_rng(3)
    members = (LearnerSpec.make("mean"), LearnerSpec.make("glm"), LearnerSpec.make("gbt", trees=20))
    worst_eif, worst_psi1 = 0.0, 0.0
    for i in range(20):
        n, m, k = int(rng.integers(200, 2001)), int(rng.integers(2, 11)), int(rng.integers(1, 5))
        d = synthetic(n, m, k, seed=1000 + i, binary=bool(i % 2))
        ds, scale = scale_outcomes(d)
        cfg = NuisanceConfig(propensity=EnsembleSpec(members, seed=i), outcome=EnsembleSpec(members, seed=i))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            nu = estimate_nuisances(ds, make_folds(ds, 3, i), cfg)
            pe = target_all(ds, scale, nu)
        for p in pe.parameters:
            worst_eif = max(worst_eif, float(np.nanmax(np.abs(pe.eif[p].mean(axis=0)))))
        emp = np.bincount(d.providers, weights=d.outcomes) / d.counts()
        worst_psi1 = max(worst_psi1, float(np.max(np.abs(pe.estimate["psi1"] - emp))))
    report("AC3", {"max |EIF column mean|": (worst_eif <= 1e-6, f"{worst_eif:.2e}"),
                   "max |psi1 - provider mean|": (worst_psi1 <= 1e-8, f"{worst_psi1:.2e}")})


# ---------------------------------------------------------------- simulation fixtures

@pytest.fixture(scope="session")
def sim1_results():
    out = {}
    for N in SIM1_N:
        cfg = SimConfig(study="sim1", N=N, m=10, sigma=1.0, replicates=100, seed=1, folds=5,
                        threads=default_threads())
        out[N] = run_study(cfg)
    return out


@pytest.fixture(scope="session")
def sim2_results():
    out = {}
    for N in SIM2_N:
        cfg = SimConfig(study="sim2", N=N, m=20, k=10, sigma=1.0, replicates=100, seed=2,
                        scenarios=("s1", "s2", "s3", "s4"), estimators=("tmle",),
                        parameters=("psi2",), folds=3, threads=default_threads())
        out[N] = run_study(cfg)
    return out


# ---------------------------------------------------------------- AC4

@pytest.mark.slow
def test_ac4_simulation_study_1(sim1_results):
    r = sim1_results[2500]
    smr = r.cell("tmle", "smr")
    checks = {"failed replicates": (all(x.failures == 0 for x in sim1_results.values()),
                                    sum(x.failures for x in sim1_results.values())),
              "TMLE smr |ME| (N=2500)": (abs(smr["ME"]) <= 0.01, fmt3(smr["ME"])),
              "TMLE smr MAE (N=2500)": (smr["MAE"] <= 0.04, fmt3(smr["MAE"]))}
    for p in ("psi2", "er", "smr"):
        cov = r.cell("tmle", p)["coverage"]
        checks[f"TMLE {p} coverage (N=2500)"] = (0.89 <= cov <= 0.99, f"{cov:.3f}")
    glm = [sim1_results[N].cell("glm", "phi", "-")["MAE"] for N in SIM1_N]
    for N, v in zip(SIM1_N, glm):
        if N >= 2500:
            checks[f"GLM phi MAE (N={N})"] = (0.07 <= v <= 0.14, fmt3(v))
    checks["GLM phi MAE non-decreasing 1000->2500->5000"] = (
        glm[0] <= glm[1] <= glm[2], " -> ".join(fmt3(v) for v in glm))
    report("AC4", checks)


@pytest.mark.slow
def test_sim1_tmle_phi_unbiased_at_5000(sim1_results):
    me = sim1_results[5000].cell("tmle", "phi")["ME"]
    assert abs(me) <= 0.05, me


@pytest.mark.slow
def test_sim1_tmle_errors_shrink_with_n(sim1_results):
    for p in ("psi2", "er", "smr"):
        mae = [sim1_results[N].cell("tmle", p)["MAE"] for N in SIM1_N]
        assert mae[0] > mae[2], (p, mae)


@pytest.mark.slow
def test_sim1_glm_examples(sim1_results):
    phi = sim1_results[5000].cell("glm", "phi", "-")["MAE"]
    assert 0.07 <= phi <= 0.14, phi
    smr_me = sim1_results[5000].cell("glm", "smr", "-")["ME"]
    assert -0.09 <= smr_me <= -0.03, smr_me


# ---------------------------------------------------------------- AC5

@pytest.mark.slow
def test_ac5_simulation_study_2(sim2_results):
    lo, hi = sim2_results[5000], sim2_results[20000]
    c = {(N, s): sim2_results[N].cell("tmle", "psi2", s) for N in SIM2_N for s in ("s1", "s2", "s3", "s4")}
    me1 = abs(c[20000, "s1"]["ME"])
    checks = {"failed replicates": (lo.failures + hi.failures == 0, lo.failures + hi.failures),
              "s1 psi2 MAE 5000 -> 20000 decreases": (
                  c[20000, "s1"]["MAE"] < c[5000, "s1"]["MAE"],
                  f"{fmt3(c[5000, 's1']['MAE'])} -> {fmt3(c[20000, 's1']['MAE'])}"),
              "s1 psi2 coverage (N=20000)": (c[20000, "s1"]["coverage"] >= 0.89,
                                             f"{c[20000, 's1']['coverage']:.3f}")}
    for s in ("s2", "s3"):
        v = abs(c[20000, s]["ME"])
        checks[f"{s} |ME| < 2 x s1 |ME| (N=20000)"] = (v < 2 * me1, f"{fmt3(v)} vs {fmt3(2 * me1)}")
    checks["s4 psi2 coverage (N=20000)"] = (c[20000, "s4"]["coverage"] <= 0.60,
                                            f"{c[20000, 's4']['coverage']:.3f}")
    report("AC5", checks)


# ---------------------------------------------------------------- AC6

def test_ac6_efficiency_ordering():
    rng = np.random.default_rng(6)
    wins = 0
    for _ in range(500):
        P, a, _ = low_propensity_law(rng, int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        v = eif_variances(P)
        wins += bool(v["phi"][a] > v["psi2"][a])
    report("AC6", {"share with Var[D_phi] > Var[D_psi2]": (wins >= 475, f"{wins}/500")})


# ---------------------------------------------------------------- AC7

def test_ac7_inference_plumbing():
    d = synthetic(2000, 2, 2, seed=0, binary=True)
    cfg = EstimationConfig(parameters=("psi1", "psi2", "smr"), nuisance=glm_config())
    pe = compute_all(d, make_folds(d, 1, 0), cfg)
    rng = np.random.default_rng(0)
    boot = []
    for _ in range(500):
        idx = rng.integers(0, d.n, d.n)
        db = d.subset(idx)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            boot.append(compute_all(db, make_folds(db, 1, 0), cfg).estimate["smr"])
    se_boot = np.std(boot, axis=0, ddof=1)
    rel = np.abs(pe.se["smr"] / se_boot - 1)
    checks = {f"SMR se delta/bootstrap - 1, provider {pe.labels[a]}":
              (rel[a] <= 0.02, f"{pe.se['smr'][a]:.5f}/{se_boot[a]:.5f} ({rel[a]:.3%})") for a in range(pe.m)}
    exact = all(np.array_equal(np.diag(joint_covariance(pe.eif[p])), pe.se[p] ** 2) for p in pe.parameters)
    checks["covariance diagonal == se^2"] = (exact, exact)
    # hand-constructed funnel: classification from the analytic limits 1 +/- z sqrt(variance)
    labels = ["p1", "p2", "p3", "p4", "p5"]
    var = np.array([1e-4, 4e-4, 0.01, 0.0025, 0.04])
    est = np.array([0.95, 1.05, 0.78, 1.0, 1.5])
    tab = funnel(labels, est, var)
    expected = []
    for e, v in zip(est, var):
        cls = "within limits"
        for level in (0.999, 0.99, 0.95):
            z = normal_quantile(0.5 + level / 2)
            if e < 1 - z * np.sqrt(v):
                cls = f"low at {level * 100:g}%"
                break
            if e > 1 + z * np.sqrt(v):
                cls = f"high at {level * 100:g}%"
                break
        expected.append(cls)
    got = [p.classification for p in tab.points]
    limits_exact = all(np.array_equal(tab.upper[lv], control_limits(tab.precision_grid, lv)[1])
                       for lv in tab.levels)
    checks["funnel classes"] = (got == expected and len(set(got)) >= 3 and limits_exact, got)
    report("AC7", checks)


# ---------------------------------------------------------------- AC8

def test_ac8_determinism(tmp_path):
    d = synthetic(400, 3, 2, seed=8)
    inp = tmp_path / "data.csv"
    with open(inp, "w", encoding="utf-8") as fh:
        fh.write("y,provider,w1,w2\n")
        for y, a, w in zip(d.outcomes, np.array(d.labels)[d.providers], d.covariates):
            fh.write(f"{float(y)!r},{a},{float(w[0])!r},{float(w[1])!r}\n")
    est, sim = [], []
    for k in range(2):
        out = tmp_path / f"est{k}"
        code_e = main(["estimate", str(inp), "--folds", "3", "--seed", "11", "--threads", "2",
                       "--output-dir", str(out)])
        est.append((code_e, (out / "estimates.csv").read_bytes(), (out / "positivity.csv").read_bytes()))
        path = tmp_path / f"sim{k}.csv"
        code_s = main(["simulate", "--study", "sim1", "--N", "400", "--m", "4", "--replicates", "3",
                       "--seed", "13", "--folds", "3", "--threads", "2", "--output", str(path),
                       "--audit", str(tmp_path / f"audit{k}.csv")])
        sim.append((code_s, path.read_bytes(), (tmp_path / f"audit{k}.csv").read_bytes()))
    report("AC8", {"estimate exit codes": (est[0][0] == est[1][0] == 0, (est[0][0], est[1][0])),
                   "estimate outputs identical": (est[0] == est[1], est[0] == est[1]),
                   "simulate exit codes": (sim[0][0] == sim[1][0] == 0, (sim[0][0], sim[1][0])),
                   "simulate outputs identical": (sim[0] == sim[1], sim[0] == sim[1])})
