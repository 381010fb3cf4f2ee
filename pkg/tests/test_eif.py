import math

import numpy as np
import pytest
from scipy.stats import norm

from conftest import glm_config, toy4, toy6
from provprof.dataset import make_folds
from provprof.eif import (FUNNEL_LEVELS, classify, control_limits, eif_delta, eif_phi, eif_psi1,
                          eif_psi2, funnel, inference, joint_covariance, normal_quantile,
                          standard_error)
from provprof.oracle import empirical_law, exact_eifs
from provprof.targeting import EstimationConfig, compute_all


@pytest.mark.parametrize("p", [1e-12, 1e-6, 0.001, 0.02, 0.0243, 0.3, 0.5, 0.8, 0.975, 0.9995, 1 - 1e-9])
def test_normal_quantile_matches_reference(p):
    assert abs(normal_quantile(p) - norm.ppf(p)) <= 1e-9 * max(1.0, abs(norm.ppf(p)))


def test_normal_quantile_975():
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-9)
    with pytest.raises(ValueError):
        normal_quantile(1.0)


def test_inference_examples():
    iv = inference(np.zeros(5), 0.3)
    assert iv.se == 0.0 and iv.lo == iv.hi == 0.3
    iv = inference(np.array([1.0, -1.0]), 0.0)
    assert iv.se == pytest.approx(math.sqrt(0.5), abs=1e-15)
    assert iv.hi == pytest.approx(normal_quantile(0.975) * math.sqrt(0.5), abs=1e-15)
    with pytest.raises(ValueError):
        inference(np.ones(3), 0.0, level=1.0)


def test_eif_psi1_toy4():
    A = np.array([0, 0, 1, 1])
    Y = np.array([1.0, 0.0, 1.0, 1.0])
    assert eif_psi1(0, A, Y, 0.5, 0.5).tolist() == [1.0, -1.0, 0.0, 0.0]
    assert eif_psi1(1, A, Y, 0.5, 1.0).mean() == 0.0


def test_eif_phi_off_provider_rows():
    A = np.array([0, 1, 1])
    Y = np.array([0.2, 0.9, 0.4])
    mb = np.array([0.3, 0.5, 0.7])
    D = eif_phi(0, A, Y, np.array([0.5, 0.25, 0.4]), mb, 0.45)
    assert D[1:].tolist() == (mb[1:] - 0.45).tolist()
    assert D[0] == pytest.approx((0.2 - 0.3) / 0.5 + 0.3 - 0.45, abs=1e-15)


def test_eif_psi2_degenerate_zero():
    A = np.array([1, 1, 1])
    D = eif_psi2(0, A, np.array([0.1, 0.5, 0.9]), np.zeros(3), np.full(3, 0.4), 0.3, 0.4)
    assert np.all(D == 0)


def test_eif_delta(rng):
    D1, D2 = rng.normal(size=20), rng.normal(size=20)
    assert np.all(eif_delta(D1, D1, 0.4, 0.4, "er") == 0)
    assert np.allclose(eif_delta(D1, D2, 0.7, 0.7, "smr"), (D1 - D2) / 0.7, atol=1e-14)
    E1, E2 = rng.normal(size=20), rng.normal(size=20)
    for kind in ("er", "smr"):
        lhs = eif_delta(2 * D1 + 3 * E1, 2 * D2 + 3 * E2, 0.6, 0.8, kind)
        rhs = 2 * eif_delta(D1, D2, 0.6, 0.8, kind) + 3 * eif_delta(E1, E2, 0.6, 0.8, kind)
        assert np.allclose(lhs, rhs, atol=1e-13)
    with pytest.raises(ZeroDivisionError):
        eif_delta(D1, D2, 0.5, 0.0, "smr")


def test_joint_covariance_diagonal_equals_se_squared(rng):
    D = rng.normal(size=(137, 4))
    S = joint_covariance(D)
    for a in range(4):
        assert S[a, a] == inference(D[:, a], 0.0).se ** 2
    assert np.array_equal(S, S.T)
    single = joint_covariance([D[:, 0]])
    assert single.shape == (1, 1)


def test_joint_covariance_orthogonal():
    D = np.array([[1.0, 0.0], [0.0, 2.0], [-1.0, 0.0], [0.0, -2.0]])
    S = joint_covariance(D)
    assert S[0, 1] == 0.0 and S[1, 0] == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_joint_covariance_psd(seed):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(30, 8)) @ rng.normal(size=(8, 8))
    assert np.linalg.eigvalsh(joint_covariance(D)).min() >= -1e-10


def test_funnel_classification_matches_limits():
    z999 = normal_quantile(0.9995)
    z95 = normal_quantile(0.975)
    var = np.array([1e-4, 0.01, 0.04])
    est = np.array([0.5, 1.0, 1 + 0.5 * (z95 + normal_quantile(0.995)) * 0.2])
    tab = funnel(["a", "b", "c"], est, var)
    cls = [p.classification for p in tab.points]
    assert cls[0] == "low at 99.9%" and 0.5 < 1 - z999 * 0.01
    assert cls[1] == "within limits"
    assert cls[2] == "high at 95%"
    assert tab.levels == FUNNEL_LEVELS
    assert len(tab.precision_grid) == 200
    assert tab.precision_grid[0] == pytest.approx(25.0) and tab.precision_grid[-1] == pytest.approx(1e4)
    for level in FUNNEL_LEVELS:
        z = normal_quantile(0.5 + 0.5 * level)
        assert np.allclose(tab.upper[level] - 1, 1 - tab.lower[level], atol=1e-15)
        assert np.allclose(tab.upper[level], 1 + z / np.sqrt(tab.precision_grid), atol=1e-15)
    assert np.all(tab.upper[0.999] > tab.upper[0.99]) and np.all(tab.upper[0.99] > tab.upper[0.95])


def test_funnel_doubling_variance_widens_by_sqrt2():
    lo1, hi1 = control_limits(100.0, 0.95)
    lo2, hi2 = control_limits(50.0, 0.95)
    assert (hi2 - 1) / (hi1 - 1) == pytest.approx(math.sqrt(2), rel=1e-14)
    assert (1 - lo2) / (1 - lo1) == pytest.approx(math.sqrt(2), rel=1e-14)


def test_funnel_zero_variance_omitted_and_default_levels(caplog):
    tab = funnel([1, 2], [1.2, 0.9], [0.0, 0.01], levels=[])
    assert tab.omitted == (1,) and len(tab.points) == 1
    assert tab.levels == FUNNEL_LEVELS
    assert "omitted" in caplog.text


def test_funnel_log_scale():
    assert classify(1.0, 1.0, FUNNEL_LEVELS, log_scale=True) == "within limits"
    lo, hi = control_limits(4.0, 0.95, log_scale=True)
    assert lo * hi == pytest.approx(1.0, abs=1e-15)


def test_toy4_debug_eif_column_means():
    d = toy4()
    pe = compute_all(d, make_folds(d, 1, 0), EstimationConfig(nuisance=glm_config(truncation=0.0)))
    assert abs(pe.eif["phi"][:, 1].mean()) <= 1e-6
    assert pe.eif["psi1"][:, 0].tolist() == pytest.approx([1.0, -1.0, 0.0, 0.0], abs=1e-12)


def test_toy6_psi2_eif_hand_computation():
    d = toy6()
    cfg = EstimationConfig(parameters=("psi2",), nuisance=glm_config(truncation=0.0))
    pe = compute_all(d, make_folds(d, 1, 0), cfg)
    # empirical law: pi(1|w=0) = 2/3, pi(1|w=1) = 1/3, mu_tilde = (1/3, 1), p(1) = 1/2
    w = np.array([0, 0, 1, 0, 1, 1])
    a = np.array([1, 1, 1, 2, 2, 2])
    y = np.array([1, 0, 1, 0, 1, 1.0])
    pi1 = np.where(w == 0, 2 / 3, 1 / 3)
    mt = np.where(w == 0, 1 / 3, 1.0)
    hand = (pi1 * (y - mt) + (a == 1) * (mt - 5 / 9)) / 0.5
    assert np.max(np.abs(pe.eif["psi2"][:, 0] - hand)) <= 1e-5
    law, _ = empirical_law(d)
    ex = exact_eifs(law)["psi2"]
    assert np.max(np.abs(ex[w, a - 1, y.astype(int), 0] - hand)) <= 1e-12
