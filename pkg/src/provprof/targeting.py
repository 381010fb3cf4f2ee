"""TMLE fluctuation and plug-in for the direct and indirect standardization parameters.

All fluctuations are logistic submodels on the [0, 1] outcome scale, with
the pooled cross-fitted predictions as offsets and one epsilon per
(parameter, provider) pair.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from . import eif as eifmod
from .dataset import BINARY, Dataset, FoldAssignment, OutcomeScale, scale_outcomes
from .learners import IDENTITY, LOGIT, LearnerSpec, fit_regressor
from .nuisance import (NuisanceConfig, NuisanceEstimates, estimate_nuisances,
                       provider_design)

logger = logging.getLogger(__name__)

PARAMETERS = ("phi", "psi1", "psi2", "er", "smr")
INDIRECT = ("psi1", "psi2", "er", "smr")
OFFSET_CLIP = 1e-6
SCORE_TOL = 1e-8
MAX_NEWTON = 50


class PositivityError(RuntimeError):
    pass


class TargetingWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CleverCovariates:
    M: np.ndarray | None
    K: np.ndarray
    H: np.ndarray


def clever_covariates(a: int, A, nu: NuisanceEstimates, direct: bool | None = None) -> CleverCovariates:
    """Submodel directions for provider ``a``.

    M uses the truncated propensities; H uses the untruncated ones.
    """
    A = np.asarray(A)
    p = nu.p_hat[a]
    if not p > 0:
        raise PositivityError(f"provider {a} has zero estimated marginal probability")
    ind = (A == a)
    K = ind / p
    H = nu.pi_hat[:, a] / p
    direct = nu.pi_direct is not None if direct is None else direct
    M = None
    if direct:
        pi = nu.pi_direct[:, a]
        bad = np.flatnonzero(ind & ~(pi > 0))
        if bad.size:
            raise PositivityError(f"provider {a}: zero propensity at rows {bad.tolist()[:10]}")
        M = np.where(ind, 1.0 / np.where(pi > 0, pi, 1.0), 0.0)
    return CleverCovariates(M, K, H)


@dataclass(frozen=True)
class FluctuationFit:
    epsilon: float
    iterations: int
    converged: bool
    score_at_solution: float


def _offsets(pred):
    return logit(np.clip(pred, OFFSET_CLIP, 1 - OFFSET_CLIP))


def fit_epsilon(offset_logits, covariate, y, tol=SCORE_TOL, max_iter=MAX_NEWTON) -> FluctuationFit:
    """Maximum-likelihood epsilon for ``logit(mean) = offset + epsilon * covariate``.

    Newton's method with step halving on the Bernoulli log-likelihood (valid
    for responses anywhere in [0, 1]). Converged means ``|score| <= tol``
    where ``score = sum(covariate * (y - mean))``.
    """
    off = np.asarray(offset_logits, dtype=float)
    c = np.asarray(covariate, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = c != 0
    off, c, y = off[keep], c[keep], y[keep]
    if not np.all(np.isfinite(off)):
        raise ValueError("offsets must be finite")

    def loglik(eps):
        eta = off + eps * c
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    # responses at the boundary on the whole covariate support: the likelihood
    # increases without bound, so there is no finite maximizer to converge to
    pos, neg = c > 0, c < 0
    separated = c.size > 0 and (
        (np.all(y[pos] >= 1) and np.all(y[neg] <= 0)) or (np.all(y[pos] <= 0) and np.all(y[neg] >= 1)))
    eps = 0.0
    ll = loglik(eps)
    score = float(np.sum(c * (y - expit(off))))
    it = 0
    while (separated or abs(score) > tol) and it < max_iter:
        it += 1
        mu = expit(off + eps * c)
        info = float(np.sum(c * c * mu * (1 - mu)))
        if not info > 0:
            break
        step = score / info
        t = 1.0
        while True:
            cand = eps + t * step
            cll = loglik(cand)
            if cll >= ll or t < 1e-12:
                break
            t *= 0.5
        if cand == eps:
            break
        eps, ll = cand, cll
        score = float(np.sum(c * (y - expit(off + eps * c))))
    ok = abs(score) <= tol and not separated
    if separated:
        warnings.warn(f"fluctuation has no finite maximizer; stopped at epsilon {eps:.3g} "
                      f"after {it} steps", TargetingWarning)
    elif not ok:
        warnings.warn(f"fluctuation did not converge (score {score:.3g} after {it} steps)",
                      TargetingWarning)
    return FluctuationFit(float(eps), it, ok, score)


@dataclass(frozen=True)
class Targeted:
    """Targeted plug-in on the scaled outcome range plus the fitted fluctuation."""
    estimate: float
    updated: np.ndarray
    fit: FluctuationFit


def target_psi1(a, d: Dataset, nu: NuisanceEstimates) -> Targeted:
    """Fluctuate the cross-fitted provider means along K; plug in over provider-a rows."""
    rows = np.flatnonzero(d.providers == a)
    off = _offsets(nu.mu_dot_obs[rows, a])
    K = np.full(len(rows), 1.0 / nu.p_hat[a])
    fit = fit_epsilon(off, K, d.outcomes[rows])
    upd = expit(off + fit.epsilon * K)
    return Targeted(float(upd.mean()), upd, fit)


def target_psi2(a, d: Dataset, nu: NuisanceEstimates) -> Targeted:
    """Fluctuate the covariate-only outcome model along H; average over provider-a rows."""
    cc = clever_covariates(a, d.providers, nu, direct=False)
    off = _offsets(nu.mu_tilde)
    fit = fit_epsilon(off, cc.H, d.outcomes)
    upd = expit(off + fit.epsilon * cc.H)
    return Targeted(float(upd[d.providers == a].mean()), upd, fit)


def target_phi(a, d: Dataset, nu: NuisanceEstimates) -> Targeted:
    """Fluctuate the provider-covariate outcome model along M; average over all rows.

    ``updated`` holds the targeted prediction with provider set to ``a`` for
    every row.
    """
    if nu.mu_bar is None or nu.pi_direct is None:
        raise ValueError("direct-parameter nuisances were not estimated")
    cc = clever_covariates(a, d.providers, nu, direct=True)
    off = _offsets(nu.mu_bar[:, a])
    fit = fit_epsilon(off, cc.M, d.outcomes)
    # the submodel direction evaluated at A = a' for every row
    upd = expit(off + fit.epsilon / nu.pi_direct[:, a])
    return Targeted(float(upd.mean()), upd, fit)


@dataclass
class ProfileEstimates:
    labels: tuple
    n_a: np.ndarray
    parameters: tuple
    estimate: dict
    se: dict
    ci_lo: dict
    ci_hi: dict
    eif: dict  # parameter -> (n, m) matrix on the original outcome scale
    positivity_flags: tuple
    notes: list
    level: float = 0.95
    fits: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    estimator: str = "tmle"

    @property
    def m(self) -> int:
        return len(self.labels)

    def covariance(self, parameter) -> np.ndarray:
        return eifmod.joint_covariance(self.eif[parameter])

    def row(self, a) -> dict:
        out = {"provider": self.labels[a], "n_a": int(self.n_a[a])}
        for p in self.parameters:
            out[p] = self.estimate[p][a]
            out["se_" + p] = self.se[p][a]
            out["ci_lo_" + p] = self.ci_lo[p][a]
            out["ci_hi_" + p] = self.ci_hi[p][a]
        out["positivity_flag"] = self.positivity_flags[a]
        out["notes"] = self.notes[a]
        return out


def _normalize_parameters(parameters):
    params = tuple(p for p in PARAMETERS if p in set(parameters))
    unknown = set(parameters) - set(PARAMETERS)
    if unknown or not params:
        raise ValueError(f"parameters must be a nonempty subset of {PARAMETERS}; got {parameters}")
    return params


def target_all(d: Dataset, scale: OutcomeScale, nu: NuisanceEstimates, parameters=PARAMETERS,
               level: float = 0.95) -> ProfileEstimates:
    """Targeting, plug-in and EIF inference for every provider, given nuisances.

    ``d`` carries scaled outcomes; estimates and EIFs are reported on the
    original outcome scale described by ``scale``.
    """
    params = _normalize_parameters(parameters)
    n, m = d.n, d.m
    A, Y = d.providers, d.outcomes
    width = scale.width
    est = {p: np.full(m, np.nan) for p in params}
    D = {p: np.zeros((n, m)) for p in params}
    fits = {}
    notes = [[] for _ in range(m)]
    need_indirect = any(p in params for p in INDIRECT)
    for a in range(m):
        try:
            if "phi" in params:
                t = target_phi(a, d, nu)
                fits[("phi", a)] = t.fit
                phi_s = t.estimate
                est["phi"][a] = float(scale.unscale(phi_s))
                D["phi"][:, a] = width * eifmod.eif_phi(a, A, Y, nu.pi_direct[:, a], t.updated, phi_s)
                if not t.fit.converged:
                    notes[a].append("phi fluctuation not converged")
        except PositivityError as exc:
            notes[a].append(f"phi: {exc}")
        if not need_indirect:
            continue
        try:
            t1 = target_psi1(a, d, nu)
            t2 = target_psi2(a, d, nu)
        except PositivityError as exc:
            notes[a].append(f"indirect: {exc}")
            continue
        fits[("psi1", a)], fits[("psi2", a)] = t1.fit, t2.fit
        for nm, t in (("psi1", t1), ("psi2", t2)):
            if not t.fit.converged:
                notes[a].append(f"{nm} fluctuation not converged")
        psi1 = float(scale.unscale(t1.estimate))
        psi2 = float(scale.unscale(t2.estimate))
        D1 = width * eifmod.eif_psi1(a, A, Y, nu.p_hat[a], t1.estimate)
        D2 = width * eifmod.eif_psi2(a, A, Y, nu.pi_hat[:, a], t2.updated, nu.p_hat[a], t2.estimate)
        if "psi1" in params:
            est["psi1"][a], D["psi1"][:, a] = psi1, D1
        if "psi2" in params:
            est["psi2"][a], D["psi2"][:, a] = psi2, D2
        if "er" in params:
            est["er"][a] = psi1 - psi2
            D["er"][:, a] = eifmod.eif_delta(D1, D2, psi1, psi2, "er")
        if "smr" in params:
            if psi2 > 0:
                est["smr"][a] = psi1 / psi2
                D["smr"][:, a] = eifmod.eif_delta(D1, D2, psi1, psi2, "smr")
            else:
                notes[a].append("smr undefined: psi2 <= 0")
    se, lo, hi = {}, {}, {}
    for p in params:
        se[p], lo[p], hi[p] = (np.full(m, np.nan) for _ in range(3))
        for a in range(m):
            if np.isfinite(est[p][a]):
                iv = eifmod.inference(D[p][:, a], est[p][a], level)
                se[p][a], lo[p][a], hi[p][a] = iv.se, iv.lo, iv.hi
    return ProfileEstimates(
        labels=d.labels, n_a=d.counts(), parameters=params, estimate=est, se=se,
        ci_lo=lo, ci_hi=hi, eif=D, positivity_flags=nu.positivity.flags,
        notes=["; ".join(x) for x in notes], level=level, fits=fits,
        meta={"folds": nu.folds.J, "seed": nu.folds.seed, "truncation": nu.truncation})


@dataclass(frozen=True)
class EstimationConfig:
    parameters: tuple = PARAMETERS
    nuisance: NuisanceConfig = field(default_factory=NuisanceConfig)
    level: float = 0.95
    delta: float = 0.005


def compute_all(d: Dataset, folds: FoldAssignment, cfg: EstimationConfig) -> ProfileEstimates:
    """Full pipeline from raw-outcome data: scale, cross-fit nuisances, target, infer."""
    params = _normalize_parameters(cfg.parameters)
    ds, scale = scale_outcomes(d, cfg.delta)
    ncfg = cfg.nuisance
    if ("phi" in params) != ncfg.direct:
        ncfg = replace(ncfg, direct="phi" in params)
    nu = estimate_nuisances(ds, folds, ncfg)
    pe = target_all(ds, scale, nu, params, cfg.level)
    pe.meta["positivity"] = nu.positivity
    return pe


def glm_benchmark(d: Dataset, parameters=PARAMETERS, interactions: bool = True) -> ProfileEstimates:
    """Plug-in GLM estimator without targeting or cross-fitting.

    For phi, an outcome GLM on W fitted separately within each provider (the
    provider-by-covariate interaction model); ``interactions=False`` gives the
    main-effects model on (W, provider dummies) instead. A GLM on W alone
    gives the covariate-only mean; psi1 is the empirical provider mean.
    Identity link for continuous outcomes, logit for binary. No standard errors.
    """
    params = _normalize_parameters(parameters)
    link = LOGIT if d.outcome_kind == BINARY else IDENTITY
    W, A, Y = d.covariates, d.providers, d.outcomes
    m = d.m
    spec = LearnerSpec.make("glm")
    est = {}
    if "phi" in params and interactions:
        est["phi"] = np.array([fit_regressor(spec, W[A == a], Y[A == a], link).predict(W).mean()
                               for a in range(m)])
    elif "phi" in params:
        fit = fit_regressor(spec, provider_design(W, A, m), Y, link)
        est["phi"] = np.array([fit.predict(provider_design(W, a, m)).mean() for a in range(m)])
    counts = d.counts()
    psi1 = np.bincount(A, weights=Y, minlength=m) / counts
    mt = fit_regressor(spec, W, Y, link).predict(W)
    psi2 = np.bincount(A, weights=mt, minlength=m) / counts
    est.update(psi1=psi1, psi2=psi2, er=psi1 - psi2)
    with np.errstate(divide="ignore", invalid="ignore"):
        est["smr"] = np.where(psi2 > 0, psi1 / np.where(psi2 > 0, psi2, 1.0), np.nan)
    est = {p: est[p] for p in params}
    blank = {p: np.full(m, np.nan) for p in params}
    return ProfileEstimates(
        labels=d.labels, n_a=counts, parameters=params, estimate=est, se=blank,
        ci_lo=dict(blank), ci_hi=dict(blank), eif={}, positivity_flags=("ok",) * m,
        notes=["main-effects GLM benchmark (assumed specification)"] * m, estimator="glm")
