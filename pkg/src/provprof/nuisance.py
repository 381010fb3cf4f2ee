"""Cross-fitted nuisance estimation and positivity diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import BINARY, Dataset, FoldAssignment
from .learners import (IDENTITY, LOG, LOGIT, SQUARED, EnsembleSpec, LearnerSpec,
                       fit_ensemble_classifier, fit_ensemble_regressor)

logger = logging.getLogger(__name__)

POOLED = "pooled"
PER_PROVIDER = "per_provider"


class NuisanceError(RuntimeError):
    pass


def default_propensity_spec(seed=0) -> EnsembleSpec:
    return EnsembleSpec((LearnerSpec.make("mean"), LearnerSpec.make("glm"),
                         LearnerSpec.make("gbt", trees=50), LearnerSpec.make("gbt", trees=100)),
                        stacking_folds=3, weight_loss=LOG, seed=seed)


def default_outcome_spec(seed=0) -> EnsembleSpec:
    return EnsembleSpec((LearnerSpec.make("mean"), LearnerSpec.make("glm"),
                         LearnerSpec.make("gbt", trees=50), LearnerSpec.make("gbt", trees=100)),
                        stacking_folds=3, weight_loss=SQUARED, seed=seed)


@dataclass(frozen=True)
class NuisanceConfig:
    propensity: object = field(default_factory=default_propensity_spec)
    outcome: object = field(default_factory=default_outcome_spec)
    outcome_direct: object = None  # None: reuse ``outcome``
    direct: bool = True
    truncation: float = 1e-3
    positivity_threshold: float = 1e-3
    mu_bar_mode: str = POOLED


@dataclass(frozen=True)
class PositivityReport:
    minimum: np.ndarray
    maximum: np.ndarray
    quantiles: np.ndarray  # shape (m, 5) at QUANTILE_LEVELS
    below_bound: np.ndarray
    flags: tuple
    threshold: float

    QUANTILE_LEVELS = (0.01, 0.05, 0.5, 0.95, 0.99)

    @property
    def violating(self) -> list:
        return [a for a, f in enumerate(self.flags) if f == "practical_violation"]


def positivity_report(pi_pre, threshold: float, bound: float | None = None) -> PositivityReport:
    """Per-provider summary of the estimated propensity columns ``pi[:, a]``."""
    pi = np.asarray(pi_pre, dtype=float)
    bound = threshold if bound is None else bound
    mn = pi.min(axis=0)
    flags = tuple("practical_violation" if v < threshold else "ok" for v in mn)
    return PositivityReport(
        minimum=mn, maximum=pi.max(axis=0),
        quantiles=np.quantile(pi, PositivityReport.QUANTILE_LEVELS, axis=0).T,
        below_bound=(pi < bound).sum(axis=0), flags=flags, threshold=threshold)


def truncate_propensities(pi, bound: float):
    """Raise entries below ``bound`` to ``bound`` and shrink the rest to keep rows on the simplex.

    Entries that were raised stay exactly at ``bound``; the remaining mass is
    redistributed proportionally over the other entries. ``bound = 0``
    returns the input unchanged.
    """
    pi = np.array(pi, dtype=float)
    m = pi.shape[1]
    if not 0.0 <= bound < 1.0 / m:
        raise ValueError(f"truncation bound must lie in [0, 1/m) = [0, {1.0 / m})")
    if bound == 0.0:
        return pi
    low = pi < bound
    rows = np.flatnonzero(low.any(axis=1))
    for i in rows:
        fixed = low[i].copy()
        row = pi[i]
        while True:
            free_mass = 1.0 - bound * fixed.sum()
            free = ~fixed
            out = np.where(fixed, bound, row * free_mass / row[free].sum())
            new_low = free & (out < bound)
            if not new_low.any():
                break
            fixed |= new_low
        pi[i] = out
    return pi


@dataclass(frozen=True)
class NuisanceEstimates:
    pi_hat: np.ndarray  # cross-fitted, untruncated; used by indirect parameters
    pi_direct: np.ndarray | None  # truncated; used by the direct parameter
    mu_tilde: np.ndarray
    mu_bar: np.ndarray | None
    mu_dot: np.ndarray  # fold-averaged training-split provider means
    mu_dot_fold: np.ndarray  # shape (J, m)
    p_hat: np.ndarray
    p_fold: np.ndarray
    folds: FoldAssignment
    truncation: float
    positivity: PositivityReport
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def mu_dot_obs(self) -> np.ndarray:
        """Per-observation cross-fitted provider means, shape (n, m)."""
        return self.mu_dot_fold[self.folds.fold_of]


def provider_design(W, a, m):
    """Covariates followed by reference-coded provider dummies (provider 0 omitted)."""
    n = W.shape[0]
    D = np.zeros((n, m - 1))
    a = np.broadcast_to(a, (n,))
    nz = a > 0
    D[np.flatnonzero(nz), a[nz] - 1] = 1.0
    return np.hstack([W, D])


def _outcome_link(d):
    return LOGIT if d.outcome_kind == BINARY else IDENTITY


def estimate_nuisances(d: Dataset, folds: FoldAssignment, cfg: NuisanceConfig) -> NuisanceEstimates:
    """Cross-fit every nuisance model: train on each ``T_j``, predict on ``V_j``.

    ``d`` must already carry outcomes on the [0, 1] scale (see
    :func:`provprof.dataset.scale_outcomes`).
    """
    if d.outcomes.min() < 0 or d.outcomes.max() > 1:
        raise NuisanceError("outcomes must be scaled into [0, 1] before nuisance estimation")
    n, m, J = d.n, d.m, folds.J
    W, A, Y = d.covariates, d.providers, d.outcomes
    link = _outcome_link(d)
    direct_spec = cfg.outcome_direct or cfg.outcome
    pi = np.empty((n, m))
    mu_tilde = np.empty(n)
    mu_bar = np.empty((n, m)) if cfg.direct else None
    mu_dot_fold = np.empty((J, m))
    p_fold = np.empty((J, m))
    diag = {"propensity": [], "outcome": [], "outcome_direct": []}
    for j in range(J):
        tr, va = folds.training(j), folds.validation(j)
        if len(va) == 0:
            continue
        counts = np.bincount(A[tr], minlength=m)
        if np.any(counts == 0):
            gone = [d.labels[a] for a in np.flatnonzero(counts == 0)]
            raise NuisanceError(
                f"providers {gone} have no observations in training split {j}; "
                "use fewer folds or filter low-volume providers")
        p_fold[j] = counts / len(tr)
        mu_dot_fold[j] = np.bincount(A[tr], weights=Y[tr], minlength=m) / counts
        clf = fit_ensemble_classifier(cfg.propensity, W[tr], A[tr], m)
        pi[va] = clf.predict_proba(W[va])
        diag["propensity"].append(clf.diagnostics)
        reg = fit_ensemble_regressor(cfg.outcome, W[tr], Y[tr], link)
        mu_tilde[va] = reg.predict(W[va])
        diag["outcome"].append(reg.diagnostics)
        if cfg.direct:
            if cfg.mu_bar_mode == PER_PROVIDER:
                for a in range(m):
                    rows = tr[A[tr] == a]
                    fa = fit_ensemble_regressor(direct_spec, W[rows], Y[rows], link)
                    mu_bar[va, a] = fa.predict(W[va])
            else:
                Xtr = provider_design(W[tr], A[tr], m)
                fb = fit_ensemble_regressor(direct_spec, Xtr, Y[tr], link)
                for a in range(m):
                    mu_bar[va, a] = fb.predict(provider_design(W[va], a, m))
                diag["outcome_direct"].append(fb.diagnostics)
    np.clip(mu_tilde, 0.0, 1.0, out=mu_tilde)
    if mu_bar is not None:
        np.clip(mu_bar, 0.0, 1.0, out=mu_bar)
    report = positivity_report(pi, cfg.positivity_threshold, cfg.truncation)
    pi_direct = truncate_propensities(pi, cfg.truncation) if cfg.direct else None
    return NuisanceEstimates(
        pi_hat=pi, pi_direct=pi_direct, mu_tilde=mu_tilde, mu_bar=mu_bar,
        mu_dot=mu_dot_fold.mean(axis=0), mu_dot_fold=mu_dot_fold,
        p_hat=p_fold.mean(axis=0), p_fold=p_fold, folds=folds,
        truncation=cfg.truncation if cfg.direct else 0.0, positivity=report,
        diagnostics=diag)


def with_overrides(nu: NuisanceEstimates, **changes) -> NuisanceEstimates:
    return replace(nu, **changes)
