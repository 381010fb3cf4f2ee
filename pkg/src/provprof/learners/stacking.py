"""Cross-validated convex stacking of learners (a Super Learner analogue)."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .base import (IDENTITY, LOGIT, FittedClassifier, FittedRegressor, LearnerError,
                   LearnerSpec, fit_classifier, fit_regressor, _as_matrix)

logger = logging.getLogger(__name__)

SQUARED = "squared"
LOG = "log"
WEIGHT_TOL = 1e-8
_CLIP = 1e-12


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple
    stacking_folds: int = 3
    weight_loss: str = SQUARED
    seed: int = 0

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        if not all(isinstance(s, LearnerSpec) for s in members):
            raise TypeError("ensemble members must be LearnerSpec instances")
        if self.stacking_folds < 2:
            raise ValueError("stacking_folds must be at least 2")
        if self.weight_loss not in (SQUARED, LOG):
            raise ValueError(f"unknown weight loss {self.weight_loss!r}")
        object.__setattr__(self, "members", members)

    @classmethod
    def single(cls, spec: LearnerSpec, **kw):
        return cls((spec,), **kw)


def _losses(Z, y, w, loss):
    p = Z @ w
    if loss == SQUARED:
        r = p - y
        return np.mean(r * r), 2.0 * (Z.T @ r) / len(y)
    p = np.clip(p, _CLIP, 1 - _CLIP)
    val = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))
    dp = (p - y) / (p * (1 - p))
    return val, Z.T @ dp / len(y)


def _nll(Q, w):
    q = np.clip(Q @ w, _CLIP, None)
    return -np.mean(np.log(q)), -(Q.T @ (1.0 / q)) / len(q)


def simplex_weights(objective, L, tol=WEIGHT_TOL, max_iter=20000):
    """Minimize a smooth convex ``objective(w) -> (value, grad)`` over the simplex.

    Exponentiated-gradient descent with backtracking. Stops when the
    Frank-Wolfe gap ``w . g - min(g)`` (an upper bound on suboptimality)
    drops to ``tol``.
    """
    w = np.full(L, 1.0 / L)
    if L == 1:
        return w, 0.0
    val, g = objective(w)
    eta = 1.0
    gap = np.inf
    for _ in range(max_iter):
        gap = float(w @ g - g.min())
        if gap <= tol:
            break
        while True:
            z = np.log(np.maximum(w, 1e-300)) - eta * (g - g.min())
            cand = np.exp(z - z.max())
            cand /= cand.sum()
            cval, cg = objective(cand)
            # sufficient decrease for mirror descent with KL geometry
            if cval <= val + g @ (cand - w) + np.sum(cand * np.log(np.maximum(cand, 1e-300) / np.maximum(w, 1e-300))) / eta + 1e-15:
                break
            eta *= 0.5
            if eta < 1e-12:
                break
        w, val, g = cand, cval, cg
        eta *= 2.0
    return w, gap


def stacking_folds(labels, V, seed):
    """Deal rows round-robin within label strata (or overall if ``labels`` is None)."""
    rng = np.random.default_rng(seed)
    n = len(labels)
    order = []
    for c in np.unique(labels):
        order.append(rng.permutation(np.flatnonzero(labels == c)))
    order = np.concatenate(order)
    fold = np.empty(n, dtype=np.int64)
    fold[order] = np.arange(n) % V
    return fold


def _member_loop(spec, fit_one, n, folds, predict_shape):
    """Out-of-fold predictions for every member; failed members are dropped."""
    V = spec.stacking_folds
    kept, oof = [], []
    for s in spec.members:
        pred = np.empty(predict_shape)
        try:
            for v in range(V):
                tr = folds != v
                va = folds == v
                pred[va] = fit_one(s, tr, va)
        except (LearnerError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
            warnings.warn(f"dropping ensemble member {s.label()}: {exc}")
            continue
        kept.append(s)
        oof.append(pred)
    if not kept:
        raise LearnerError("every ensemble member failed to fit")
    return kept, oof


def stack_regressor(spec: EnsembleSpec, X, y, link: str = IDENTITY) -> FittedRegressor:
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if len(spec.members) == 1:
        fitted = fit_regressor(spec.members[0], X, y, link)
        fitted.diagnostics["weights"] = {spec.members[0].label(): 1.0}
        return fitted
    folds = stacking_folds(np.zeros(n), spec.stacking_folds, spec.seed)

    def fit_one(s, tr, va):
        return fit_regressor(s, X[tr], y[tr], link).predict(X[va])

    kept, oof = _member_loop(spec, fit_one, n, folds, (n,))
    Z = np.column_stack(oof)
    loss = spec.weight_loss
    if loss == LOG and link != LOGIT:
        loss = SQUARED
    w, gap = simplex_weights(lambda ww: _losses(Z, y, ww, loss), Z.shape[1])
    return _combine_regressors(kept, w, gap, X, y, link)


def _combine_regressors(kept, w, gap, X, y, link):
    active = [(s, wt) for s, wt in zip(kept, w) if wt > 1e-10]
    total = sum(wt for _, wt in active)
    models = [(fit_regressor(s, X, y, link), wt / total) for s, wt in active]

    def predict(Xn):
        return sum(wt * mdl.predict(Xn) for mdl, wt in models)

    diag = {"weights": {s.label(): float(wt) for s, wt in zip(kept, w)}, "weight_gap": gap}
    return FittedRegressor(predict, X.shape[1], link, diag)


def stack_classifier(spec: EnsembleSpec, X, a, m: int) -> FittedClassifier:
    """Convex combination of member probability matrices, weights by CV log-loss."""
    X = _as_matrix(X)
    a = np.asarray(a, dtype=np.int64)
    n, k = X.shape
    if len(spec.members) == 1:
        fitted = fit_classifier(spec.members[0], X, a, m)
        fitted.diagnostics["weights"] = {spec.members[0].label(): 1.0}
        return fitted
    counts = np.bincount(a, minlength=m)
    if np.any(counts < spec.stacking_folds):
        raise LearnerError("every class needs at least stacking_folds observations to stack")
    folds = stacking_folds(a, spec.stacking_folds, spec.seed)

    def fit_one(s, tr, va):
        return fit_classifier(s, X[tr], a[tr], m).predict_proba(X[va])

    kept, oof = _member_loop(spec, fit_one, n, folds, (n, m))
    if spec.weight_loss == LOG:
        Q = np.column_stack([P[np.arange(n), a] for P in oof])
        obj = lambda ww: _nll(Q, ww)
    else:
        Yoh = np.eye(m)[a].ravel()
        Z = np.column_stack([P.ravel() for P in oof])
        obj = lambda ww: _losses(Z, Yoh, ww, SQUARED)
    w, gap = simplex_weights(obj, len(kept))
    active = [(s, wt) for s, wt in zip(kept, w) if wt > 1e-10]
    total = sum(wt for _, wt in active)
    models = [(fit_classifier(s, X, a, m), wt / total) for s, wt in active]

    def proba(Xn):
        return sum(wt * mdl.predict_proba(Xn) for mdl, wt in models)

    diag = {"weights": {s.label(): float(wt) for s, wt in zip(kept, w)}, "weight_gap": gap}
    return FittedClassifier(proba, k, m, diag)


def fit_ensemble_regressor(spec, X, y, link=IDENTITY) -> FittedRegressor:
    if isinstance(spec, LearnerSpec):
        return fit_regressor(spec, X, y, link)
    return stack_regressor(spec, X, y, link)


def fit_ensemble_classifier(spec, X, a, m) -> FittedClassifier:
    if isinstance(spec, LearnerSpec):
        return fit_classifier(spec, X, a, m)
    return stack_classifier(spec, X, a, m)
