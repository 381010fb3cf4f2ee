"""Learner specifications and the single-learner fit entry points."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from . import glm
from .gbt import Binned, BoostedTrees, apply_bins

logger = logging.getLogger(__name__)

KINDS = ("mean", "glm", "glm_ridge", "knn", "gbt")
IDENTITY = "identity"
LOGIT = "logit"

_DEFAULTS = {
    "mean": {},
    "glm": {},
    "glm_ridge": {"lam": 1.0},
    "knn": {"k": 10},
    "gbt": {"trees": 100, "depth": 2, "learning_rate": 0.1, "min_leaf": 5,
            "l2": 1.0, "max_bins": 255},
}

PROB_EPS = 1e-12


class LearnerError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        p = dict(self.params)
        unknown = set(p) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown hyperparameters for {self.kind}: {sorted(unknown)}")
        hp = {**_DEFAULTS[self.kind], **p}
        if self.kind == "knn" and hp["k"] < 1:
            raise ValueError("knn needs k >= 1")
        if self.kind == "glm_ridge" and hp["lam"] < 0:
            raise ValueError("ridge penalty must be nonnegative")
        if self.kind == "gbt":
            if hp["trees"] < 1 or hp["depth"] < 1:
                raise ValueError("gbt needs trees >= 1 and depth >= 1")
            if not 0 < hp["learning_rate"] <= 1:
                raise ValueError("gbt learning_rate must lie in (0, 1]")
            if hp["min_leaf"] < 1 or not 2 <= hp["max_bins"] <= 65535:
                raise ValueError("gbt needs min_leaf >= 1 and 2 <= max_bins <= 65535")
        object.__setattr__(self, "params", tuple(sorted(p.items())))

    @classmethod
    def make(cls, kind, **params):
        return cls(kind, tuple(params.items()))

    @property
    def hyper(self) -> dict:
        return {**_DEFAULTS[self.kind], **dict(self.params)}

    def label(self) -> str:
        if not self.params:
            return self.kind
        return self.kind + "(" + ",".join(f"{k}={v}" for k, v in self.params) + ")"


class FittedRegressor:
    """Fitted conditional-mean model. Logit-link predictions lie in (0, 1)."""

    def __init__(self, predict_fn, feature_dim, link, diagnostics=None):
        self._predict = predict_fn
        self.feature_dim = feature_dim
        self.link = link
        self.diagnostics = diagnostics or {}

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {X.shape[1]}")
        return self._predict(X)


class FittedClassifier:
    """Fitted model for ``P(A = a | W)``; ``predict_proba`` rows sum to one."""

    def __init__(self, proba_fn, feature_dim, n_classes, diagnostics=None):
        self._proba = proba_fn
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.diagnostics = diagnostics or {}

    def predict_proba(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim} features, got {X.shape[1]}")
        P = np.clip(self._proba(X), 0.0, None)
        return P / P.sum(axis=1, keepdims=True)


def _as_matrix(X):
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _fit_glm_regressor(X, y, link, lam, diag):
    mu, sd = glm._standardize(X)
    Z = glm.design(X, mu, sd)
    if lam == 0.0 and glm.is_singular(Z):
        lam = glm.SINGULAR_RIDGE
        diag["singular_fallback"] = True
        logger.info("singular GLM design; refitting with ridge %g", lam)
    diag["ridge"] = lam
    if link == LOGIT:
        beta, it, ok = glm.fit_logistic(Z, y, lam)
        diag.update(iterations=it, converged=ok)
        return lambda Xn: expit(glm.design(Xn, mu, sd) @ beta)
    beta = glm.fit_linear(Z, y, lam)
    return lambda Xn: glm.design(Xn, mu, sd) @ beta


def fit_regressor(spec: LearnerSpec, X, y, link: str = IDENTITY) -> FittedRegressor:
    """Fit a single regression learner.

    Parameters
    ----------
    spec : LearnerSpec
    X : array, shape (n, k)
    y : array, shape (n,)
        With ``link="logit"`` the responses must lie in [0, 1] (binary or
        scaled continuous); fitting then uses the Bernoulli log-likelihood.
    link : {"identity", "logit"}
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n, k = X.shape
    if n < 2:
        raise LearnerError("need at least two observations")
    if link not in (IDENTITY, LOGIT):
        raise ValueError(f"unknown link {link!r}")
    if link == LOGIT and (y.min() < 0 or y.max() > 1):
        raise LearnerError("logit link needs responses in [0, 1]")
    hp = spec.hyper
    diag = {"learner": spec.label()}
    if spec.kind == "mean":
        c = float(y.mean())
        fn = lambda Xn: np.full(len(Xn), c)
    elif spec.kind in ("glm", "glm_ridge"):
        lam = hp.get("lam", 0.0)
        fn = _fit_glm_regressor(X, y, link, lam, diag)
    elif spec.kind == "knn":
        kk = min(int(hp["k"]), n)
        mu, sd = glm._standardize(X)
        tree = cKDTree((X - mu) / sd)
        yy = y.copy()

        def fn(Xn):
            _, idx = tree.query((Xn - mu) / sd, k=kk)
            idx = idx.reshape(len(Xn), kk)
            return yy[idx].mean(axis=1)
    else:
        model = BoostedTrees(trees=hp["trees"], depth=hp["depth"],
                             learning_rate=hp["learning_rate"], min_leaf=hp["min_leaf"],
                             l2=hp["l2"], max_bins=hp["max_bins"],
                             logistic=(link == LOGIT)).fit(X, y)
        if link == LOGIT:
            fn = lambda Xn: expit(model.predict_raw(Xn))
        else:
            fn = model.predict_raw
    if link == LOGIT:
        inner = fn
        fn = lambda Xn: np.clip(inner(Xn), PROB_EPS, 1 - PROB_EPS)
    return FittedRegressor(fn, k, link, diag)


def fit_classifier(spec: LearnerSpec, X, a, m: int) -> FittedClassifier:
    """Fit ``P(A = a | X)`` for class codes ``0..m-1``.

    The GLM kinds use a softmax model fitted by Newton's method; the
    nonparametric kinds fit one-vs-rest probability models whose outputs are
    renormalized row-wise.
    """
    X = _as_matrix(X)
    a = np.asarray(a, dtype=np.int64)
    n, k = X.shape
    counts = np.bincount(a, minlength=m)
    if len(counts) > m or np.any(counts == 0):
        missing = np.flatnonzero(counts[:m] == 0).tolist()
        raise LearnerError(f"classes {missing} absent from training data")
    hp = spec.hyper
    diag = {"learner": spec.label()}
    if spec.kind == "mean":
        freq = counts / n
        fn = lambda Xn: np.tile(freq, (len(Xn), 1))
    elif spec.kind in ("glm", "glm_ridge"):
        lam = hp.get("lam", 0.0)
        mu, sd = glm._standardize(X)
        Z = glm.design(X, mu, sd)
        if lam == 0.0 and glm.is_singular(Z):
            lam = glm.SINGULAR_RIDGE
            diag["singular_fallback"] = True
        B, it, ok = glm.fit_softmax(Z, a, m, lam)
        diag.update(iterations=it, converged=ok, ridge=lam)
        fn = lambda Xn: glm.softmax_proba(glm.design(Xn, mu, sd), B)
    elif spec.kind == "knn":
        kk = min(int(hp["k"]), n)
        mu, sd = glm._standardize(X)
        tree = cKDTree((X - mu) / sd)
        onehot = np.eye(m)[a]

        def fn(Xn):
            _, idx = tree.query((Xn - mu) / sd, k=kk)
            idx = idx.reshape(len(Xn), kk)
            return onehot[idx].mean(axis=1)
    else:
        binned = Binned.from_data(np.ascontiguousarray(X), int(hp["max_bins"]))
        models = []
        for c in range(m):
            yc = (a == c).astype(float)
            models.append(BoostedTrees(trees=hp["trees"], depth=hp["depth"],
                                       learning_rate=hp["learning_rate"],
                                       min_leaf=hp["min_leaf"], l2=hp["l2"],
                                       max_bins=hp["max_bins"], logistic=True).fit_binned(binned, yc))

        def fn(Xn):
            Xb = apply_bins(np.ascontiguousarray(Xn), binned.edges)
            return np.column_stack([expit(mdl.predict_binned(Xb)) for mdl in models])
    return FittedClassifier(fn, k, m, diag)
