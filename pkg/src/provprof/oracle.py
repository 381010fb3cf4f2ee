"""Exact computations on finite-support laws of (W, A, Y) with binary Y.

A law is stored as an array ``prob[w, a, y]``. Everything here is plain
summation over atoms, so these routines serve as ground truth for the
estimation code: parameters, influence functions, second-order remainders
and directional derivatives.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import BINARY, Dataset

BASE = ("phi", "psi1", "psi2")
ALL = ("phi", "psi1", "psi2", "er", "smr")


class LawError(ValueError):
    pass


@dataclass(frozen=True)
class DiscreteLaw:
    prob: np.ndarray  # shape (n_w, m, 2)

    def __post_init__(self):
        P = np.asarray(self.prob, dtype=float)
        if P.ndim != 3 or P.shape[2] != 2:
            raise LawError("law must have shape (n_w, m, 2)")
        if np.any(P < 0) or abs(P.sum() - 1.0) > 1e-12:
            raise LawError("atom probabilities must be nonnegative and sum to 1")
        if np.any(P.sum(axis=(0, 2)) <= 0):
            raise LawError("every provider needs positive marginal mass")
        P = P.copy()
        P.setflags(write=False)
        object.__setattr__(self, "prob", P)

    @property
    def n_w(self) -> int:
        return self.prob.shape[0]

    @property
    def m(self) -> int:
        return self.prob.shape[1]

    # marginal and conditional pieces -------------------------------------------------
    @property
    def lam(self):
        return self.prob.sum(axis=(1, 2))

    @property
    def p(self):
        return self.prob.sum(axis=(0, 2))

    @property
    def pi(self):
        """``P(A = a | W = w)``, shape (n_w, m)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.prob.sum(axis=2) / self.lam[:, None]

    @property
    def mu_bar(self):
        """``E[Y | A = a, W = w]``, NaN on zero-mass cells."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.prob[:, :, 1] / self.prob.sum(axis=2)

    @property
    def mu_tilde(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.prob[:, :, 1].sum(axis=1) / self.lam

    @property
    def mu_dot(self):
        return self.prob[:, :, 1].sum(axis=0) / self.p

    def expect(self, f) -> float:
        """``E[f(O)]`` for an array ``f`` of shape (n_w, m, 2)."""
        return float(np.sum(self.prob * f))


def random_law(rng, n_w, m, floor=1e-3) -> DiscreteLaw:
    """Flat-Dirichlet atom probabilities mixed with a uniform floor of ``floor`` per atom."""
    K = n_w * m * 2
    if floor * K >= 1:
        raise ValueError("floor too large for the support size")
    x = floor + (1 - K * floor) * rng.dirichlet(np.ones(K))
    return DiscreteLaw((x / x.sum()).reshape(n_w, m, 2))


def law_from_counts(counts) -> DiscreteLaw:
    c = np.asarray(counts, dtype=float)
    return DiscreteLaw(c / c.sum())


def empirical_law(d: Dataset) -> tuple[DiscreteLaw, np.ndarray]:
    """Empirical law of a dataset whose covariate rows take finitely many values.

    Returns the law and the distinct covariate rows indexing its first axis.
    """
    if d.outcome_kind != BINARY:
        raise LawError("empirical laws need a binary outcome")
    cells, w_idx = np.unique(d.covariates, axis=0, return_inverse=True)
    w_idx = np.asarray(w_idx).reshape(-1)
    counts = np.zeros((len(cells), d.m, 2))
    np.add.at(counts, (w_idx, d.providers, d.outcomes.astype(np.int64)), 1.0)
    return law_from_counts(counts), cells


def exact_parameters(P: DiscreteLaw) -> dict:
    """All five parameters for every provider; phi is NaN where strong positivity fails."""
    pi, lam, p = P.pi, P.lam, P.p
    mu_t = P.mu_tilde
    mb = P.mu_bar
    phi = np.full(P.m, np.nan)
    for a in range(P.m):
        support = lam > 0
        if np.all(pi[support, a] > 0):
            phi[a] = float(np.sum(lam[support] * mb[support, a]))
    psi1 = P.mu_dot
    psi2 = np.array([np.nansum(lam * pi[:, a] * mu_t) / p[a] for a in range(P.m)])
    with np.errstate(divide="ignore", invalid="ignore"):
        smr = np.where(psi2 != 0, psi1 / psi2, np.nan)
    return {"phi": phi, "psi1": psi1, "psi2": psi2, "er": psi1 - psi2, "smr": smr}


def exact_eifs(P: DiscreteLaw, params: dict | None = None) -> dict:
    """Influence functions at every atom: ``out[name][w, a_obs, y, a_target]``."""
    params = exact_parameters(P) if params is None else params
    n_w, m = P.n_w, P.m
    y = np.array([0.0, 1.0])[None, None, :, None]
    a_obs = np.arange(m)[None, :, None, None]
    a_tgt = np.arange(m)[None, None, None, :]
    ind = (a_obs == a_tgt).astype(float)
    pi = P.pi[:, None, None, :]
    mb = P.mu_bar[:, None, None, :]
    mt = P.mu_tilde[:, None, None, None]
    p = P.p[None, None, None, :]
    phi = params["phi"][None, None, None, :]
    psi1 = params["psi1"][None, None, None, :]
    psi2 = params["psi2"][None, None, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        D_phi = np.where(ind > 0, (y - mb) / pi, 0.0) + mb - phi
    D1 = ind / p * (y - psi1)
    D2 = (pi * (y - mt) + ind * (mt - psi2)) / p
    shape = (n_w, m, 2, m)
    D_phi, D1, D2 = (np.broadcast_to(x, shape).copy() for x in (D_phi, D1, D2))
    D_er = D1 - D2
    with np.errstate(divide="ignore", invalid="ignore"):
        D_smr = D1 / psi2 - psi1 / psi2 ** 2 * D2
    return {"phi": D_phi, "psi1": D1, "psi2": D2, "er": D_er, "smr": D_smr}


def _check_support(P: DiscreteLaw, P0: DiscreteLaw):
    if P.prob.shape != P0.prob.shape:
        raise LawError("laws are defined on different supports")
    if np.any((P.prob > 0) != (P0.prob > 0)):
        raise LawError("laws are defined on different supports")


def remainders(P: DiscreteLaw, P0: DiscreteLaw) -> dict:
    """Exact second-order remainders ``R(P, P0)`` for phi, psi1 and psi2, per provider.

    phi:  E0[(1 - pi0/pi)(mu_bar_P - mu_bar_0)](a')
    psi1: (1 - p0/p)(mu_dot_P - mu_dot_0)(a')
    psi2: E0[(pi - pi0)(mu_tilde_0 - mu_tilde_P)] / p + (1 - p0/p)(psi2(P) - psi2(P0))
    """
    lam0 = P0.lam
    pi, pi0 = P.pi, P0.pi
    p, p0 = P.p, P0.p
    mb, mb0 = P.mu_bar, P0.mu_bar
    mt, mt0 = P.mu_tilde, P0.mu_tilde
    th, th0 = exact_parameters(P), exact_parameters(P0)
    R_phi = np.sum(lam0[:, None] * (1 - pi0 / pi) * (mb - mb0), axis=0)
    R1 = (1 - p0 / p) * (P.mu_dot - P0.mu_dot)
    cross = np.sum(lam0[:, None] * (pi - pi0) * (mt0 - mt)[:, None], axis=0)
    R2 = cross / p + (1 - p0 / p) * (th["psi2"] - th0["psi2"])
    return {"phi": R_phi, "psi1": R1, "psi2": R2}


@dataclass(frozen=True)
class VonMisesResult:
    lhs: dict
    rhs: dict
    residual: dict

    @property
    def max_abs_residual(self) -> float:
        return max(float(np.max(np.abs(r))) for r in self.residual.values())


def von_mises_check(P: DiscreteLaw, P0: DiscreteLaw) -> VonMisesResult:
    """Compare ``psi(P) - psi(P0) + E_P0[D(P)]`` with the remainder formula."""
    _check_support(P, P0)
    th, th0 = exact_parameters(P), exact_parameters(P0)
    D = exact_eifs(P, th)
    rhs = remainders(P, P0)
    lhs, res = {}, {}
    for name in BASE:
        drift = np.einsum("wby,wbya->a", P0.prob, D[name])
        lhs[name] = th[name] - th0[name] + drift
        res[name] = lhs[name] - rhs[name]
    return VonMisesResult(lhs, rhs, res)


def random_direction(rng, P0: DiscreteLaw, scale=1.0) -> np.ndarray:
    """A signed measure with total mass zero, supported where ``P0`` is positive."""
    s = rng.standard_normal(P0.prob.shape)
    s -= P0.expect(s)
    return scale * P0.prob * s


def max_step(P0: DiscreteLaw, direction) -> float:
    """Largest ``h`` with ``P0 +/- h * direction`` nonnegative."""
    d = np.abs(np.asarray(direction))
    with np.errstate(divide="ignore"):
        r = np.where(d > 0, P0.prob / d, np.inf)
    return float(r.min())


@dataclass(frozen=True)
class DerivativeReport:
    finite_difference: dict
    eif_prediction: dict
    relative_error: dict
    raw: dict  # name -> central differences on the step grid

    @property
    def max_relative_error(self) -> float:
        return max(float(np.nanmax(e)) for e in self.relative_error.values())


STEP_GRID = (1e-3, 1e-4, 1e-5)


def _shifted(P0, direction, h):
    Q = P0.prob + h * direction
    if np.any(Q < 0):
        raise LawError(f"perturbed law has negative mass at step {h}")
    return DiscreteLaw(Q / Q.sum())


def pathwise_derivative_check(P0: DiscreteLaw, direction, steps=STEP_GRID,
                              names=ALL) -> DerivativeReport:
    """Central finite differences of each parameter along ``P0 + h * direction``.

    The derivative estimate is the Richardson extrapolation of the first two
    grid steps (ratio 10, error ``O(h^4)``); it is compared with the EIF
    prediction ``sum_o direction(o) * D(P0)(o)``.
    """
    direction = np.asarray(direction, dtype=float)
    if abs(direction.sum()) > 1e-12:
        raise LawError("direction must have total mass zero")
    if max_step(P0, direction) < max(steps):
        raise LawError("direction too large for the step grid")
    D = exact_eifs(P0)
    raw = {nm: [] for nm in names}
    for h in steps:
        up = exact_parameters(_shifted(P0, direction, h))
        dn = exact_parameters(_shifted(P0, direction, -h))
        for nm in names:
            raw[nm].append((up[nm] - dn[nm]) / (2 * h))
    fd, pred, rel = {}, {}, {}
    for nm in names:
        c = raw[nm]
        r = (steps[0] / steps[1]) ** 2
        fd[nm] = (r * c[1] - c[0]) / (r - 1)
        pred[nm] = np.einsum("wby,wbya->a", direction, D[nm])
        scale = np.maximum(np.abs(pred[nm]), 1e-12)
        rel[nm] = np.abs(fd[nm] - pred[nm]) / scale
    return DerivativeReport(fd, pred, rel, raw)


def eif_variances(P: DiscreteLaw) -> dict:
    """Efficiency bounds ``Var_P[D]`` per parameter and provider."""
    D = exact_eifs(P)
    return {nm: np.einsum("wby,wbya->a", P.prob, D[nm] ** 2) for nm in D}


def low_propensity_law(rng, n_w, m, target_max=0.05, floor=1e-3):
    """Random law with one (stratum, provider) cell forced below ``target_max`` propensity.

    Returns ``(law, provider, stratum)``.
    """
    base = random_law(rng, n_w, m, floor).prob.copy()
    a = int(rng.integers(m))
    w = int(rng.integers(n_w))
    goal = rng.uniform(0.2 * target_max, 0.9 * target_max)
    cell = base[w, a].sum()
    rest = base[w].sum() - cell
    # choose the cell mass so that pi(a | w) = goal after rescaling
    base[w, a] *= goal * rest / ((1 - goal) * cell)
    return DiscreteLaw(base / base.sum()), a, w


def oracle_suite(laws: int = 200, seed: int = 0, max_w: int = 3, max_m: int = 3) -> dict:
    """Von-Mises residuals over random law pairs; max |residual| per parameter."""
    if laws < 1:
        raise ValueError("laws must be at least 1")
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in BASE}
    for _ in range(laws):
        n_w = int(rng.integers(1, max_w + 1))
        m = int(rng.integers(2, max_m + 1))
        P0, P = random_law(rng, n_w, m), random_law(rng, n_w, m)
        res = von_mises_check(P, P0).residual
        for name in BASE:
            worst[name] = max(worst[name], float(np.max(np.abs(res[name]))))
    return worst
