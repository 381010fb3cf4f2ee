"""Influence-function evaluation, Wald inference, joint covariance and funnel plots.

Every function here takes already-targeted quantities; nothing is fitted.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

FUNNEL_LEVELS = (0.95, 0.99, 0.999)

# Acklam's rational approximation to the inverse normal CDF
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_quantile(p: float) -> float:
    """Standard normal quantile.

    Acklam's approximation (relative error about 1e-9) followed by one Halley
    step against ``math.erfc``, which brings the error to a few ulps.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie strictly between 0 and 1")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def eif_phi(a, A, Y, pi_a, mu_bar_a, phi):
    """Direct-standardization EIF at targeted nuisances, one value per row."""
    ind = (A == a)
    return np.where(ind, (Y - mu_bar_a) / np.where(ind, pi_a, 1.0), 0.0) + mu_bar_a - phi


def eif_psi1(a, A, Y, p_a, psi1):
    return (A == a) / p_a * (Y - psi1)


def eif_psi2(a, A, Y, pi_a, mu_tilde, p_a, psi2):
    return (pi_a * (Y - mu_tilde) + (A == a) * (mu_tilde - psi2)) / p_a


def eif_delta(D1, D2, psi1, psi2, kind):
    """Combine the psi1 and psi2 EIFs into the excess-risk or ratio EIF."""
    if kind == "er":
        return D1 - D2
    if kind == "smr":
        if psi2 == 0 or not np.isfinite(psi2):
            raise ZeroDivisionError("SMR undefined: psi2 is zero")
        return D1 / psi2 - psi1 / psi2 ** 2 * D2
    raise ValueError(f"unknown delta kind {kind!r}")


@dataclass(frozen=True)
class Interval:
    se: float
    lo: float
    hi: float


def standard_error(D) -> float:
    D = np.asarray(D, dtype=float)
    return math.sqrt(float(np.mean(D * D)) / len(D))


def inference(D, estimate: float, level: float = 0.95) -> Interval:
    """Wald interval ``estimate +/- z * sqrt(mean(D^2) / n)``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    se = standard_error(D)
    z = normal_quantile(0.5 + 0.5 * level)
    return Interval(se, estimate - z * se, estimate + z * se)


def joint_covariance(Ds) -> np.ndarray:
    """Covariance of provider estimates: ``mean(D_a1 * D_a2) / n``.

    ``Ds`` is a list of n-vectors or an (n, m) matrix with one column per provider.
    """
    D = np.column_stack(Ds) if isinstance(Ds, (list, tuple)) else np.asarray(Ds, dtype=float)
    n = D.shape[0]
    S = D.T @ D / n / n
    S = 0.5 * (S + S.T)
    # the diagonal reuses the per-provider standard errors so the two agree bit for bit
    S[np.diag_indices_from(S)] = [standard_error(D[:, a]) ** 2 for a in range(D.shape[1])]
    return S


@dataclass(frozen=True)
class FunnelPoint:
    label: object
    estimate: float
    variance: float
    precision: float
    classification: str


@dataclass(frozen=True)
class FunnelTable:
    points: tuple
    levels: tuple
    precision_grid: np.ndarray
    lower: dict  # level -> array over precision_grid
    upper: dict
    log_scale: bool = False
    omitted: tuple = ()


def control_limits(precision, level, log_scale=False):
    z = normal_quantile(0.5 + 0.5 * level)
    half = z * np.sqrt(1.0 / np.asarray(precision, dtype=float))
    if log_scale:
        return np.exp(-half), np.exp(half)
    return 1.0 - half, 1.0 + half


def classify(estimate, precision, levels, log_scale=False) -> str:
    """Most extreme level at which an estimate falls outside the limits."""
    for level in sorted(levels, reverse=True):
        lo, hi = control_limits(precision, level, log_scale)
        if estimate < lo:
            return f"low at {level * 100:g}%"
        if estimate > hi:
            return f"high at {level * 100:g}%"
    return "within limits"


def funnel(labels, estimates, variances, levels=None, log_scale=False, n_grid=200) -> FunnelTable:
    """Funnel-plot data around the null ratio 1, with precision = 1 / variance.

    Under ``log_scale`` the variance is taken to be that of the log ratio.
    Providers with zero or undefined variance are left out with a warning.
    """
    levels = tuple(sorted(levels)) if levels else FUNNEL_LEVELS
    pts, omitted = [], []
    for lab, est, var in zip(labels, estimates, variances):
        if not (np.isfinite(est) and np.isfinite(var)) or var <= 0:
            logger.warning("provider %s omitted from funnel (variance %r)", lab, var)
            omitted.append(lab)
            continue
        q = 1.0 / var
        pts.append(FunnelPoint(lab, float(est), float(var), q, classify(est, q, levels, log_scale)))
    if pts:
        qs = np.array([p.precision for p in pts])
        lo_q, hi_q = qs.min(), qs.max()
        if lo_q == hi_q:
            lo_q, hi_q = 0.5 * lo_q, 2.0 * hi_q
        grid = np.geomspace(lo_q, hi_q, n_grid)
    else:
        grid = np.empty(0)
    lower, upper = {}, {}
    for level in levels:
        lower[level], upper[level] = control_limits(grid, level, log_scale)
    return FunnelTable(tuple(pts), levels, grid, lower, upper, log_scale, tuple(omitted))
