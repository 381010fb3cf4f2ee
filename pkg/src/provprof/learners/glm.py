"""Generalized linear models: least squares, logistic IRLS and softmax Newton.

All three accept an optional ridge penalty on the non-intercept
coefficients. Features are centred and scaled internally before fitting so
the penalty does not depend on covariate units.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit, log_softmax

SINGULAR_RIDGE = 1e-6


class SingularDesignError(np.linalg.LinAlgError):
    pass


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


def design(X, mu, sd):
    Z = (np.asarray(X, dtype=float) - mu) / sd
    return np.hstack([np.ones((Z.shape[0], 1)), Z])


def is_singular(Z, tol=1e-10) -> bool:
    s = np.linalg.svd(Z, compute_uv=False)
    return s.size == 0 or s[-1] <= tol * max(s[0], 1.0) * max(Z.shape)


def _penalty(p, lam):
    P = np.full(p, lam, dtype=float)
    P[0] = 0.0
    return P


def fit_linear(Z, y, lam=0.0, w=None):
    """Weighted (ridge) least squares; returns the coefficient vector."""
    w = np.ones(len(y)) if w is None else w
    Zw = Z * w[:, None]
    A = Zw.T @ Z + np.diag(_penalty(Z.shape[1], lam))
    return np.linalg.solve(A, Zw.T @ y)


def fit_logistic(Z, y, lam=0.0, tol=1e-8, max_iter=100):
    """Logistic IRLS for responses in [0, 1].

    Stops when the gradient of the penalized log-likelihood has Euclidean norm
    at most ``tol`` or after ``max_iter`` Newton steps. Returns
    ``(beta, iterations, converged)``.
    """
    P = _penalty(Z.shape[1], lam)
    beta = np.zeros(Z.shape[1])
    ybar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    beta[0] = np.log(ybar / (1 - ybar))

    def objective(b):
        eta = Z @ b
        ll = np.sum(y * eta - np.logaddexp(0.0, eta))
        return ll - 0.5 * np.sum(P * b * b)

    obj = objective(beta)
    for it in range(1, max_iter + 1):
        mu = expit(Z @ beta)
        grad = Z.T @ (y - mu) - P * beta
        if np.linalg.norm(grad) <= tol:
            return beta, it - 1, True
        wts = np.maximum(mu * (1 - mu), 1e-12)
        Hs = (Z * wts[:, None]).T @ Z + np.diag(P)
        try:
            step = np.linalg.solve(Hs, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(Hs, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = beta + t * step
            new = objective(cand)
            if new >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        beta, obj = cand, new
    mu = expit(Z @ beta)
    grad = Z.T @ (y - mu) - P * beta
    return beta, max_iter, bool(np.linalg.norm(grad) <= tol)


def fit_softmax(Z, labels, m, lam=0.0, tol=1e-8, max_iter=100):
    """Multinomial logistic regression by damped Newton.

    Class 0 is the reference (coefficients fixed at zero), giving
    ``(m - 1) * p`` free parameters. Returns ``(B, iterations, converged)``
    with ``B`` of shape ``(p, m)``.
    """
    n, p = Z.shape
    Yoh = np.zeros((n, m))
    Yoh[np.arange(n), labels] = 1.0
    P = np.tile(_penalty(p, lam), m - 1)
    B = np.zeros((p, m))
    freq = np.clip(Yoh.mean(axis=0), 1e-12, None)
    B[0] = np.log(freq) - np.log(freq[0])

    def objective(Bf):
        lp = log_softmax(Z @ Bf, axis=1)
        return np.sum(Yoh * lp) - 0.5 * np.sum(P * Bf[:, 1:].T.ravel() ** 2)

    obj = objective(B)
    q = m - 1
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pr = np.exp(log_softmax(Z @ B, axis=1))
        R = (Yoh - pr)[:, 1:]
        # parameter vector ordered class-major: theta[c*p:(c+1)*p] = B[:, c+1]
        grad = (Z.T @ R).T.ravel() - P * B[:, 1:].T.ravel()
        if np.linalg.norm(grad) <= tol:
            converged = True
            it -= 1
            break
        Pq = pr[:, 1:]
        A = (Pq[:, :, None] * Z[:, None, :]).reshape(n, q * p)
        H = -(A.T @ A)
        for c in range(q):
            sl = slice(c * p, (c + 1) * p)
            H[sl, sl] += (Z * Pq[:, c:c + 1]).T @ Z
        H[np.diag_indices_from(H)] += P
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        step = step.reshape(q, p).T
        t = 1.0
        while t > 1e-10:
            cand = B.copy()
            cand[:, 1:] += t * step
            new = objective(cand)
            if new >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        B, obj = cand, new
    return B, it, converged


def softmax_proba(Z, B):
    return np.exp(log_softmax(Z @ B, axis=1))
