"""Small regression toolkit shared by the estimators (not public API)."""

from __future__ import annotations

import warnings

import numpy as np

from ..core import EstimatorError


def ols(design: np.ndarray, y: np.ndarray, drop_collinear: bool = True):
    """OLS with pivoted collinearity handling.

    Returns (beta, resid, xtx_inv, kept) where dropped columns carry
    coefficient 0 and are excluded from xtx_inv (kept indexes the retained
    columns).  Dropping is reported through a warning.
    """
    n, k = design.shape
    kept = _independent_columns(design)
    if len(kept) < k and drop_collinear:
        warnings.warn(f"dropping {k - len(kept)} collinear column(s) from the design")
    x = design[:, kept]
    xtx = x.T @ x
    xtx_inv = np.linalg.pinv(xtx)
    beta_kept = xtx_inv @ (x.T @ y)
    beta = np.zeros(k)
    beta[kept] = beta_kept
    resid = y - design @ beta
    return beta, resid, xtx_inv, kept


def _independent_columns(design: np.ndarray, relative_tol: float = 1e-9) -> list[int]:
    _, r, piv = _qr_pivoted(design)
    diag = np.abs(np.diag(r))
    if diag.size == 0:
        return []
    keep = diag > relative_tol * diag.max()
    return sorted(piv[: int(keep.sum())].tolist())


def _qr_pivoted(a: np.ndarray):
    from scipy.linalg import qr

    q, r, piv = qr(a, mode="economic", pivoting=True)
    return q, r, piv


def cluster_cov(design, resid, clusters, xtx_inv, kept):
    """Cluster-robust (CR1) coefficient covariance on the kept columns."""
    x = design[:, kept]
    labels = np.unique(clusters)
    g = len(labels)
    n, k = x.shape
    meat = np.zeros((k, k))
    for lab in labels:
        sel = clusters == lab
        s = x[sel].T @ resid[sel]
        meat += np.outer(s, s)
    dof = (g / max(g - 1, 1)) * ((n - 1) / max(n - k, 1))
    return dof * xtx_inv @ meat @ xtx_inv


def hc1_cov(design, resid, xtx_inv, kept):
    x = design[:, kept]
    n, k = x.shape
    meat = (x * resid[:, None] ** 2).T @ x
    return (n / max(n - k, 1)) * xtx_inv @ meat @ xtx_inv


def expand_cov(cov_kept, kept, k):
    """Embed a covariance over kept columns into the full coefficient order."""
    out = np.zeros((k, k))
    idx = np.ix_(kept, kept)
    out[idx] = cov_kept
    return out


def two_sls(y, exog, endog, instruments):
    """2SLS of y on [exog, endog] using [exog, instruments] as the instrument set.

    Returns (beta over [exog | endog] columns, covariance HC1, first_stage_F
    per endogenous column, residuals).
    """
    z = np.column_stack([exog, instruments])
    x = np.column_stack([exog, endog])
    n = len(y)
    ztz_inv = np.linalg.pinv(z.T @ z)
    pz_x = z @ (ztz_inv @ (z.T @ x))
    xtpx_inv = np.linalg.pinv(x.T @ pz_x)
    beta = xtpx_inv @ (pz_x.T @ y)
    resid = y - x @ beta
    # HC1 sandwich with the projected design
    meat = (pz_x * resid[:, None] ** 2).T @ pz_x
    k = x.shape[1]
    cov = (n / max(n - k, 1)) * xtpx_inv @ meat @ xtpx_inv
    # partial first-stage F for each endogenous column
    fstats = []
    n_ex = exog.shape[1]
    for j in range(endog.shape[1] if endog.ndim > 1 else 1):
        w = endog[:, j] if endog.ndim > 1 else endog
        beta_r, resid_r, _, _ = ols(exog, w)
        beta_f, resid_f, _, _ = ols(z, w)
        df_num = z.shape[1] - n_ex
        df_den = n - z.shape[1]
        ssr_r = resid_r @ resid_r
        ssr_f = resid_f @ resid_f
        if ssr_f <= 0 or df_num <= 0:
            fstats.append(np.inf)
        else:
            fstats.append(((ssr_r - ssr_f) / df_num) / (ssr_f / df_den))
    return beta, cov, fstats, resid


def logistic_fit(design, y, max_iter=60, tol=1e-10):
    """Logistic regression by Newton iterations; raises on separation."""
    n, k = design.shape
    beta = np.zeros(k)
    for _ in range(max_iter):
        eta = design @ beta
        if np.abs(eta).max() > 30:
            raise EstimatorError("propensity model separated (diverging linear index)")
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1.0 - p)
        grad = design.T @ (y - p)
        hess = (design * w[:, None]).T @ design
        try:
            step = np.linalg.solve(hess + 1e-10 * np.eye(k), grad)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise EstimatorError("singular Hessian in propensity model") from exc
        beta = beta + step
        if np.abs(step).max() < tol:
            break
    eta = design @ beta
    p = 1.0 / (1.0 + np.exp(-eta))
    treated = y > 0.5
    if treated.any() and (~treated).any():
        if eta[treated].min() > eta[~treated].max() and np.ptp(eta) > 15:
            raise EstimatorError("propensity model degenerate (perfect separation)")
    return beta, p


def local_linear_weights(running, target, bandwidth, side=None):
    """Row vector a such that a @ y is the local-linear level estimate at target.

    Triangular kernel on |running - target| < bandwidth, optionally restricted
    to one side of zero (side=+1 keeps running > 0, side=-1 keeps running <= 0).
    """
    u = (running - target) / bandwidth
    w = np.clip(1.0 - np.abs(u), 0.0, None)
    if side is not None:
        w = np.where((running > 0) if side > 0 else (running <= 0), w, 0.0)
    z = np.column_stack([np.ones_like(running), running - target])
    wz = z * w[:, None]
    xtx = z.T @ wz
    if np.linalg.matrix_rank(xtx) < 2:
        raise EstimatorError("degenerate local-linear design (too few points in window)")
    return (np.linalg.solve(xtx, wz.T))[0]
