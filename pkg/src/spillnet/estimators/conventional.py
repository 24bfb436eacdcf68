"""The five benchmark estimators: pseudo-panel OLS, weighted contrast, dose
response, boundary discontinuity, and network instrumental variables.

Every estimator reports a "direct" effect (per-unit-source coefficient,
rescaled so the no-spillover truth is 0.100) and a "total_border" effect
(treated-side level within the border band, rescaled the same way); the
normalization constants come from the dataset metadata and are echoed in the
report diagnostics.
"""

from __future__ import annotations

import numpy as np

from ..core import Dataset, EstimatorError, InputError
from . import _linreg as lr
from .reports import EstimateReport, build_report

__all__ = ["twfe", "did", "gps", "spatial_rd", "network_iv", "ik_bandwidth"]


def _scales(dataset: Dataset) -> dict:
    ex = dataset.extras or {}
    return {
        "direct_scale": float(ex.get("direct_scale", 0.025)),
        "total_scale": float(ex.get("total_scale", 1.0)),
        "border": float(ex.get("border", 50.0)),
        "band": float(ex.get("border_band", 5.0)),
    }


def _band_masks(dataset: Dataset, border: float, band: float):
    x1 = dataset.coords[:, 0]
    treated_band = (x1 > border) & (x1 <= border + band)
    control_band = (x1 <= border) & (x1 > border - band)
    return treated_band, control_band


# ---------------------------------------------------------------------------
# Pseudo-panel two-way fixed effects
# ---------------------------------------------------------------------------


def twfe(dataset: Dataset, n_bins: int = 25) -> EstimateReport:
    """OLS on the pseudo-panel: second-axis location bins play the time role,
    the treated side plays the unit role; SEs cluster on the bins.
    """
    if n_bins < 2:
        raise InputError("n_bins must be >= 2")
    sc = _scales(dataset)
    x2 = dataset.coords[:, 1]
    lo, hi = x2.min(), x2.max()
    bins = np.minimum(((x2 - lo) / max(hi - lo, 1e-12) * n_bins).astype(int), n_bins - 1)
    dummies = np.zeros((dataset.n_units, n_bins - 1))
    for b in range(1, n_bins):
        dummies[bins == b, b - 1] = 1.0
    treated = (dataset.coords[:, 0] > sc["border"]).astype(float)
    design = np.column_stack(
        [np.ones(dataset.n_units), dataset.source, treated, dataset.controls, dummies]
    )
    beta, resid, xtx_inv, kept = lr.ols(design, dataset.outcome)
    cov = lr.expand_cov(
        lr.cluster_cov(design, resid, bins, xtx_inv, kept), kept, design.shape[1]
    )

    direct = sc["direct_scale"] * beta[1]
    direct_se = sc["direct_scale"] * np.sqrt(max(cov[1, 1], 0.0))

    # border-band contrast: treated-band minus control-band outcome means,
    # adjusted for controls and bin effects at the fitted coefficients
    treated_band, control_band = _band_masks(dataset, sc["border"], sc["band"])
    if treated_band.sum() < 2 or control_band.sum() < 2:
        raise EstimatorError("too few units in the border band")
    adj_cols = np.column_stack([dataset.controls, dummies])
    theta_idx = np.arange(3, design.shape[1])
    y = dataset.outcome
    adj_vals = y - adj_cols @ beta[theta_idx]
    contrast = float(adj_vals[treated_band].mean() - adj_vals[control_band].mean())
    dx = adj_cols[treated_band].mean(0) - adj_cols[control_band].mean(0)
    var_means = adj_vals[treated_band].var(ddof=1) / treated_band.sum() + adj_vals[
        control_band
    ].var(ddof=1) / control_band.sum()
    var_adj = float(dx @ cov[np.ix_(theta_idx, theta_idx)] @ dx)
    contrast_se = float(np.sqrt(max(var_means + var_adj, 0.0)))

    return build_report(
        "twfe",
        estimates={
            "direct": direct,
            "total_border": sc["total_scale"] * contrast,
            "coef_source": beta[1],
        },
        std_errors={
            "direct": direct_se,
            "total_border": sc["total_scale"] * contrast_se,
            "coef_source": np.sqrt(max(cov[1, 1], 0.0)),
        },
        covariance=cov,
        covariance_names=("const", "source", "treated"),
        diagnostics={
            "n_bins": n_bins,
            "dropped_columns": design.shape[1] - len(kept),
            **sc,
        },
    )


# ---------------------------------------------------------------------------
# Treated-vs-control contrast with inverse-propensity weighting
# ---------------------------------------------------------------------------


def did(dataset: Dataset) -> EstimateReport:
    """Cross-sectional treated/control contrast, reweighting controls by the
    odds of treatment estimated from the confounders (propensities clipped to
    [0.01, 0.99]).
    """
    sc = _scales(dataset)
    treated = dataset.coords[:, 0] > sc["border"]
    if not treated.any() or treated.all():
        raise EstimatorError("need both treated and control units")
    design = np.column_stack([np.ones(dataset.n_units), dataset.controls])
    _, p = lr.logistic_fit(design, treated.astype(float))
    p = np.clip(p, 0.01, 0.99)
    y = dataset.outcome

    def ipw_att(mask: np.ndarray):
        t = mask & treated
        c = mask & ~treated
        if t.sum() < 2 or c.sum() < 2:
            raise EstimatorError("too few units in the contrast window")
        w = p[c] / (1.0 - p[c])
        mu1 = y[t].mean()
        mu0 = float(np.sum(w * y[c]) / np.sum(w))
        att = mu1 - mu0
        # per-unit influence terms of the contrast (treated then control)
        inf_t = (y[t] - mu1) / t.sum()
        inf_c = -w * (y[c] - mu0) / np.sum(w)
        return att, t, c, inf_t, inf_c

    # score space of the propensity model: projecting influence terms on it
    # accounts for the variance reduction from estimating the weights
    scores = design * (treated.astype(float) - p)[:, None]
    score_proj = scores @ np.linalg.pinv(scores.T @ scores) @ scores.T

    def scaled_report(mask: np.ndarray, denom_mask: np.ndarray, target: float):
        # the report scale divides by the mean source over denom_mask, so the
        # ratio's sampling noise partially cancels; the delta method combines
        # the contrast and denominator influence terms
        att, t, c, inf_t, inf_c = ipw_att(mask)
        s_mean = dataset.source[denom_mask].mean()
        scale = target * dataset.extras.get("kappa_true", 0.25) / s_mean
        est = scale * att
        inf_s = np.zeros(dataset.n_units)
        inf_s[denom_mask] = (dataset.source[denom_mask] - s_mean) / denom_mask.sum()
        inf = np.zeros(dataset.n_units)
        inf[t] = inf_t
        inf[c] = inf_c
        combined = scale * inf - (est / s_mean) * inf_s
        combined = combined - score_proj @ combined
        return est, float(np.sqrt(np.sum(combined**2))), att

    est_direct, se_direct, att = scaled_report(
        np.ones(dataset.n_units, dtype=bool), treated, 0.1
    )
    treated_band, control_band = _band_masks(dataset, sc["border"], sc["band"])
    est_total, se_total, att_band = scaled_report(
        treated_band | control_band, treated_band, 0.1
    )

    # plain ATT standard error for the raw diagnostic
    _, t_all, c_all, inf_t, inf_c = ipw_att(np.ones(dataset.n_units, dtype=bool))
    att_se = float(np.sqrt(np.sum(inf_t**2) + np.sum(inf_c**2)))

    return build_report(
        "did",
        estimates={
            "direct": est_direct,
            "total_border": est_total,
            "att_raw": att,
        },
        std_errors={
            "direct": se_direct,
            "total_border": se_total,
            "att_raw": att_se,
        },
        diagnostics={
            "propensity_range": [float(p.min()), float(p.max())],
            "att_band_raw": att_band,
            **sc,
        },
    )


# ---------------------------------------------------------------------------
# Dose response conditioning on the generalized propensity score
# ---------------------------------------------------------------------------


def gps(dataset: Dataset, bandwidth: float | None = None) -> EstimateReport:
    """Dose response among exposed units conditioning on the estimated source
    density given confounders (the generalized propensity score).

    The outcome model is the standard quadratic form in (dose, score); the
    dose response at s is the partial mean over the exposed covariate profile,
    the direct effect is its average derivative over the observed positive
    doses, and the total border effect contrasts the dose response at the
    border-band dose against the zero-dose baseline read off the unexposed
    units.  Everything is a linear functional of the outcomes, so standard
    errors follow from the functional weights.  A kernel-smoothed dose
    response (leave-one-out bandwidth when not supplied) is reported as a
    diagnostic curve.
    """
    sc = _scales(dataset)
    s = dataset.source
    pos = s > 0
    if pos.sum() < 20 or np.ptp(s[pos]) < 1e-12:
        raise EstimatorError("needs continuous source variation among exposed units")
    y = dataset.outcome
    xs = dataset.controls
    # density model: S | X normal-linear, fitted on exposed units
    s_pos = s[pos]
    y_pos = y[pos]
    n_pos = pos.sum()
    design = np.column_stack([np.ones(n_pos), xs[pos]])
    pi, resid, _, _ = lr.ols(design, s_pos)
    sigma = max(np.sqrt(resid @ resid / max(n_pos - design.shape[1], 1)), 1e-8)
    mu_x = design @ pi

    def score_at(svals: np.ndarray) -> np.ndarray:
        z = (np.atleast_1d(svals)[:, None] - mu_x[None, :]) / sigma
        return np.exp(-0.5 * z**2) / (sigma * np.sqrt(2 * np.pi))

    r_own = np.exp(-0.5 * ((s_pos - mu_x) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    z_mat = np.column_stack(
        [np.ones(n_pos), s_pos, s_pos**2, r_own, r_own**2, s_pos * r_own]
    )
    # the columns live on wildly different scales; normalize before inverting
    col_scale = np.maximum(np.linalg.norm(z_mat, axis=0), 1e-12)
    z_unit = z_mat / col_scale
    hat = (np.linalg.pinv(z_unit.T @ z_unit, rcond=1e-10) @ z_unit.T) / col_scale[:, None]
    beta = hat @ y_pos
    resid_pos = y_pos - z_mat @ beta

    def partial_mean_rows(s0: float) -> np.ndarray:
        r = score_at(np.array([s0]))[0]
        return np.array([1.0, s0, s0**2, r.mean(), (r**2).mean(), s0 * r.mean()])

    def derivative_rows(s0: float) -> np.ndarray:
        r = score_at(np.array([s0]))[0]
        drds = -(s0 - mu_x) / sigma**2 * r
        return np.array(
            [0.0, 1.0, 2.0 * s0, drds.mean(), (2.0 * r * drds).mean(), (r + s0 * drds).mean()]
        )

    grid = np.quantile(s_pos, np.linspace(0.1, 0.9, 9))
    # average derivative over the observed dose distribution
    d_row = np.mean([derivative_rows(s0) for s0 in grid], axis=0)
    a_slope = d_row @ hat
    slope = float(a_slope @ y_pos)
    slope_se = float(np.sqrt(np.sum(a_slope**2 * resid_pos**2)))

    # total effect at the border band: fitted outcome level of the band units
    # minus the zero-dose baseline read off the unexposed units at the band
    # covariate profile (the baseline inherits whatever the unexposed side
    # actually carries, which is the contrast a dose-only model delivers)
    treated_band, _ = _band_masks(dataset, sc["border"], sc["band"])
    band_pos = treated_band[pos]
    if band_pos.sum() < 2:
        raise EstimatorError("too few exposed units in the border band")
    s_band = float(s_pos[band_pos].mean())
    mu_band = float(y_pos[band_pos].mean())
    design0 = np.column_stack([np.ones((~pos).sum()), xs[~pos]])
    beta0, resid0, xtx0_inv, kept0 = lr.ols(design0, y[~pos])
    x_target = np.r_[1.0, xs[pos][band_pos].mean(axis=0)]
    baseline = float(x_target @ beta0)
    q = x_target[kept0] @ xtx0_inv @ design0[:, kept0].T
    base_var = float(np.sum(q**2 * resid0**2))
    total_raw = mu_band - baseline
    # the band mean and the baseline share the band covariate profile, so the
    # contrast noise is the idiosyncratic scale, not the dose-model residual
    sigma0_sq = float(resid0 @ resid0 / max(len(resid0) - design0.shape[1], 1))
    band_var = sigma0_sq / band_pos.sum()
    total_se = float(np.sqrt(band_var + base_var))

    if bandwidth is None:
        bandwidth = _loocv_bandwidth(s_pos, y_pos)
    curve = _kernel_curve(s_pos, y_pos, grid, bandwidth)

    return build_report(
        "gps",
        estimates={
            "direct": sc["direct_scale"] * slope,
            "total_border": sc["total_scale"] * total_raw,
            "dose_response_slope": slope,
        },
        std_errors={
            "direct": sc["direct_scale"] * slope_se,
            "total_border": sc["total_scale"] * total_se,
            "dose_response_slope": slope_se,
        },
        diagnostics={
            "bandwidth": float(bandwidth),
            "grid": grid.tolist(),
            "dose_response": [float(partial_mean_rows(s0) @ beta) for s0 in grid],
            "kernel_curve": curve.tolist(),
            **sc,
        },
    )


def _kernel_curve(s, y, grid, bandwidth) -> np.ndarray:
    """Triangular-kernel local-linear smooth of the raw dose-outcome cloud."""
    out = np.empty(len(grid))
    for g, s0 in enumerate(grid):
        w = np.clip(1.0 - np.abs((s - s0) / bandwidth), 0.0, None)
        z = np.column_stack([np.ones_like(s), s - s0])
        xtx = z.T @ (z * w[:, None]) + 1e-10 * np.eye(2)
        out[g] = np.linalg.solve(xtx, (z * w[:, None]).T @ y)[0]
    return out


def _loocv_bandwidth(s: np.ndarray, y: np.ndarray) -> float:
    """Leave-one-out CV for the triangular-kernel local-linear regression of y on s."""
    spread = np.ptp(s)
    candidates = spread * np.array([0.15, 0.25, 0.4, 0.6, 0.9])
    best_h, best_err = candidates[-1], np.inf
    for h in candidates:
        u = (s[:, None] - s[None, :]) / h
        w = np.clip(1.0 - np.abs(u), 0.0, None)
        np.fill_diagonal(w, 0.0)
        err = 0.0
        ok = True
        for i in range(len(s)):
            wi = w[i]
            sw = wi.sum()
            if sw < 1e-12:
                ok = False
                break
            z = np.column_stack([np.ones(len(s)), s - s[i]])
            xtx = z.T @ (z * wi[:, None]) + 1e-10 * np.eye(2)
            coef = np.linalg.solve(xtx, (z * wi[:, None]).T @ y)
            err += (y[i] - coef[0]) ** 2
        if ok and err < best_err:
            best_err, best_h = err, h
    return float(best_h)


# ---------------------------------------------------------------------------
# Boundary discontinuity
# ---------------------------------------------------------------------------


def ik_bandwidth(running: np.ndarray, y: np.ndarray, cutoff: float = 0.0) -> float:
    """Optimal local-linear bandwidth for a boundary design (triangular kernel).

    Standard plug-in recipe: pilot variance from nearest neighbors at the
    cutoff, curvature from one-sided quadratic fits on pilot windows, then
    h = C_K * (sigma^2 / (f(c) * (m2+ - m2-)^2 + regularization))^{1/5} * N^{-1/5}
    with C_K = 3.4375 for the triangular kernel.
    """
    s = running - cutoff
    n = len(s)
    sd = s.std()
    h1 = 1.84 * sd * n ** (-1 / 5)
    # density and conditional variance at the cutoff from the pilot window
    n_lo = int(np.sum((s >= -h1) & (s <= 0)))
    n_hi = int(np.sum((s > 0) & (s <= h1)))
    if min(n_lo, n_hi) < 5:
        return max(4.0 * sd * n ** (-1 / 5), 1e-6)
    f_c = (n_lo + n_hi) / (2.0 * n * h1)
    var_lo = y[(s >= -h1) & (s <= 0)].var(ddof=1)
    var_hi = y[(s > 0) & (s <= h1)].var(ddof=1)
    # curvature: third-order global fit each side to get second derivatives
    def curvature(side_mask):
        ss = s[side_mask]
        yy = y[side_mask]
        z = np.column_stack([np.ones(len(ss)), ss, ss**2, ss**3])
        coef, *_ = np.linalg.lstsq(z, yy, rcond=None)
        return 2.0 * coef[2]

    m2_hi = curvature(s > 0)
    m2_lo = curvature(s <= 0)
    # regularization (keeps the denominator away from zero in flat designs)
    r_hi = 2160.0 * var_hi / (max(n_hi, 1) * h1**4)
    r_lo = 2160.0 * var_lo / (max(n_lo, 1) * h1**4)
    denom = f_c * ((m2_hi - m2_lo) ** 2 + r_hi + r_lo)
    num = var_lo + var_hi
    h = 3.4375 * (num / max(denom, 1e-12)) ** (1 / 5) * n ** (-1 / 5)
    return float(min(max(h, 1e-6), np.ptp(s)))


def spatial_rd(dataset: Dataset, bandwidth: float | None = None) -> EstimateReport:
    """Boundary discontinuity by one-sided local-linear fits with a triangular
    kernel; also fits the exponential attenuation of treated-minus-control
    differentials with distance to report a spatial decay scale.
    """
    sc = _scales(dataset)
    s = dataset.coords[:, 0] - sc["border"]
    # partial controls out of the outcome (common practice; improves precision)
    w = np.column_stack([np.ones(dataset.n_units), dataset.controls])
    beta_w, resid_y, _, _ = lr.ols(w, dataset.outcome)
    y = resid_y + dataset.outcome.mean()
    if bandwidth is None:
        bandwidth = ik_bandwidth(dataset.coords[:, 0], y, cutoff=sc["border"])
    n_hi = int(np.sum((s > 0) & (s <= bandwidth)))
    n_lo = int(np.sum((s <= 0) & (s >= -bandwidth)))
    if min(n_hi, n_lo) < 20:
        raise EstimatorError(
            f"fewer than 20 units on a side within bandwidth {bandwidth:.2f}"
        )
    a_hi = lr.local_linear_weights(s, 0.0, bandwidth, side=+1)
    a_lo = lr.local_linear_weights(s, 0.0, bandwidth, side=-1)
    gap = float((a_hi - a_lo) @ y)
    resid = _local_linear_residuals(s, y, bandwidth)
    # small-sample inflation per side mirrors the HC1 degrees correction
    infl_hi = n_hi / max(n_hi - 2, 1)
    infl_lo = n_lo / max(n_lo - 2, 1)
    var = float(
        infl_hi * np.sum((a_hi**2) * resid**2) + infl_lo * np.sum((a_lo**2) * resid**2)
    )
    gap_se = np.sqrt(max(var, 0.0))

    decay_scale = _attenuation_scale(s, y, bandwidth)

    return build_report(
        "spatial_rd",
        estimates={
            "direct": sc["total_scale"] * gap,
            "total_border": sc["total_scale"] * gap,
            "discontinuity": gap,
        },
        std_errors={
            "direct": sc["total_scale"] * gap_se,
            "total_border": sc["total_scale"] * gap_se,
            "discontinuity": gap_se,
        },
        diagnostics={
            "bandwidth": float(bandwidth),
            "n_left": n_lo,
            "n_right": n_hi,
            "decay_scale_miles": decay_scale,
            **sc,
        },
    )


def _local_linear_residuals(s, y, bandwidth) -> np.ndarray:
    """Residuals from side-specific local-linear fits at the cutoff window."""
    resid = np.zeros_like(y)
    for side in (+1, -1):
        mask = (s > 0) if side > 0 else (s <= 0)
        mask = mask & (np.abs(s) < bandwidth)
        if mask.sum() < 3:
            continue
        w = 1.0 - np.abs(s[mask]) / bandwidth
        z = np.column_stack([np.ones(mask.sum()), s[mask]])
        xtx = z.T @ (z * w[:, None]) + 1e-12 * np.eye(2)
        coef = np.linalg.solve(xtx, (z * w[:, None]).T @ y[mask])
        resid[mask] = y[mask] - z @ coef
    return resid


def _attenuation_scale(s, y, bandwidth) -> float:
    """Exponential decay scale of outcome differentials moving away from the border."""
    dists = np.linspace(2.0, 40.0, 6)
    gaps = []
    for d in dists:
        try:
            a_t = lr.local_linear_weights(s, d, bandwidth, side=+1)
            a_c = lr.local_linear_weights(s, -d, bandwidth, side=-1)
        except EstimatorError:
            return float("nan")
        gaps.append((a_t - a_c) @ y)
    gaps = np.asarray(gaps)
    if np.any(gaps <= 0):
        return float("nan")
    slope = np.polyfit(dists, np.log(gaps), 1)[0]
    return float(-1.0 / slope) if slope < 0 else float("inf")


# ---------------------------------------------------------------------------
# Network instrumental variables
# ---------------------------------------------------------------------------


def network_iv(dataset: Dataset) -> EstimateReport:
    """2SLS of the outcome on own source and network exposure, instrumenting
    current exposure with the exposure computed on the predetermined network.
    """
    if dataset.lagged_network is None:
        raise InputError("network_iv requires the lagged network")
    sc = _scales(dataset)
    exposure = dataset.network.astype(float) @ dataset.source
    exposure_lag = dataset.lagged_network.astype(float) @ dataset.source
    exog = np.column_stack(
        [np.ones(dataset.n_units), dataset.source, dataset.controls]
    )
    beta, cov, fstats, _ = lr.two_sls(
        dataset.outcome, exog, exposure[:, None], exposure_lag[:, None]
    )
    b_s, b_n = beta[1], beta[-1]
    se_s = np.sqrt(max(cov[1, 1], 0.0))

    treated_band, _ = _band_masks(dataset, sc["border"], sc["band"])
    s_band = dataset.source[treated_band].mean() if treated_band.any() else 0.0
    n_band = exposure[treated_band].mean() if treated_band.any() else 0.0
    c = np.zeros(len(beta))
    c[1] = s_band
    c[-1] = n_band
    total_raw = float(c @ beta)
    total_se = float(np.sqrt(max(c @ cov @ c, 0.0)))

    first_f = float(fstats[0])
    return build_report(
        "network_iv",
        estimates={
            "direct": sc["direct_scale"] * b_s,
            "total_border": sc["total_scale"] * total_raw,
            "beta_source": b_s,
            "beta_exposure": b_n,
        },
        std_errors={
            "direct": sc["direct_scale"] * se_s,
            "total_border": sc["total_scale"] * total_se,
            "beta_source": se_s,
            "beta_exposure": np.sqrt(max(cov[-1, -1], 0.0)),
        },
        covariance=cov,
        diagnostics={
            "first_stage_F": first_f,
            "weak_instrument": bool(first_f < 4.0),
            **sc,
        },
    )
