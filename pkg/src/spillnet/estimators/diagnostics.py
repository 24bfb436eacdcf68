"""Information and specification diagnostics: nonparametric mutual information,
the joint spillover presence test, and the exponential-decay check for event
study coefficient paths.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma
from scipy.stats import chi2

from ..core import Dataset, InputError
from . import _linreg as lr
from .hac import hac_cov, hop_distances
from .reports import HacSpec

__all__ = [
    "mutual_information",
    "mutual_information_contributions",
    "spillover_test",
    "SpilloverTestResult",
    "event_study_decay_test",
    "DecayTestResult",
]


def mutual_information_contributions(
    coords: np.ndarray, alphas: np.ndarray, k: int = 5
) -> np.ndarray:
    """Per-point terms of the k-nearest-neighbor mutual information estimate.

    Kraskov-style estimator with the max-norm: psi(k) + psi(N) -
    psi(n_x + 1) - psi(n_alpha + 1) per point, whose mean is the estimate
    of I(x; alpha) in nats.
    """
    coords = np.asarray(coords, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    n = len(alphas)
    if n < 50:
        raise InputError("mutual information needs at least 50 points")
    # mutual information is invariant to marginal rescaling, and the max-norm
    # neighborhoods are meaningless when the axes carry different units
    coords = coords / np.maximum(coords.std(axis=0), 1e-12)
    alphas = alphas / max(alphas.std(), 1e-12)
    joint = np.column_stack([coords, alphas])
    # duplicate joint points break the kNN radius; jitter them deterministically
    _, counts = np.unique(joint, axis=0, return_counts=True)
    if np.any(counts > 1):
        warnings.warn("duplicate points jittered by 1e-9 for the kNN estimate")
        rng = np.random.default_rng(0)
        joint = joint + rng.normal(0.0, 1e-9, joint.shape)
        coords = joint[:, :2]
        alphas = joint[:, 2]
    tree_joint = cKDTree(joint)
    dist, _ = tree_joint.query(joint, k=k + 1, p=np.inf)
    eps = dist[:, -1]
    tree_x = cKDTree(coords)
    tree_a = cKDTree(alphas[:, None])
    nx = np.fromiter(
        (len(tree_x.query_ball_point(coords[i], eps[i] * (1 - 1e-12), p=np.inf)) - 1 for i in range(n)),
        dtype=float,
        count=n,
    )
    na = np.fromiter(
        (len(tree_a.query_ball_point(alphas[i : i + 1], eps[i] * (1 - 1e-12), p=np.inf)) - 1 for i in range(n)),
        dtype=float,
        count=n,
    )
    return digamma(k) + digamma(n) - digamma(nx + 1) - digamma(na + 1)


def mutual_information(coords: np.ndarray, alphas: np.ndarray, k: int = 5) -> float:
    """Mutual information between location and market position, nats, clipped at 0."""
    return float(max(mutual_information_contributions(coords, alphas, k).mean(), 0.0))


@dataclass(frozen=True)
class SpilloverTestResult:
    statistic: float
    dof: int
    p_value: float
    coefficients: dict
    rank_deficient: bool = False

    def reject(self, level: float = 0.05) -> bool:
        return self.p_value < level


def spillover_test(
    dataset: Dataset,
    f=None,
    hac: HacSpec = HacSpec(),
) -> SpilloverTestResult:
    """Joint Wald test that distance, network exposure, and their interaction
    carry no outcome signal beyond own source and controls.

    The augmented regression is Y on [1, S, f(d), exposure, f(d)*exposure, X]
    with f(d) = exp(-d/20) by default and d the distance to the nearest
    exposed unit; the coefficient covariance tapers cross-unit dependence in
    both miles and hops.  Degenerate regressors (no network, constant
    distance) are dropped and flagged as rank deficiency.
    """
    if f is None:
        f = lambda d: np.exp(-d / 20.0)
    treated = dataset.source > 0
    if treated.any():
        d = np.full(dataset.n_units, 0.0)
        untreated = ~treated
        if untreated.any():
            diff = dataset.coords[untreated][:, None, :] - dataset.coords[treated][None, :, :]
            d[untreated] = np.sqrt((diff**2).sum(axis=2)).min(axis=1)
    else:
        d = np.zeros(dataset.n_units)
    fd = f(d)
    exposure = dataset.network.astype(float) @ dataset.source
    design = np.column_stack(
        [
            np.ones(dataset.n_units),
            dataset.source,
            fd,
            exposure,
            fd * exposure,
            dataset.controls,
        ]
    )
    tested = [2, 3, 4]
    beta, resid, xtx_inv, kept = lr.ols(design, dataset.outcome)
    rank_deficient = len(kept) < design.shape[1]
    contrib = design[:, kept] * resid[:, None]
    hops = hop_distances(dataset.network, int(np.ceil(hac.network_bandwidth)))
    meat = hac_cov(contrib.T, dataset.coords, hops, hac)
    cov_kept = xtx_inv @ meat @ xtx_inv
    cov = lr.expand_cov(cov_kept, kept, design.shape[1])
    live = [j for j in tested if j in kept]
    names = {2: "distance", 3: "exposure", 4: "interaction"}
    if not live:
        return SpilloverTestResult(
            statistic=0.0,
            dof=0,
            p_value=1.0,
            coefficients={},
            rank_deficient=True,
        )
    b = beta[live]
    v = cov[np.ix_(live, live)]
    try:
        stat = float(b @ np.linalg.solve(v, b))
    except np.linalg.LinAlgError:
        stat = float(b @ np.linalg.pinv(v) @ b)
    dof = len(live)
    return SpilloverTestResult(
        statistic=stat,
        dof=dof,
        p_value=float(chi2.sf(stat, dof)),
        coefficients={names[j]: float(beta[j]) for j in live},
        rank_deficient=rank_deficient,
    )


@dataclass(frozen=True)
class DecayTestResult:
    applicable: bool
    kappa_hat: float
    joint_p: float
    residual_stat: float
    dof: int
    intercept: float


def event_study_decay_test(
    coeffs: np.ndarray,
    ses: np.ndarray | None = None,
    dt: float = 1.0,
) -> DecayTestResult:
    """Fit log|beta_k| = c - kappa*dt*k to post-event coefficients.

    coeffs are the post-event coefficients at horizons k = 0, 1, ...;
    weights follow from the delta method, var(log|b|) = (se/b)^2.  The joint
    p-value comes from the weighted residual sum of squares against its
    chi-square reference: under exact exponential decay the residuals vanish
    and p = 1.  A sign change in the coefficient path makes the log-linear
    fit meaningless; the result is then flagged as not applicable.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    nonzero = np.abs(coeffs) > 0
    if nonzero.sum() < 3:
        raise InputError("need at least 3 nonzero post-event coefficients")
    signs = np.sign(coeffs[nonzero])
    if not (np.all(signs > 0) or np.all(signs < 0)):
        return DecayTestResult(
            applicable=False,
            kappa_hat=float("nan"),
            joint_p=float("nan"),
            residual_stat=float("nan"),
            dof=0,
            intercept=float("nan"),
        )
    ks = np.flatnonzero(nonzero).astype(float)
    logs = np.log(np.abs(coeffs[nonzero]))
    if ses is None:
        w = np.ones_like(logs)
    else:
        ses = np.asarray(ses, dtype=float)[nonzero]
        rel = np.maximum(ses / np.abs(coeffs[nonzero]), 1e-8)
        w = 1.0 / rel**2
    z = np.column_stack([np.ones_like(ks), ks])
    xtx = z.T @ (z * w[:, None])
    coef = np.linalg.solve(xtx, (z * w[:, None]).T @ logs)
    resid = logs - z @ coef
    stat = float(np.sum(w * resid**2))
    dof = max(len(ks) - 2, 1)
    kappa_hat = float(-coef[1] / dt)
    return DecayTestResult(
        applicable=True,
        kappa_hat=kappa_hat,
        joint_p=float(chi2.sf(stat, dof)),
        residual_stat=stat,
        dof=dof,
        intercept=float(coef[0]),
    )
