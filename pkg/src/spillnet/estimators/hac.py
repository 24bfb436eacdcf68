"""Covariance estimation robust to joint spatial and network dependence.

Cross-unit dependence is tapered by a product of Bartlett kernels, one in
geographic distance and one in network hop distance; pairs beyond either
bandwidth get zero weight, and disconnected pairs (infinite hop distance)
are always zeroed.
"""

from __future__ import annotations

import numpy as np

from .reports import HacSpec

__all__ = ["hop_distances", "hac_cov", "hac_weights"]


def hop_distances(adjacency: np.ndarray, max_hops: int) -> np.ndarray:
    """Shortest-path hop counts up to max_hops; beyond (or disconnected) is +inf.

    Breadth-first search implemented as vectorized frontier expansion, which
    is fast on the dense adjacency matrices used here.
    """
    adjacency = np.asarray(adjacency, dtype=bool)
    n = len(adjacency)
    hops = np.full((n, n), np.inf)
    np.fill_diagonal(hops, 0.0)
    reached = np.eye(n, dtype=bool)
    frontier = np.eye(n, dtype=bool)
    for level in range(1, max_hops + 1):
        frontier = (frontier @ adjacency) & ~reached
        if not frontier.any():
            break
        hops[frontier] = level
        reached |= frontier
    return hops


def hac_weights(
    coords: np.ndarray, network_distances: np.ndarray, spec: HacSpec
) -> np.ndarray:
    """Pairwise taper weights k_s(d/b_s) * k_n(h/b_n) with Bartlett kernels."""
    d = np.hypot(
        coords[:, 0][:, None] - coords[:, 0][None, :],
        coords[:, 1][:, None] - coords[:, 1][None, :],
    )
    ks = np.clip(1.0 - d / spec.spatial_bandwidth, 0.0, None)
    with np.errstate(invalid="ignore"):
        kn = np.clip(1.0 - network_distances / spec.network_bandwidth, 0.0, None)
    kn = np.where(np.isfinite(network_distances), kn, 0.0)
    return ks * kn


def hac_cov(
    moment_contributions: np.ndarray,
    coords: np.ndarray,
    network_distances: np.ndarray,
    spec: HacSpec,
) -> np.ndarray:
    """Sum_ij w_ij m_i m_j' over per-unit moment contributions, projected to PSD.

    Returns the raw double sum (callers normalize); as both bandwidths shrink
    to zero this collapses to the heteroskedasticity-only sum m_i m_i'.
    Eigenvalues are clipped at zero since the product taper is not guaranteed
    positive semidefinite.
    """
    m = np.atleast_2d(np.asarray(moment_contributions, dtype=float))
    if m.shape[0] == len(coords) and m.shape[1] != len(coords):
        m = m.T  # accept (N, k) or (k, N)
    w = hac_weights(np.asarray(coords, dtype=float), network_distances, spec)
    v = m @ w @ m.T
    v = (v + v.T) / 2.0
    eigval, eigvec = np.linalg.eigh(v)
    return (eigvec * np.clip(eigval, 0.0, None)) @ eigvec.T
