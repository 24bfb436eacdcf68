"""Gravity-model supply-chain network generation and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InputError

__all__ = [
    "GravityParams",
    "NetworkStats",
    "connection_probabilities",
    "generate_network",
    "graph_stats",
    "lag_network",
]


@dataclass(frozen=True)
class GravityParams:
    """Decay rates of the connection probability in geographic and market distance."""

    theta_d: float = 0.02  # per mile
    theta_alpha: float = 2.0  # per unit market distance

    def __post_init__(self):
        if self.theta_d < 0 or self.theta_alpha < 0:
            raise InputError("gravity decay parameters must be >= 0")


@dataclass(frozen=True)
class NetworkStats:
    avg_degree: float
    clustering: float
    avg_path_length: float
    degree_cv: float


def connection_probabilities(
    coords: np.ndarray, alphas: np.ndarray, gravity: GravityParams
) -> np.ndarray:
    """Pairwise link probabilities p_ij = exp(-theta_d * dist - theta_alpha * |dalpha|)."""
    coords = np.asarray(coords, dtype=float)
    alphas = np.asarray(alphas, dtype=float)
    if coords.shape[0] != alphas.shape[0]:
        raise InputError("coords and alphas must have equal length")
    dist = np.hypot(
        coords[:, 0][:, None] - coords[:, 0][None, :],
        coords[:, 1][:, None] - coords[:, 1][None, :],
    )
    dalpha = np.abs(alphas[:, None] - alphas[None, :])
    p = np.exp(-gravity.theta_d * dist - gravity.theta_alpha * dalpha)
    np.fill_diagonal(p, 0.0)
    return p


def generate_network(
    coords: np.ndarray,
    alphas: np.ndarray,
    gravity: GravityParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw a symmetric adjacency matrix; each unordered pair links with prob p_ij."""
    if len(coords) < 2:
        raise InputError("need at least two units to form a network")
    p = connection_probabilities(coords, alphas, gravity)
    n = len(p)
    iu = np.triu_indices(n, 1)
    adj = np.zeros((n, n), dtype=bool)
    adj[iu] = rng.random(iu[0].size) < p[iu]
    return adj | adj.T


def lag_network(
    adjacency: np.ndarray,
    rewire_fraction: float,
    rng: np.random.Generator,
    coords: np.ndarray | None = None,
    alphas: np.ndarray | None = None,
    gravity: GravityParams | None = None,
) -> np.ndarray:
    """Construct a historical snapshot of the network.

    Each current edge is kept with probability 1 - rewire_fraction; pairs not
    kept receive a fresh gravity draw thinned by rewire_fraction, so the
    expected number of new edges matches the expected number dropped.  At
    rewire_fraction = 1 the result is an independent gravity draw.
    """
    if not 0.0 <= rewire_fraction <= 1.0:
        raise InputError("rewire_fraction must lie in [0, 1]")
    adjacency = np.asarray(adjacency, dtype=bool)
    if rewire_fraction == 0.0:
        return adjacency.copy()
    if coords is None or alphas is None or gravity is None:
        raise InputError("rewiring requires coords, alphas and gravity parameters")
    p = connection_probabilities(coords, alphas, gravity)
    n = len(p)
    iu = np.triu_indices(n, 1)
    kept = adjacency[iu] & (rng.random(iu[0].size) >= rewire_fraction)
    fresh = ~kept & (rng.random(iu[0].size) < rewire_fraction * p[iu])
    lagged = np.zeros((n, n), dtype=bool)
    lagged[iu] = kept | fresh
    return lagged | lagged.T


def _components(adjacency: np.ndarray) -> list[np.ndarray]:
    n = len(adjacency)
    seen = np.zeros(n, dtype=bool)
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        frontier = np.zeros(n, dtype=bool)
        frontier[start] = True
        comp = frontier.copy()
        while frontier.any():
            frontier = (adjacency[frontier].any(axis=0)) & ~comp
            comp |= frontier
        seen |= comp
        comps.append(np.flatnonzero(comp))
    return comps


def _avg_path_length(adjacency: np.ndarray, nodes: np.ndarray) -> float:
    # BFS from every node of the largest component, restricted to it
    if len(nodes) < 2:
        return 0.0
    sub = adjacency[np.ix_(nodes, nodes)]
    m = len(nodes)
    total = 0
    count = 0
    for s in range(m):
        dist = np.full(m, -1, dtype=np.int32)
        dist[s] = 0
        frontier = np.zeros(m, dtype=bool)
        frontier[s] = True
        d = 0
        while frontier.any():
            d += 1
            frontier = sub[frontier].any(axis=0) & (dist < 0)
            dist[frontier] = d
        reached = dist > 0
        total += int(dist[reached].sum())
        count += int(reached.sum())
    return total / count if count else 0.0


def graph_stats(adjacency: np.ndarray) -> NetworkStats:
    """Average degree, clustering, path length (largest component), and degree CV.

    Nodes with degree < 2 contribute clustering 0, which keeps the statistic
    defined on sparse graphs.
    """
    adjacency = np.asarray(adjacency, dtype=bool)
    n = len(adjacency)
    if n == 0:
        raise InputError("graph_stats requires a nonempty graph")
    deg = adjacency.sum(axis=1).astype(float)
    a = adjacency.astype(np.float64)
    closed = np.einsum("ij,jk,ki->i", a, a, a)  # 2x triangles through each node
    possible = deg * (deg - 1.0)
    clustering = np.where(possible > 0, closed / np.maximum(possible, 1.0), 0.0).mean()
    largest = max(_components(adjacency), key=len)
    apl = _avg_path_length(adjacency, largest)
    mean_deg = deg.mean()
    cv = deg.std() / mean_deg if mean_deg > 0 else 0.0
    return NetworkStats(
        avg_degree=float(mean_deg),
        clustering=float(clustering),
        avg_path_length=float(apl),
        degree_cv=float(cv),
    )
