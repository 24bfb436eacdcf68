"""Shared domain types, parameter sets, seeding, and dataset serialization.

Everything downstream (network generation, PDE solves, path simulation,
estimators, the replication harness) consumes the value objects defined
here.  All types are immutable after construction and safe to share
across worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "InputError",
    "SolverError",
    "EstimatorError",
    "ConfigId",
    "StructuralParams",
    "SpatialDomain",
    "UnitRecord",
    "Dataset",
    "SeedSpec",
    "config_params",
    "validate",
    "derive_seed",
    "save_dataset",
    "load_dataset",
    "FLOAT_FORMAT",
]

#: Format used for every real number written to CSV; 17 significant digits
#: round-trip IEEE doubles exactly.
FLOAT_FORMAT = "%.17g"


class InputError(ValueError):
    """Caller supplied arguments that violate an operation's contract."""


class SolverError(RuntimeError):
    """A numerical solve failed to converge; carries the final residual."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class EstimatorError(RuntimeError):
    """An estimator could not produce a valid estimate on this dataset."""


class ConfigId(Enum):
    """The four simulation configurations, varying which spillover channels are on."""

    NO_SPILLOVERS = "NoSpillovers"
    SPATIAL_ONLY = "SpatialOnly"
    NETWORK_ONLY = "NetworkOnly"
    FULL_MODEL = "FullModel"

    @classmethod
    def from_string(cls, name: str) -> "ConfigId":
        for member in cls:
            if member.value == name or member.name == name:
                return member
        raise InputError(f"unknown config id {name!r}; valid: {[m.value for m in cls]}")


@dataclass(frozen=True)
class StructuralParams:
    """Structural propagation parameters.

    nu_s    spatial diffusivity, square miles per quarter
    nu_n    network diffusivity, squared market-position units per quarter
    kappa   decay rate, per quarter
    lam     spatial-network interaction coefficient (numerically the
            mixed-derivative coefficient; reported in nats)
    """

    nu_s: float
    nu_n: float
    kappa: float
    lam: float = 0.0

    def diffusion_matrix(self) -> np.ndarray:
        """Step covariance per unit time of the associated diffusion over (x1, x2, alpha)."""
        return np.array(
            [
                [2.0 * self.nu_s, 0.0, self.lam],
                [0.0, 2.0 * self.nu_s, 0.0],
                [self.lam, 0.0, 2.0 * self.nu_n],
            ]
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.nu_s, self.nu_n, self.kappa, self.lam])

    @classmethod
    def from_array(cls, theta: Sequence[float]) -> "StructuralParams":
        nu_s, nu_n, kappa, lam = (float(v) for v in theta)
        return cls(nu_s, nu_n, kappa, lam)


def config_params(config: ConfigId) -> StructuralParams:
    """Structural parameters for each of the four simulation configurations."""
    table = {
        ConfigId.NO_SPILLOVERS: StructuralParams(0.0, 0.0, 0.25, 0.0),
        ConfigId.SPATIAL_ONLY: StructuralParams(100.0, 0.0, 0.25, 0.0),
        ConfigId.NETWORK_ONLY: StructuralParams(0.0, 0.015, 0.25, 0.0),
        ConfigId.FULL_MODEL: StructuralParams(100.0, 0.015, 0.25, 0.04),
    }
    return table[config]


def validate(params: StructuralParams) -> list[str]:
    """Return the list of violated invariants (empty when the parameters are valid).

    The interaction coefficient is constrained so the diffusion matrix stays
    positive semidefinite: lam^2 <= 4 nu_s nu_n when both diffusivities are
    positive, and lam = 0 when either one is zero.
    """
    violations = []
    if params.nu_s < 0:
        violations.append("nu_s < 0")
    if params.nu_n < 0:
        violations.append("nu_n < 0")
    if params.kappa <= 0:
        violations.append("kappa <= 0")
    if params.nu_s > 0 and params.nu_n > 0:
        if params.lam**2 > 4.0 * params.nu_s * params.nu_n * (1 + 1e-12):
            violations.append("lambda^2 > 4*nu_s*nu_n")
    elif params.lam != 0.0:
        violations.append("lambda != 0 with a zero diffusivity")
    return violations


@dataclass(frozen=True)
class SpatialDomain:
    """Rectangular spatial domain crossed with the market-position interval.

    Grids are node-centered: nodes at linspace(lo, hi, n) per axis, so the
    spacing along an axis with n nodes is extent / (n - 1).
    """

    x1_extent: tuple[float, float] = (0.0, 100.0)
    x2_extent: tuple[float, float] = (0.0, 100.0)
    alpha_range: tuple[float, float] = (0.0, 1.0)
    nx1: int = 64
    nx2: int = 64
    nalpha: int = 16

    def __post_init__(self):
        for lo, hi in (self.x1_extent, self.x2_extent, self.alpha_range):
            if not hi > lo:
                raise InputError("domain extents must be strictly positive")
        for n in (self.nx1, self.nx2, self.nalpha):
            if n < 3:
                raise InputError("grid sizes must be >= 3 per axis")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx1, self.nx2, self.nalpha)

    @property
    def spacing(self) -> tuple[float, float, float]:
        return (
            (self.x1_extent[1] - self.x1_extent[0]) / (self.nx1 - 1),
            (self.x2_extent[1] - self.x2_extent[0]) / (self.nx2 - 1),
            (self.alpha_range[1] - self.alpha_range[0]) / (self.nalpha - 1),
        )

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.linspace(*self.x1_extent, self.nx1),
            np.linspace(*self.x2_extent, self.nx2),
            np.linspace(*self.alpha_range, self.nalpha),
        )

    def with_shape(self, nx1: int, nx2: int, nalpha: int) -> "SpatialDomain":
        return replace(self, nx1=nx1, nx2=nx2, nalpha=nalpha)

    def contains(self, x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return (
            (x[:, 0] >= self.x1_extent[0])
            & (x[:, 0] <= self.x1_extent[1])
            & (x[:, 1] >= self.x2_extent[0])
            & (x[:, 1] <= self.x2_extent[1])
            & (np.asarray(alpha) >= self.alpha_range[0])
            & (np.asarray(alpha) <= self.alpha_range[1])
        )


@dataclass(frozen=True)
class UnitRecord:
    """One simulated economic unit."""

    id: int
    x: tuple[float, float]
    alpha: float
    source: float
    controls: tuple[float, float, float]
    outcome: float
    degree: int


@dataclass(frozen=True)
class Dataset:
    """A cross-section of units plus its supply-chain network.

    Column-major storage (one array per field) keeps estimator code
    vectorized; ``units`` iterates row views when record semantics are
    convenient.  ``tau_true`` holds the generating treatment field sampled
    at unit positions (None for externally loaded data without a truth
    sidecar), and ``extras`` carries generation metadata such as the
    effect-scale normalization constants.
    """

    ids: np.ndarray
    coords: np.ndarray  # (N, 2)
    alphas: np.ndarray
    source: np.ndarray
    controls: np.ndarray  # (N, 3)
    outcome: np.ndarray
    degree: np.ndarray
    network: np.ndarray  # (N, N) bool, symmetric, zero diagonal
    lagged_network: np.ndarray | None = None
    config_id: ConfigId | None = None
    seed: int | None = None
    tau_true: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.ids)
        if self.network.shape != (n, n):
            raise InputError("network must be N x N over the unit ids")
        if np.any(np.diag(self.network)):
            raise InputError("network must have a zero diagonal")
        if not np.array_equal(self.network, self.network.T):
            raise InputError("network must be symmetric")
        if self.lagged_network is not None:
            if self.lagged_network.shape != (n, n):
                raise InputError("lagged network must be N x N over the unit ids")
            if np.any(np.diag(self.lagged_network)) or not np.array_equal(
                self.lagged_network, self.lagged_network.T
            ):
                raise InputError("lagged network must be symmetric with zero diagonal")

    @property
    def n_units(self) -> int:
        return len(self.ids)

    def units(self) -> Iterator[UnitRecord]:
        for i in range(self.n_units):
            yield UnitRecord(
                id=int(self.ids[i]),
                x=(float(self.coords[i, 0]), float(self.coords[i, 1])),
                alpha=float(self.alphas[i]),
                source=float(self.source[i]),
                controls=tuple(float(v) for v in self.controls[i]),
                outcome=float(self.outcome[i]),
                degree=int(self.degree[i]),
            )


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedSpec:
    """Root of the deterministic seed tree.

    Child seeds are derived by hashing (base_seed, label, index), so any
    (label, index) work item gets the same stream regardless of scheduling
    order or worker count.
    """

    base_seed: int

    def child_seed(self, label: str, index: int = 0) -> int:
        return derive_seed(self, label, index)

    def rng(self, label: str, index: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.child_seed(label, index))


def derive_seed(spec: SeedSpec, label: str, index: int = 0) -> int:
    """Deterministic 64-bit child seed for the (label, index) stream."""
    payload = f"{spec.base_seed}:{label}:{index}".encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# Dataset serialization
# ---------------------------------------------------------------------------

_UNIT_COLUMNS = ["id", "x1", "x2", "alpha", "source", "X1", "X2", "X3", "Y", "degree"]


def _fmt(x: float) -> str:
    return FLOAT_FORMAT % x


def _write_edges(path: Path, adjacency: np.ndarray) -> None:
    ii, jj = np.nonzero(np.triu(adjacency, 1))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "j"])
        for i, j in zip(ii.tolist(), jj.tolist()):
            writer.writerow([i, j])


def _read_edges(path: Path, n: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            i, j = int(row[0]), int(row[1])
            if i >= n or j >= n or i < 0 or j < 0:
                raise InputError(f"edge ({i},{j}) references a unit id outside 0..{n-1}")
            adj[i, j] = adj[j, i] = True
    return adj


def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Write units.csv, network.csv, lagged_network.csv, truth.csv and meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "units.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_UNIT_COLUMNS)
        for i in range(dataset.n_units):
            writer.writerow(
                [
                    int(dataset.ids[i]),
                    _fmt(dataset.coords[i, 0]),
                    _fmt(dataset.coords[i, 1]),
                    _fmt(dataset.alphas[i]),
                    _fmt(dataset.source[i]),
                    _fmt(dataset.controls[i, 0]),
                    _fmt(dataset.controls[i, 1]),
                    _fmt(dataset.controls[i, 2]),
                    _fmt(dataset.outcome[i]),
                    int(dataset.degree[i]),
                ]
            )
    _write_edges(out / "network.csv", dataset.network)
    if dataset.lagged_network is not None:
        _write_edges(out / "lagged_network.csv", dataset.lagged_network)
    if dataset.tau_true is not None:
        with open(out / "truth.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "tau_true"])
            for i in range(dataset.n_units):
                writer.writerow([int(dataset.ids[i]), _fmt(dataset.tau_true[i])])
    meta = {
        "config_id": dataset.config_id.value if dataset.config_id else None,
        "seed": dataset.seed,
        "extras": dataset.extras,
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir: str | Path) -> Dataset:
    """Inverse of :func:`save_dataset`."""
    src = Path(in_dir)
    rows = []
    with open(src / "units.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != _UNIT_COLUMNS:
            raise InputError(f"unexpected unit CSV columns: {header}")
        rows = [row for row in reader]
    n = len(rows)
    arr = np.array([[float(v) for v in row] for row in rows])
    ids = arr[:, 0].astype(int)
    network = _read_edges(src / "network.csv", n)
    lagged = None
    if (src / "lagged_network.csv").exists():
        lagged = _read_edges(src / "lagged_network.csv", n)
    tau_true = None
    if (src / "truth.csv").exists():
        with open(src / "truth.csv", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            truth_rows = {int(r[0]): float(r[1]) for r in reader}
        tau_true = np.array([truth_rows[i] for i in ids])
    config_id = None
    seed = None
    extras: dict = {}
    if (src / "meta.json").exists():
        with open(src / "meta.json") as fh:
            meta = json.load(fh)
        if meta.get("config_id"):
            config_id = ConfigId.from_string(meta["config_id"])
        seed = meta.get("seed")
        extras = meta.get("extras", {})
    return Dataset(
        ids=ids,
        coords=arr[:, 1:3],
        alphas=arr[:, 3],
        source=arr[:, 4],
        controls=arr[:, 5:8],
        outcome=arr[:, 8],
        degree=arr[:, 9].astype(int),
        network=network,
        lagged_network=lagged,
        config_id=config_id,
        seed=seed,
        tau_true=tau_true,
        extras=extras,
    )
