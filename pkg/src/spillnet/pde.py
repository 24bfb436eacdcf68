"""Lattice solvers for the propagation equation, plus its closed-form reductions.

The equation governs a treatment field tau(x1, x2, alpha):

    dtau/dt = nu_s * (d2/dx1^2 + d2/dx2^2) tau + nu_n * d2/dalpha^2 tau
              - kappa * tau + lam * d2/(dx1 dalpha) tau + S

with zero-flux (reflecting) boundaries on every face.  Spatial derivatives
use second-order central differences; the mixed term uses the 4-point cross
stencil.  With mirror ghost nodes the Neumann difference operators are
diagonalized exactly by cosine modes, so the linear solves run through DCT-I
transforms in O(N log N) rather than through a sparse factorization.  The
small mixed/nonlinear terms are folded into the right-hand side and iterated
to the requested residual tolerance.

The synthetic-data variant of the equation replaces the mixed second
derivative with a product of first derivatives, lam * (dtau/dx1)(dtau/dalpha),
and is solved by damped Picard iteration around the same linear core.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.interpolate import RegularGridInterpolator

from .core import FLOAT_FORMAT, InputError, SolverError, SpatialDomain, StructuralParams, validate

__all__ = [
    "GridField",
    "SolverOptions",
    "steady_state_linear",
    "steady_state_dgp",
    "transient",
    "TransientResult",
    "apply_diffusion",
    "residual_linear",
    "residual_dgp",
    "amplification_factor",
    "ar1_from_structural",
    "structural_from_ar1",
    "half_life",
    "ecm_from_structural",
    "sar_from_structural",
    "structural_from_sar",
    "network_te_coefficients",
    "predicted_event_study",
    "diffusion_from_volatility",
    "save_grid_field",
    "load_grid_field",
]


@dataclass(frozen=True)
class GridField:
    """A scalar field sampled on the (x1, x2, alpha) lattice of a domain."""

    domain: SpatialDomain
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.domain.shape:
            raise InputError(
                f"values shape {self.values.shape} does not match grid {self.domain.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InputError("grid field contains non-finite values")

    @classmethod
    def from_function(
        cls, domain: SpatialDomain, fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    ) -> "GridField":
        """Sample fn(x1, x2, alpha) on the lattice (fn must broadcast)."""
        x1, x2, al = domain.axes()
        vals = np.asarray(
            fn(x1[:, None, None], x2[None, :, None], al[None, None, :]), dtype=float
        )
        vals = np.broadcast_to(vals, domain.shape).copy()
        return cls(domain, vals)

    @classmethod
    def constant(cls, domain: SpatialDomain, value: float) -> "GridField":
        return cls(domain, np.full(domain.shape, float(value)))

    def interpolate(self, x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at unit positions."""
        interp = RegularGridInterpolator(self.domain.axes(), self.values, method="linear")
        pts = np.column_stack([np.atleast_2d(x), np.atleast_1d(alpha)])
        return interp(pts)

    def integral(self) -> float:
        """Trapezoid-rule integral over the full domain."""
        w1, w2, wa = (_trap_weights(n) for n in self.domain.shape)
        h1, h2, ha = self.domain.spacing
        w = w1[:, None, None] * w2[None, :, None] * wa[None, None, :]
        return float(np.sum(w * self.values) * h1 * h2 * ha)


def _trap_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


@dataclass(frozen=True)
class SolverOptions:
    boundary: str = "zero-flux"
    tolerance: float = 1e-8
    max_iterations: int = 200
    picard_damping: float = 0.5

    def __post_init__(self):
        if self.boundary != "zero-flux":
            raise InputError("only zero-flux boundaries are supported")
        if self.tolerance <= 0:
            raise InputError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise InputError("max_iterations must be >= 1")
        if not 0 < self.picard_damping <= 1:
            raise InputError("picard_damping must lie in (0, 1]")


# ---------------------------------------------------------------------------
# Difference stencils (mirror ghosts => zero-flux)
# ---------------------------------------------------------------------------


def _second_diff(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    up = np.roll(values, -1, axis=axis)
    down = np.roll(values, 1, axis=axis)
    # mirror ghost: f[-1] = f[1], f[n] = f[n-2]
    sl_lo = [slice(None)] * values.ndim
    sl_lo[axis] = 0
    sl_hi = [slice(None)] * values.ndim
    sl_hi[axis] = -1
    sl_lo2 = [slice(None)] * values.ndim
    sl_lo2[axis] = 1
    sl_hi2 = [slice(None)] * values.ndim
    sl_hi2[axis] = -2
    down[tuple(sl_lo)] = values[tuple(sl_lo2)]
    up[tuple(sl_hi)] = values[tuple(sl_hi2)]
    return (up - 2.0 * values + down) / h**2


def _first_diff(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    # central difference; mirror ghosts zero the boundary rows
    up = np.roll(values, -1, axis=axis)
    down = np.roll(values, 1, axis=axis)
    out = (up - down) / (2.0 * h)
    sl = [slice(None)] * values.ndim
    sl[axis] = 0
    out[tuple(sl)] = 0.0
    sl[axis] = -1
    out[tuple(sl)] = 0.0
    return out


def apply_diffusion(params: StructuralParams, field: GridField) -> np.ndarray:
    """Apply nu_s*Lap + nu_n*d2a + lam*dx1 dalpha to the field values."""
    h1, h2, ha = field.domain.spacing
    v = field.values
    out = np.zeros_like(v)
    if params.nu_s != 0.0:
        out += params.nu_s * (_second_diff(v, 0, h1) + _second_diff(v, 1, h2))
    if params.nu_n != 0.0:
        out += params.nu_n * _second_diff(v, 2, ha)
    if params.lam != 0.0:
        out += params.lam * _first_diff(_first_diff(v, 0, h1), 2, ha)
    return out


def residual_linear(params: StructuralParams, tau: GridField, source: GridField) -> float:
    """Sup-norm residual of the linear steady-state equation."""
    r = apply_diffusion(params, tau) - params.kappa * tau.values + source.values
    return float(np.abs(r).max())


def residual_dgp(params: StructuralParams, tau: GridField, source: GridField) -> float:
    """Sup-norm residual of the nonlinear (gradient-product) steady-state equation."""
    h1, _, ha = tau.domain.spacing
    v = tau.values
    lin = np.zeros_like(v)
    if params.nu_s != 0.0:
        h2 = tau.domain.spacing[1]
        lin += params.nu_s * (_second_diff(v, 0, h1) + _second_diff(v, 1, h2))
    if params.nu_n != 0.0:
        lin += params.nu_n * _second_diff(v, 2, ha)
    prod = params.lam * _first_diff(v, 0, h1) * _first_diff(v, 2, ha)
    r = lin + prod - params.kappa * v + source.values
    return float(np.abs(r).max())


# ---------------------------------------------------------------------------
# Spectral linear core
# ---------------------------------------------------------------------------


class _SpectralCore:
    """Solves (kappa - nu_s*Lap - nu_n*d2a) tau = rhs via DCT-I modes."""

    def __init__(self, params: StructuralParams, domain: SpatialDomain, dt: float | None = None):
        h1, h2, ha = domain.spacing
        n1, n2, na = domain.shape
        mu1 = _mode_eigenvalues(n1, h1)
        mu2 = _mode_eigenvalues(n2, h2)
        mua = _mode_eigenvalues(na, ha)
        decay = (
            params.kappa
            - params.nu_s * (mu1[:, None, None] + mu2[None, :, None])
            - params.nu_n * mua[None, None, :]
        )
        # dt None: steady state (denominator = decay); else implicit Euler step
        self.den = decay if dt is None else 1.0 + dt * decay

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        coeff = sfft.dctn(rhs, type=1)
        coeff /= self.den
        return sfft.idctn(coeff, type=1)


def _mode_eigenvalues(n: int, h: float) -> np.ndarray:
    return 2.0 * (np.cos(np.pi * np.arange(n) / (n - 1)) - 1.0) / h**2


def _check_params(params: StructuralParams) -> None:
    violations = validate(params)
    if violations:
        raise InputError(f"invalid structural parameters: {violations}")


def steady_state_linear(
    params: StructuralParams, source: GridField, opts: SolverOptions = SolverOptions()
) -> GridField:
    """Steady state of the linear equation (mixed second-derivative interaction).

    The nu_s/nu_n/kappa part is inverted exactly in mode space; the lam cross
    term is iterated on the right-hand side until the sup-norm residual of the
    full equation is below opts.tolerance.
    """
    _check_params(params)
    core = _SpectralCore(params, source.domain)
    h1, _, ha = source.domain.spacing
    tau = core.solve(source.values)
    if params.lam != 0.0:
        prev_res = math.inf
        growth = 0
        for _ in range(opts.max_iterations):
            field = GridField(source.domain, tau)
            res = residual_linear(params, field, source)
            if res <= opts.tolerance:
                return field
            if res > prev_res * (1 + 1e-12):
                growth += 1
                if growth >= 3:
                    raise SolverError(
                        f"cross-term iteration diverging (residual {res:.3e})", residual=res
                    )
            else:
                growth = 0
            prev_res = res
            cross = params.lam * _first_diff(_first_diff(tau, 0, h1), 2, ha)
            tau = core.solve(source.values + cross)
        field = GridField(source.domain, tau)
        res = residual_linear(params, field, source)
        if res > opts.tolerance:
            raise SolverError(
                f"no convergence in {opts.max_iterations} iterations (residual {res:.3e})",
                residual=res,
            )
        return field
    field = GridField(source.domain, tau)
    res = residual_linear(params, field, source)
    if res > opts.tolerance:
        raise SolverError(f"spectral solve residual {res:.3e} above tolerance", residual=res)
    return field


def steady_state_dgp(
    params: StructuralParams, source: GridField, opts: SolverOptions = SolverOptions()
) -> GridField:
    """Steady state of the synthetic-data equation with the gradient-product term.

    Damped Picard iteration: the product lam*(dtau/dx1)(dtau/dalpha) is frozen
    from the previous iterate and moved to the source side of a linear solve;
    the new iterate is blended with weight picard_damping.
    """
    _check_params(params)
    core = _SpectralCore(params, source.domain)
    h1, _, ha = source.domain.spacing
    tau = core.solve(source.values)
    if params.lam == 0.0:
        field = GridField(source.domain, tau)
        res = residual_dgp(params, field, source)
        if res > opts.tolerance:
            raise SolverError(f"spectral solve residual {res:.3e} above tolerance", residual=res)
        return field
    prev_res = math.inf
    growth = 0
    for _ in range(opts.max_iterations):
        field = GridField(source.domain, tau)
        res = residual_dgp(params, field, source)
        if res <= opts.tolerance:
            return field
        if res > prev_res * (1 + 1e-12):
            growth += 1
            if growth >= 3:
                raise SolverError(
                    f"Picard iteration diverging (residual {res:.3e})", residual=res
                )
        else:
            growth = 0
        prev_res = res
        prod = params.lam * _first_diff(tau, 0, h1) * _first_diff(tau, 2, ha)
        candidate = core.solve(source.values + prod)
        tau = (1.0 - opts.picard_damping) * tau + opts.picard_damping * candidate
    field = GridField(source.domain, tau)
    res = residual_dgp(params, field, source)
    if res > opts.tolerance:
        raise SolverError(
            f"Picard iteration: no convergence in {opts.max_iterations} iterations "
            f"(residual {res:.3e})",
            residual=res,
        )
    return field


@dataclass(frozen=True)
class TransientResult:
    times: list[float]
    fields: list[GridField]

    @property
    def final(self) -> GridField:
        return self.fields[-1]


def transient(
    params: StructuralParams,
    tau0: GridField,
    source: GridField | Sequence[GridField] | Callable[[float], GridField],
    dt: float,
    t_end: float,
    opts: SolverOptions = SolverOptions(),
    sample_times: Sequence[float] | None = None,
) -> TransientResult:
    """March the time-dependent equation with semi-implicit Euler steps.

    Each step solves (I + dt*(kappa - nu_s*Lap - nu_n*d2a)) tau_next =
    tau + dt*(S_t + lam * cross(tau)): implicit in diffusion and decay,
    explicit in the source and the small mixed term, so dt is not
    stability-limited by the grid.

    source may be a constant GridField, a per-step sequence, or a callable
    of time.  sample_times selects which snapshots are retained (the final
    state is always kept).
    """
    _check_params(params)
    if dt <= 0:
        raise InputError("dt must be positive")
    if dt * params.kappa >= 1:
        raise InputError("dt * kappa must be < 1 for a stable discount per step")
    n_steps = int(round(t_end / dt))
    core = _SpectralCore(params, tau0.domain, dt=dt)
    h1, _, ha = tau0.domain.spacing

    if callable(source):
        src_at = lambda step, t: np.broadcast_to(source(t).values, tau0.domain.shape)
    elif isinstance(source, GridField):
        const = source.values
        src_at = lambda step, t: const
    else:
        seq = list(source)
        if len(seq) < n_steps:
            raise InputError(f"need {n_steps} source fields, got {len(seq)}")
        src_at = lambda step, t: seq[step].values

    targets = sorted(set(sample_times or []))
    times: list[float] = []
    fields: list[GridField] = []
    tau = tau0.values.copy()
    limit = 1e6 * max(np.abs(tau).max(), 1.0)
    t = 0.0
    next_target = 0
    for step in range(n_steps):
        rhs = tau + dt * src_at(step, t)
        if params.lam != 0.0:
            rhs += dt * params.lam * _first_diff(_first_diff(tau, 0, h1), 2, ha)
        tau = core.solve(rhs)
        t = (step + 1) * dt
        if np.abs(tau).max() > limit:
            raise SolverError(f"transient solution blew up at t={t:.3f}")
        while next_target < len(targets) and targets[next_target] <= t + 1e-12:
            times.append(t)
            fields.append(GridField(tau0.domain, tau.copy()))
            next_target += 1
    if not times or times[-1] < t:
        times.append(t)
        fields.append(GridField(tau0.domain, tau.copy()))
    return TransientResult(times=times, fields=fields)


# ---------------------------------------------------------------------------
# Closed-form quantities and discrete-model conversions
# ---------------------------------------------------------------------------


def amplification_factor(params: StructuralParams) -> float:
    """Long-run ratio of total to direct effect mass for a point source.

    A = 1 + (nu_s + nu_n)/kappa + lam^2 / (kappa (nu_s + nu_n)); equals 1 by
    convention when both diffusivities vanish (lam must then be zero).
    """
    if params.kappa <= 0:
        raise InputError("kappa must be positive")
    total_diff = params.nu_s + params.nu_n
    if total_diff == 0.0:
        if params.lam != 0.0:
            raise InputError("lambda must be zero when both diffusivities are zero")
        return 1.0
    return 1.0 + total_diff / params.kappa + params.lam**2 / (params.kappa * total_diff)


def ar1_from_structural(kappa: float, dt: float) -> tuple[float, float]:
    """Persistence and impact coefficients of the one-lag discretization: (1 - kappa*dt, dt)."""
    if dt <= 0:
        raise InputError("dt must be positive")
    return 1.0 - kappa * dt, dt


def structural_from_ar1(rho: float, dt: float) -> float:
    """Invert rho = 1 - kappa*dt; rejects unit roots and explosive persistence."""
    if dt <= 0:
        raise InputError("dt must be positive")
    if rho >= 1.0:
        raise InputError("rho must be < 1 to imply a positive decay rate")
    return (1.0 - rho) / dt


def half_life(kappa: float) -> float:
    """Time for an effect to fall by half: ln(2) / kappa."""
    if kappa <= 0:
        raise InputError("kappa must be positive")
    return math.log(2.0) / kappa


def ecm_from_structural(kappa: float, dt: float) -> tuple[float, float, float]:
    """Error-correction form: adjustment kappa*dt, long-run multiplier 1/kappa, impact dt."""
    if kappa <= 0 or dt <= 0:
        raise InputError("kappa and dt must be positive")
    return kappa * dt, 1.0 / kappa, dt


def sar_from_structural(nu_s: float, kappa: float, dx: float, n_neighbors: int) -> float:
    """Spatial-lag coefficient implied on a regular grid: nu_s * n / (kappa * dx^2)."""
    if kappa <= 0 or dx <= 0 or n_neighbors <= 0:
        raise InputError("kappa, dx and n_neighbors must be positive")
    return nu_s * n_neighbors / (kappa * dx**2)


def structural_from_sar(rho: float, kappa: float, dx: float, n_neighbors: int) -> float:
    """Invert the spatial-lag map back to the diffusivity."""
    if kappa <= 0 or dx <= 0 or n_neighbors <= 0:
        raise InputError("kappa, dx and n_neighbors must be positive")
    return rho * kappa * dx**2 / n_neighbors


def network_te_coefficients(nu_n: float, kappa: float) -> tuple[float, float]:
    """Own and neighbor exposure coefficients implied on a network: (1/kappa, nu_n/kappa)."""
    if kappa <= 0:
        raise InputError("kappa must be positive")
    return 1.0 / kappa, nu_n / kappa


def predicted_event_study(
    beta0: float, kappa: float, dt: float, pre_len: int, post_len: int
) -> np.ndarray:
    """Event-time coefficient path: zero before the event, geometric decay after.

    Returns the length pre_len + post_len + 1 sequence over event times
    k = -pre_len .. post_len, with beta_k = beta0 * (1 - kappa*dt)^k for k >= 0.
    """
    decay = kappa * dt
    if not 0.0 < decay < 1.0:
        raise InputError("kappa*dt must lie in (0, 1)")
    ks = np.arange(-pre_len, post_len + 1)
    out = np.zeros(len(ks))
    post = ks >= 0
    out[post] = beta0 * (1.0 - decay) ** ks[post]
    return out


def diffusion_from_volatility(sigma_sq: float, kappa: float) -> float:
    """Diffusivity implied by stationary volatility: sigma^2 = 2 D kappa."""
    if sigma_sq <= 0 or kappa <= 0:
        raise InputError("sigma_sq and kappa must be positive")
    return sigma_sq / (2.0 * kappa)


# ---------------------------------------------------------------------------
# GridField serialization (flat CSV + JSON header)
# ---------------------------------------------------------------------------


def save_grid_field(field: GridField, path_prefix: str | Path) -> None:
    """Write <prefix>.csv with (x1, x2, alpha, value) rows and <prefix>.json metadata."""
    prefix = Path(path_prefix)
    d = field.domain
    header = {
        "x1_extent": list(d.x1_extent),
        "x2_extent": list(d.x2_extent),
        "alpha_range": list(d.alpha_range),
        "shape": list(d.shape),
    }
    with open(prefix.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    x1, x2, al = d.axes()
    with open(prefix.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x1", "x2", "alpha", "value"])
        for i in range(d.nx1):
            for j in range(d.nx2):
                for k in range(d.nalpha):
                    writer.writerow(
                        [
                            FLOAT_FORMAT % x1[i],
                            FLOAT_FORMAT % x2[j],
                            FLOAT_FORMAT % al[k],
                            FLOAT_FORMAT % field.values[i, j, k],
                        ]
                    )


def load_grid_field(path_prefix: str | Path) -> GridField:
    prefix = Path(path_prefix)
    with open(prefix.with_suffix(".json")) as fh:
        header = json.load(fh)
    shape = tuple(header["shape"])
    domain = SpatialDomain(
        x1_extent=tuple(header["x1_extent"]),
        x2_extent=tuple(header["x2_extent"]),
        alpha_range=tuple(header["alpha_range"]),
        nx1=shape[0],
        nx2=shape[1],
        nalpha=shape[2],
    )
    values = np.empty(shape)
    with open(prefix.with_suffix(".csv"), newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        flat = np.array([float(row[3]) for row in reader])
    if flat.size != values.size:
        raise InputError("grid CSV size does not match header shape")
    values[:] = flat.reshape(shape)
    return GridField(domain, values)
