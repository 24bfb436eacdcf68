"""Declarative run configuration: one TOML file drives every command.

Sections [dgp], [mc], [gmm], [fk]; every field defaults to the benchmark
values, and unknown sections or keys are rejected before any computation.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

from .core import ConfigId, InputError, SpatialDomain
from .dgp import DgpSettings
from .estimators import ESTIMATORS, HacSpec
from .harness import McPlan
from .network import GravityParams

if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib
else:
    import tomli as tomllib

__all__ = ["RunConfig", "FkOptions", "load_config"]

_DGP_KEYS = {
    "n_units",
    "s0",
    "border",
    "theta_d",
    "theta_alpha",
    "control_noise_sd",
    "outcome_noise_sd",
    "gamma",
    "grid",
    "rewire_fraction",
    "border_band",
    "alpha_x_corr",
    "config",
    "seed",
}
_MC_KEYS = {
    "configs",
    "estimators",
    "replications",
    "base_seed",
    "n_workers",
    "event_study",
    "event_study_kappa",
    "event_study_mode",
    "event_study_replications",
    "uncertainty",
}
_GMM_KEYS = {"spatial_bandwidth", "network_bandwidth"}
_FK_KEYS = {
    "config",
    "seed",
    "distances",
    "t",
    "dt",
    "paths",
    "draws",
    "posterior",
    "bands",
}


@dataclass(frozen=True)
class FkOptions:
    config: ConfigId = ConfigId.FULL_MODEL
    seed: int = 20240801
    distances: tuple = (0.0, 20.0, 40.0, 60.0, 80.0, 100.0)
    t: float = 20.0
    dt: float = 0.1
    paths: int = 200
    draws: int = 200
    posterior: str = "gmm"  # or "point" (plug-in parameters, no parameter spread)
    bands: tuple = ((0.0, 25.0), (25.0, 50.0), (50.0, 75.0), (75.0, 100.0))


@dataclass(frozen=True)
class RunConfig:
    settings: DgpSettings = field(default_factory=DgpSettings)
    sim_config: ConfigId = ConfigId.FULL_MODEL
    sim_seed: int = 20240801
    plan: McPlan = field(default_factory=McPlan)
    hac: HacSpec = field(default_factory=HacSpec)
    fk: FkOptions = field(default_factory=FkOptions)
    event_study: bool = False
    event_study_kappa: float = 0.3
    event_study_mode: str = "step"
    event_study_replications: int = 50
    uncertainty: bool = False


def _check_keys(section: str, data: dict, allowed: set) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise InputError(f"unknown keys in [{section}]: {sorted(unknown)}")


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    raw_text = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw_text.decode())
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"malformed config file: {exc}") from exc
    unknown_sections = set(doc) - {"dgp", "mc", "gmm", "fk"}
    if unknown_sections:
        raise InputError(f"unknown config sections: {sorted(unknown_sections)}")

    dgp_doc = doc.get("dgp", {})
    _check_keys("dgp", dgp_doc, _DGP_KEYS)
    grid = dgp_doc.get("grid", [64, 64, 16])
    if len(grid) != 3:
        raise InputError("[dgp] grid must have three entries")
    settings = DgpSettings(
        n_units=int(dgp_doc.get("n_units", 500)),
        s0=float(dgp_doc.get("s0", 0.10)),
        border=float(dgp_doc.get("border", 50.0)),
        gravity=GravityParams(
            theta_d=float(dgp_doc.get("theta_d", 0.02)),
            theta_alpha=float(dgp_doc.get("theta_alpha", 2.0)),
        ),
        control_noise_sd=float(dgp_doc.get("control_noise_sd", 0.25)),
        outcome_noise_sd=float(dgp_doc.get("outcome_noise_sd", 0.05)),
        gamma=tuple(float(g) for g in dgp_doc.get("gamma", (0.1, 0.1, 0.1))),
        domain=SpatialDomain(nx1=int(grid[0]), nx2=int(grid[1]), nalpha=int(grid[2])),
        rewire_fraction=float(dgp_doc.get("rewire_fraction", 0.2)),
        border_band=float(dgp_doc.get("border_band", 5.0)),
        alpha_x_corr=float(dgp_doc.get("alpha_x_corr", 0.0)),
    )
    sim_config = ConfigId.from_string(str(dgp_doc.get("config", "FullModel")))
    sim_seed = int(dgp_doc.get("seed", 20240801))

    gmm_doc = doc.get("gmm", {})
    _check_keys("gmm", gmm_doc, _GMM_KEYS)
    hac = HacSpec(
        spatial_bandwidth=float(gmm_doc.get("spatial_bandwidth", 15.0)),
        network_bandwidth=float(gmm_doc.get("network_bandwidth", 2.0)),
    )

    mc_doc = doc.get("mc", {})
    _check_keys("mc", mc_doc, _MC_KEYS)
    config_names = mc_doc.get(
        "configs", ["NoSpillovers", "SpatialOnly", "NetworkOnly", "FullModel"]
    )
    estimators = tuple(
        mc_doc.get("estimators", ["twfe", "did", "gps", "spatial_rd", "network_iv", "full_gmm"])
    )
    unknown_est = [e for e in estimators if e not in ESTIMATORS]
    if unknown_est:
        raise InputError(f"unknown estimators {unknown_est}; valid: {sorted(ESTIMATORS)}")
    plan = McPlan(
        configs=tuple(ConfigId.from_string(str(c)) for c in config_names),
        estimators=estimators,
        replications=int(mc_doc.get("replications", 1000)),
        base_seed=int(mc_doc.get("base_seed", 20240801)),
        settings=settings,
        hac=hac,
        n_workers=int(mc_doc.get("n_workers", 1)),
    )

    fk_doc = doc.get("fk", {})
    _check_keys("fk", fk_doc, _FK_KEYS)
    posterior = str(fk_doc.get("posterior", "gmm"))
    if posterior not in ("gmm", "point"):
        raise InputError("[fk] posterior must be 'gmm' or 'point'")
    bands_raw = fk_doc.get("bands", [[0.0, 25.0], [25.0, 50.0], [50.0, 75.0], [75.0, 100.0]])
    fk = FkOptions(
        config=ConfigId.from_string(str(fk_doc.get("config", "FullModel"))),
        seed=int(fk_doc.get("seed", 20240801)),
        distances=tuple(float(d) for d in fk_doc.get("distances", (0, 20, 40, 60, 80, 100))),
        t=float(fk_doc.get("t", 20.0)),
        dt=float(fk_doc.get("dt", 0.1)),
        paths=int(fk_doc.get("paths", 200)),
        draws=int(fk_doc.get("draws", 200)),
        posterior=posterior,
        bands=tuple((float(lo), float(hi)) for lo, hi in bands_raw),
    )

    return RunConfig(
        settings=settings,
        sim_config=sim_config,
        sim_seed=sim_seed,
        plan=plan,
        hac=hac,
        fk=fk,
        event_study=bool(mc_doc.get("event_study", False)),
        event_study_kappa=float(mc_doc.get("event_study_kappa", 0.3)),
        event_study_mode=str(mc_doc.get("event_study_mode", "step")),
        event_study_replications=int(mc_doc.get("event_study_replications", 50)),
        uncertainty=bool(mc_doc.get("uncertainty", False)),
    )
