"""Estimators, inference machinery, and specification diagnostics."""

from .conventional import did, gps, ik_bandwidth, network_iv, spatial_rd, twfe
from .diagnostics import (
    DecayTestResult,
    SpilloverTestResult,
    event_study_decay_test,
    mutual_information,
    mutual_information_contributions,
    spillover_test,
)
from .gmm import ReducedModel, full_gmm
from .hac import hac_cov, hac_weights, hop_distances
from .reports import EstimateReport, HacSpec, build_report

ESTIMATORS = {
    "twfe": twfe,
    "did": did,
    "gps": gps,
    "spatial_rd": spatial_rd,
    "network_iv": network_iv,
    "full_gmm": full_gmm,
}

__all__ = [
    "twfe",
    "did",
    "gps",
    "spatial_rd",
    "network_iv",
    "full_gmm",
    "ik_bandwidth",
    "hac_cov",
    "hac_weights",
    "hop_distances",
    "mutual_information",
    "mutual_information_contributions",
    "spillover_test",
    "event_study_decay_test",
    "SpilloverTestResult",
    "DecayTestResult",
    "EstimateReport",
    "HacSpec",
    "build_report",
    "ReducedModel",
    "ESTIMATORS",
]
