"""Report container shared by every estimator, plus the HAC kernel settings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..core import InputError

__all__ = ["EstimateReport", "HacSpec", "Z_95"]

#: Critical value used for every reported 95% interval (estimate +/- 1.96 SE).
Z_95 = 1.96


@dataclass(frozen=True)
class HacSpec:
    """Product-kernel taper: Bartlett in miles times Bartlett in network hops."""

    spatial_bandwidth: float = 15.0
    network_bandwidth: float = 2.0

    def __post_init__(self):
        if self.spatial_bandwidth <= 0 or self.network_bandwidth <= 0:
            raise InputError("HAC bandwidths must be positive")


@dataclass(frozen=True)
class EstimateReport:
    """Point estimates, inference, and provenance for one estimator run.

    estimates / std_errors are keyed by target name ("direct",
    "total_border", structural parameter names, ...).  conf_ints are built
    mechanically as estimate +/- 1.96 * SE.
    """

    estimator: str
    estimates: dict[str, float]
    std_errors: dict[str, float]
    conf_ints: dict[str, tuple[float, float]] = field(default_factory=dict)
    covariance: np.ndarray | None = None
    covariance_names: tuple[str, ...] = ()
    test_stats: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    level: float = 0.95

    def ci(self, name: str) -> tuple[float, float]:
        return self.conf_ints[name]

    def to_json(self) -> str:
        payload = {
            "estimator": self.estimator,
            "estimates": self.estimates,
            "std_errors": self.std_errors,
            "conf_ints": {k: list(v) for k, v in self.conf_ints.items()},
            "covariance": None
            if self.covariance is None
            else np.asarray(self.covariance).tolist(),
            "covariance_names": list(self.covariance_names),
            "test_stats": self.test_stats,
            "diagnostics": _jsonable(self.diagnostics),
            "level": self.level,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        d = json.loads(text)
        return cls(
            estimator=d["estimator"],
            estimates=d["estimates"],
            std_errors=d["std_errors"],
            conf_ints={k: tuple(v) for k, v in d["conf_ints"].items()},
            covariance=None if d["covariance"] is None else np.array(d["covariance"]),
            covariance_names=tuple(d["covariance_names"]),
            test_stats=d["test_stats"],
            diagnostics=d["diagnostics"],
            level=d["level"],
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def build_report(
    estimator: str,
    estimates: dict[str, float],
    std_errors: dict[str, float],
    **kwargs,
) -> EstimateReport:
    """Assemble a report, deriving the 95% intervals from the SEs."""
    conf_ints = {
        k: (estimates[k] - Z_95 * std_errors.get(k, 0.0), estimates[k] + Z_95 * std_errors.get(k, 0.0))
        for k in estimates
    }
    return EstimateReport(
        estimator=estimator,
        estimates={k: float(v) for k, v in estimates.items()},
        std_errors={k: float(v) for k, v in std_errors.items()},
        conf_ints=conf_ints,
        **kwargs,
    )
