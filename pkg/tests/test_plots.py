import numpy as np

from spillnet import ConfigId, SpatialDomain
from spillnet.dgp import DgpSettings
from spillnet.harness import McPlan, event_study_panel, run_mc, summarize
from spillnet.plots import (
    plot_distance_profile,
    plot_event_study,
    plot_mc_summary,
    plot_uncertainty_bands,
)


def test_profile_and_bands_render(tmp_path):
    rows = [
        {"distance": d, "mean": m, "lo68": m - 0.01, "hi68": m + 0.01, "lo95": m - 0.02, "hi95": m + 0.02}
        for d, m in [(0, 0.15), (50, 0.05), (100, 0.01)]
    ]
    plot_distance_profile(rows, tmp_path / "profile.png")
    assert (tmp_path / "profile.png").stat().st_size > 1000

    bands = [
        {"band_lo": 0, "band_hi": 25, "within_pct": 30.0, "parameter_pct": 70.0},
        {"band_lo": 25, "band_hi": 50, "within_pct": 25.0, "parameter_pct": 75.0},
    ]
    plot_uncertainty_bands(bands, tmp_path / "bands.png")
    assert (tmp_path / "bands.png").stat().st_size > 1000


def test_event_study_figure_renders(tmp_path):
    panel = event_study_panel(
        0.3, None, T=8, treat_time=3, M=2, base_seed=1, estimators=("twfe", "gps")
    )
    plot_event_study(panel, tmp_path / "es.png", title="step timing")
    assert (tmp_path / "es.png").stat().st_size > 1000


def test_mc_summary_figure_renders(tmp_path):
    plan = McPlan(
        configs=(ConfigId.NO_SPILLOVERS,),
        estimators=("twfe",),
        replications=2,
        base_seed=5,
        settings=DgpSettings(n_units=100, domain=SpatialDomain(nx1=32, nx2=32, nalpha=8)),
    )
    summary = summarize(run_mc(plan))
    plot_mc_summary(summary, tmp_path / "mc.png")
    assert (tmp_path / "mc.png").stat().st_size > 1000
