import dataclasses
import warnings

import numpy as np
import pytest

from spillnet import ConfigId, SpatialDomain, simulate_dataset
from spillnet.core import EstimatorError, InputError
from spillnet.dgp import DgpSettings
from spillnet.estimators import (
    ESTIMATORS,
    HacSpec,
    did,
    gps,
    hac_cov,
    hop_distances,
    ik_bandwidth,
    network_iv,
    spatial_rd,
    twfe,
)
from spillnet.estimators._linreg import ols, two_sls

SMALL = DgpSettings(n_units=300, domain=SpatialDomain(nx1=32, nx2=32, nalpha=8))


@pytest.fixture(scope="module")
def case1():
    return simulate_dataset(ConfigId.NO_SPILLOVERS, SMALL, seed=31)


@pytest.fixture(scope="module")
def case4():
    return simulate_dataset(ConfigId.FULL_MODEL, SMALL, seed=31)


def test_reports_have_mechanical_confidence_intervals(case1):
    for name, fn in ESTIMATORS.items():
        report = fn(case1)
        for key, est in report.estimates.items():
            lo, hi = report.conf_ints[key]
            se = report.std_errors.get(key, 0.0)
            assert lo == pytest.approx(est - 1.96 * se, abs=1e-12)
            assert hi == pytest.approx(est + 1.96 * se, abs=1e-12)
            assert se >= 0.0


# ---------------------------------------------------------------------------
# pseudo-panel OLS
# ---------------------------------------------------------------------------


def test_twfe_recovers_direct_effect_case1(case1):
    report = twfe(case1)
    assert report.estimates["direct"] == pytest.approx(0.1, abs=0.03)


def test_twfe_no_signal_dataset():
    d = simulate_dataset(ConfigId.NO_SPILLOVERS, SMALL, seed=32)
    silent = dataclasses.replace(
        d, source=np.zeros(d.n_units), outcome=np.random.default_rng(0).normal(0, 0.05, d.n_units)
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = twfe(silent)
    assert abs(report.estimates["direct"]) <= max(3 * report.std_errors["direct"], 1e-12)


def test_twfe_warns_and_drops_collinear_columns(case1):
    rigged = dataclasses.replace(
        case1, controls=np.column_stack([case1.controls[:, 0], case1.controls[:, 0], case1.controls[:, 2]])
    )
    with pytest.warns(UserWarning, match="collinear"):
        twfe(rigged)


def test_twfe_requires_enough_bins(case1):
    with pytest.raises(InputError):
        twfe(case1, n_bins=1)


# ---------------------------------------------------------------------------
# weighted contrast
# ---------------------------------------------------------------------------


def test_did_identical_outcomes_give_zero_att(case1):
    flat = dataclasses.replace(case1, outcome=np.full(case1.n_units, 2.5))
    report = did(flat)
    assert report.estimates["att_raw"] == pytest.approx(0.0, abs=1e-12)


def test_did_detects_separation(case1):
    treated = (case1.coords[:, 0] > 50).astype(float)
    rigged = dataclasses.replace(
        case1, controls=np.column_stack([treated * 10.0, case1.controls[:, 1:]])
    )
    with pytest.raises(EstimatorError):
        did(rigged)


def test_did_direct_near_truth_case1(case1):
    report = did(case1)
    assert report.estimates["direct"] == pytest.approx(0.1, abs=0.02)


# ---------------------------------------------------------------------------
# dose response
# ---------------------------------------------------------------------------


def test_gps_noiseless_linear_dose_response(case1):
    pure = dataclasses.replace(case1, outcome=0.1 * case1.source)
    report = gps(pure)
    assert report.estimates["dose_response_slope"] == pytest.approx(0.1, abs=1e-6)


def test_gps_rejects_zero_source(case1):
    silent = dataclasses.replace(case1, source=np.zeros(case1.n_units))
    with pytest.raises(EstimatorError):
        gps(silent)


def test_gps_bandwidth_recorded(case1):
    report = gps(case1, bandwidth=0.02)
    assert report.diagnostics["bandwidth"] == pytest.approx(0.02)


# ---------------------------------------------------------------------------
# boundary discontinuity
# ---------------------------------------------------------------------------


def test_spatial_rd_noiseless_step():
    d = simulate_dataset(ConfigId.NO_SPILLOVERS, SMALL, seed=33)
    step = dataclasses.replace(
        d,
        outcome=(d.coords[:, 0] > 50).astype(float),
        controls=np.random.default_rng(1).normal(0, 1e-8, (d.n_units, 3)),
    )
    report = spatial_rd(step, bandwidth=20.0)
    assert report.estimates["discontinuity"] == pytest.approx(1.0, abs=1e-6)


def test_spatial_rd_requires_units_in_window(case1):
    with pytest.raises(EstimatorError):
        spatial_rd(case1, bandwidth=0.5)


def test_ik_bandwidth_positive_and_finite(case1):
    h = ik_bandwidth(case1.coords[:, 0], case1.outcome, cutoff=50.0)
    assert 0 < h < 100


def test_spatial_rd_case1_unbiased(case1):
    report = spatial_rd(case1)
    assert report.estimates["direct"] == pytest.approx(0.1, abs=0.03)


# ---------------------------------------------------------------------------
# network instrumental variables
# ---------------------------------------------------------------------------


def test_network_iv_equals_ols_when_instrument_is_regressor(case1):
    frozen = dataclasses.replace(case1, lagged_network=case1.network.copy())
    report = network_iv(frozen)
    exposure = case1.network.astype(float) @ case1.source
    design = np.column_stack(
        [np.ones(case1.n_units), case1.source, case1.controls, exposure]
    )
    beta, *_ = ols(design, case1.outcome)
    assert report.estimates["beta_source"] == pytest.approx(beta[1], abs=1e-8)
    assert report.estimates["beta_exposure"] == pytest.approx(beta[-1], abs=1e-8)


def test_network_iv_requires_lagged_network(case1):
    stripped = dataclasses.replace(case1, lagged_network=None)
    with pytest.raises(InputError):
        network_iv(stripped)


def test_network_iv_first_stage_f_reported(case1):
    report = network_iv(case1)
    assert report.diagnostics["first_stage_F"] > 4.0
    assert report.diagnostics["weak_instrument"] is False


def test_two_sls_helper_matches_manual_projection():
    rng = np.random.default_rng(4)
    n = 400
    z = rng.normal(size=n)
    w = z + 0.5 * rng.normal(size=n)
    y = 2.0 * w + rng.normal(size=n)
    exog = np.ones((n, 1))
    beta, cov, fstats, _ = two_sls(y, exog, w[:, None], z[:, None])
    assert beta[1] == pytest.approx(2.0, abs=0.2)
    assert fstats[0] > 50


# ---------------------------------------------------------------------------
# the spatial-network covariance
# ---------------------------------------------------------------------------


def test_hac_collapses_to_heteroskedastic_sum():
    rng = np.random.default_rng(5)
    n = 60
    coords = rng.uniform(0, 100, (n, 2))
    m = rng.normal(size=(2, n))
    hops = np.full((n, n), np.inf)
    np.fill_diagonal(hops, 0.0)
    tiny = HacSpec(spatial_bandwidth=1e-9, network_bandwidth=1e-9)
    got = hac_cov(m, coords, hops, tiny)
    np.testing.assert_allclose(got, m @ m.T, rtol=1e-10)


def test_hac_matches_iid_covariance_for_independent_moments():
    rng = np.random.default_rng(6)
    n = 2000
    coords = rng.uniform(0, 100, (n, 2))
    m = rng.normal(size=(1, n))
    hops = np.ones((n, n))
    np.fill_diagonal(hops, 0.0)
    got = hac_cov(m, coords, hops, HacSpec(spatial_bandwidth=10.0, network_bandwidth=3.0))
    iid = float(m @ m.T)
    assert got[0, 0] == pytest.approx(iid, rel=0.10)


def test_hac_recovers_known_spatial_covariogram():
    # oracle: a Gaussian field with covariance sigma^2 exp(-d / rho) has an
    # analytic total variance sum; averaging the estimator over replications
    # of the field on fixed coordinates must come within 20%
    rng = np.random.default_rng(7)
    n = 400
    coords = rng.uniform(0, 100, (n, 2))
    d = np.hypot(*(coords[:, i][:, None] - coords[:, i][None, :] for i in range(2)))
    cov_true = 0.5 * np.exp(-d / 3.0)
    analytic = cov_true.sum()
    chol = np.linalg.cholesky(cov_true + 1e-10 * np.eye(n))
    hops = np.ones((n, n))
    np.fill_diagonal(hops, 0.0)
    spec = HacSpec(spatial_bandwidth=25.0, network_bandwidth=1e9)
    complete = np.ones((n, n)) - np.eye(n)
    hop_mat = hop_distances(complete.astype(bool), 1)
    draws = []
    for seed in range(40):
        field = chol @ np.random.default_rng(100 + seed).standard_normal(n)
        draws.append(hac_cov(field[None, :], coords, hop_mat, spec)[0, 0])
    assert np.mean(draws) == pytest.approx(analytic, rel=0.20)


def test_hac_output_is_psd(case4):
    rng = np.random.default_rng(8)
    m = rng.normal(size=(4, case4.n_units))
    hops = hop_distances(case4.network, 2)
    got = hac_cov(m, case4.coords, hops, HacSpec())
    eigvals = np.linalg.eigvalsh(got)
    assert eigvals.min() >= -1e-10
    np.testing.assert_allclose(got, got.T, atol=1e-12)


def test_hop_distances_small_graph():
    adj = np.zeros((4, 4), dtype=bool)
    adj[0, 1] = adj[1, 0] = adj[1, 2] = adj[2, 1] = True
    hops = hop_distances(adj, 3)
    assert hops[0, 1] == 1 and hops[0, 2] == 2
    assert np.isinf(hops[0, 3])
    assert hops[3, 3] == 0
