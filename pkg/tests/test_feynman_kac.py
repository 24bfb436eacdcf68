import numpy as np
import pytest

from spillnet import (
    InputError,
    SpatialDomain,
    StructuralParams,
    StochasticSource,
    delta_method_variance,
    distance_profile,
    fk_effect,
    fk_variance,
    pimc,
    sensitivities_fd,
    sensitivity_kappa,
    simulate_paths,
)
from spillnet.pde import GridField, SolverOptions, transient

CASE2 = StructuralParams(100.0, 0.0, 0.25, 0.0)
CASE4 = StructuralParams(100.0, 0.015, 0.25, 0.04)
DECAY = StructuralParams(0.0, 0.0, 0.25, 0.0)
CENTER = (np.array([50.0, 50.0]), 0.5)


def border_source(x, alpha):
    return 0.1 * (x[:, 0] > 50.0) * (1.0 + 0.3 * np.asarray(alpha))


def test_zero_diffusion_paths_stay_put():
    bundle = simulate_paths(DECAY, CENTER, t=1.0, dt=0.1, M=50, rng=np.random.default_rng(0))
    assert np.all(bundle.trajectories == bundle.trajectories[:, :1, :])


def test_increment_covariance_matches_generator():
    # moment check: per-unit-time increment covariance approximates the
    # diffusion matrix [[2 nu_s, 0, lam], [0, 2 nu_s, 0], [lam, 0, 2 nu_n]]
    params = StructuralParams(100.0, 0.015, 0.25, 0.04)
    dt = 0.01
    bundle = simulate_paths(params, CENTER, t=1.0, dt=dt, M=20_000, rng=np.random.default_rng(1))
    incr = np.diff(bundle.trajectories, axis=1).reshape(-1, 3)
    cov = np.cov(incr.T) / dt
    target = params.diffusion_matrix()
    for i in range(3):
        assert cov[i, i] == pytest.approx(target[i, i], rel=0.02)
    assert cov[0, 2] == pytest.approx(target[0, 2], abs=0.02 * np.sqrt(target[0, 0] * target[2, 2]))


def test_antithetic_pairs_mirror_exactly():
    bundle = simulate_paths(
        CASE2, CENTER, t=0.5, dt=0.05, M=40, rng=np.random.default_rng(2), antithetic=True
    )
    assert bundle.n_paths == 80
    disp = bundle.trajectories - bundle.trajectories[:, :1, :]
    np.testing.assert_allclose(disp[0::2] + disp[1::2], 0.0, atol=1e-10)


def test_paths_respect_domain():
    domain = SpatialDomain()
    bundle = simulate_paths(CASE4, CENTER, t=4.0, dt=0.01, M=200, rng=np.random.default_rng(3))
    traj = bundle.trajectories
    assert traj[:, :, 0].min() >= 0.0 and traj[:, :, 0].max() <= domain.x1_extent[1]
    assert traj[:, :, 2].min() >= 0.0 and traj[:, :, 2].max() <= 1.0


def test_fk_effect_constant_source_analytic():
    est, se = fk_effect(
        CASE2, 0.1, None, CENTER, t=4.0, dt=0.001, M=200, rng=np.random.default_rng(4)
    )
    analytic = 0.1 / 0.25 * (1 - np.exp(-1.0))
    # constant source makes every path identical: tolerance is the dt bias
    assert se == pytest.approx(0.0, abs=1e-12)
    assert est == pytest.approx(analytic, abs=max(3 * se, 1e-3))


def test_fk_effect_pure_initial_condition_discount():
    est, se = fk_effect(
        CASE2, None, 3.0, CENTER, t=2.0, dt=0.01, M=100, rng=np.random.default_rng(5)
    )
    assert se == pytest.approx(0.0, abs=1e-15)
    assert est == pytest.approx(3.0 * np.exp(-0.25 * 2.0), abs=1e-12)


def test_fk_discount_squares_when_kappa_doubles():
    args = dict(source=None, tau0=1.0, start=CENTER, t=2.0, dt=0.01, M=10)
    e1, _ = fk_effect(StructuralParams(0, 0, 0.25, 0), rng=np.random.default_rng(6), **args)
    e2, _ = fk_effect(StructuralParams(0, 0, 0.5, 0), rng=np.random.default_rng(6), **args)
    assert e2 == pytest.approx(e1**2, abs=1e-12)


def test_fk_matches_transient_pde_at_zero_interaction():
    # cross-oracle: lattice transient and path average agree within 3 path SEs
    from spillnet.dgp import treated_cell_fraction

    domain = SpatialDomain(nx1=65, nx2=33, nalpha=9)
    x1 = domain.axes()[0]
    frac = treated_cell_fraction(x1, domain.spacing[0], 50.0)
    src_grid = GridField.from_function(
        domain, lambda x1v, x2, al: 0.1 * frac[:, None, None] * (1.0 + 0.3 * al)
    )
    tau0 = GridField.constant(domain, 0.0)
    t_eval = 2.0
    pde = transient(CASE2, tau0, src_grid, dt=0.01, t_end=t_eval, opts=SolverOptions(tolerance=1e-10))
    rng = np.random.default_rng(7)
    for x1, x2, al in [(46.9, 50.0, 0.5), (53.1, 25.0, 0.25), (60.9, 75.0, 0.75), (37.5, 50.0, 0.5)]:
        est, se = fk_effect(
            CASE2, border_source, None, (np.array([x1, x2]), al), t=t_eval, dt=0.005, M=4000, rng=rng
        )
        ref = pde.final.interpolate(np.array([[x1, x2]]), np.array([al]))[0]
        assert abs(est - ref) <= 3 * se + 1e-4


def test_antithetic_variance_reduction_on_border_source():
    ses_anti, ses_plain = [], []
    for seed in range(5):
        _, se_a = fk_effect(
            CASE2, border_source, None, CENTER, t=2.0, dt=0.01, M=1500,
            rng=np.random.default_rng(100 + seed), antithetic=True,
        )
        _, se_p = fk_effect(
            CASE2, border_source, None, CENTER, t=2.0, dt=0.01, M=3000,
            rng=np.random.default_rng(200 + seed),
        )
        ses_anti.append(se_a)
        ses_plain.append(se_p)
    assert np.mean(ses_anti) <= np.mean(ses_plain) * 1.02


def test_control_variate_reduces_variance():
    # regression control variate: the border indicator integral along the same
    # paths is highly correlated with the value; partialling it out must cut
    # the variance (the factor is recorded for reference)
    rng = np.random.default_rng(11)
    bundle = simulate_paths(CASE2, CENTER, t=2.0, dt=0.01, M=4000, rng=rng, source=border_source)
    rng2 = np.random.default_rng(11)
    indicator = lambda x, al: 1.0 * (x[:, 0] > 50.0)
    control = simulate_paths(CASE2, CENTER, t=2.0, dt=0.01, M=4000, rng=rng2, source=indicator)
    v = bundle.discounted_integrals
    c = control.discounted_integrals
    b = np.cov(v, c)[0, 1] / np.var(c)
    reduced = v - b * (c - c.mean())
    factor = reduced.var() / v.var()
    assert factor < 1.0


def test_fk_variance_deterministic_requires_paths():
    var = fk_variance(DECAY, 0.1, CENTER, t=2.0, dt=0.01, M=50, rng=np.random.default_rng(8))
    assert var == pytest.approx(0.0, abs=1e-20)


def test_fk_variance_stochastic_constant_volatility():
    source = StochasticSource(mean=0.1, volatility=0.2)
    got = fk_variance(DECAY, source, CENTER, t=4.0, dt=0.002, M=100, rng=np.random.default_rng(9))
    analytic = 0.2**2 * (1 - np.exp(-2 * 0.25 * 4.0)) / (2 * 0.25)
    assert got == pytest.approx(analytic, rel=0.03)


def test_fk_variance_matches_large_sample_oracle():
    args = dict(source=border_source, start=CENTER, t=1.0, dt=0.01)
    small = fk_variance(CASE2, M=20_000, rng=np.random.default_rng(10), **args)
    big = fk_variance(CASE2, M=200_000, rng=np.random.default_rng(1010), **args)
    assert small == pytest.approx(big, rel=0.05)


def test_stochastic_source_rejects_negative_volatility():
    source = StochasticSource(mean=0.1, volatility=lambda x, al: -np.ones(len(x)))
    with pytest.raises(InputError):
        fk_variance(DECAY, source, CENTER, t=1.0, dt=0.1, M=10, rng=np.random.default_rng(0))


def test_sensitivity_kappa_zero_source():
    got = sensitivity_kappa(CASE2, 0.0, CENTER, t=2.0, dt=0.01, M=100, rng=np.random.default_rng(12))
    assert got == 0.0


def test_sensitivity_kappa_constant_source_analytic():
    # d/dkappa of (S/kappa)(1 - e^{-kappa t})
    s0, kappa, t = 0.1, 0.25, 4.0
    got = sensitivity_kappa(
        StructuralParams(0, 0, kappa, 0), s0, CENTER, t=t, dt=0.001, M=50,
        rng=np.random.default_rng(13),
    )
    analytic = -s0 * (1 - np.exp(-kappa * t)) / kappa**2 + s0 * t * np.exp(-kappa * t) / kappa
    assert got == pytest.approx(analytic, rel=0.01)


def test_sensitivity_kappa_against_finite_difference():
    # common-random-number central difference of the effect in kappa
    h = 1e-3
    seed = 77
    analytic = sensitivity_kappa(
        CASE2, border_source, CENTER, t=2.0, dt=0.005, M=20_000, rng=np.random.default_rng(seed)
    )
    up = fk_effect(
        StructuralParams(100, 0, 0.25 + h, 0), border_source, None, CENTER,
        t=2.0, dt=0.005, M=20_000, rng=np.random.default_rng(seed),
    )[0]
    dn = fk_effect(
        StructuralParams(100, 0, 0.25 - h, 0), border_source, None, CENTER,
        t=2.0, dt=0.005, M=20_000, rng=np.random.default_rng(seed),
    )[0]
    fd = (up - dn) / (2 * h)
    assert analytic == pytest.approx(fd, rel=0.01)


def test_sensitivities_fd_constant_problem_has_no_diffusion_gradient():
    grad = sensitivities_fd(
        StructuralParams(0, 0, 0.25, 0), 0.1, CENTER, t=2.0, dt=0.01, M=200,
        rng=np.random.default_rng(14),
    )
    assert grad[0] == pytest.approx(0.0, abs=1e-10)
    assert grad[1] == pytest.approx(0.0, abs=1e-10)
    assert grad[2] < 0


def test_sensitivities_fd_kappa_component_matches_analytic():
    rng = np.random.default_rng(15)
    grad = sensitivities_fd(
        StructuralParams(0, 0, 0.25, 0), 0.1, CENTER, t=4.0, dt=0.002, M=100, rng=rng
    )
    analytic = sensitivity_kappa(
        StructuralParams(0, 0, 0.25, 0), 0.1, CENTER, t=4.0, dt=0.002, M=100,
        rng=np.random.default_rng(15),
    )
    assert grad[2] == pytest.approx(analytic, rel=0.01)


def test_sensitivities_fd_border_point_all_finite():
    grad = sensitivities_fd(
        CASE4, border_source, (np.array([50.5, 50.0]), 0.5), t=2.0, dt=0.01, M=4000,
        rng=np.random.default_rng(16),
    )
    assert np.all(np.isfinite(grad))
    assert grad[2] < 0  # faster decay lowers accumulated effects


def test_delta_method_basics():
    assert delta_method_variance(np.zeros(4), np.eye(4)) == 0.0
    assert delta_method_variance(np.ones(4), np.eye(4)) == pytest.approx(4.0)
    with pytest.raises(InputError):
        delta_method_variance(np.ones(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_delta_method_matches_sampling_oracle():
    rng = np.random.default_rng(17)
    a = rng.normal(size=(4, 4))
    v = a @ a.T / 10.0
    g = np.array([0.5, -1.0, 2.0, 0.3])
    draws = rng.multivariate_normal(np.zeros(4), v, size=200_000)
    sampled = (draws @ g).var()
    assert delta_method_variance(g, v) == pytest.approx(sampled, rel=0.02)


def test_pimc_degenerate_posterior():
    summary = pimc(
        (CASE2.as_array(), np.zeros((4, 4))), B=20, M=40, source=border_source,
        start=CENTER, t=1.0, dt=0.02, rng=np.random.default_rng(18),
    )
    assert summary.parameter_variance == pytest.approx(0.0, abs=1e-12)
    assert summary.total_variance == pytest.approx(
        summary.within_model_variance + summary.parameter_variance, abs=1e-10
    )


def test_pimc_decomposition_identity():
    cov = np.diag([25.0, 1e-6, 1e-4, 0.0])
    summary = pimc(
        (CASE2.as_array(), cov), B=30, M=30, source=border_source, start=CENTER,
        t=1.0, dt=0.02, rng=np.random.default_rng(19),
    )
    assert summary.total_variance == pytest.approx(
        summary.within_model_variance + summary.parameter_variance, abs=1e-10
    )
    assert summary.ci_lo <= summary.mean <= summary.ci_hi


def test_pimc_rejects_hopeless_posterior():
    mean = np.array([-50.0, 0.0, 0.25, 0.0])  # nu_s mass almost entirely negative
    cov = np.diag([1e-4, 0.0, 0.0, 0.0])
    with pytest.raises(InputError):
        pimc(
            (mean, cov), B=10, M=10, source=border_source, start=CENTER,
            t=0.5, dt=0.05, rng=np.random.default_rng(20),
        )


def test_distance_profile_no_spillovers_flat_then_zero():
    rows = distance_profile(
        (np.array([0.0, 0.0, 0.25, 0.0]), np.zeros((4, 4))),
        border_source,
        distances=[-30.0, -10.0, 10.0, 30.0],
        t=8.0,
        dt=0.05,
        B=5,
        M=5,
        seed=3,
    )
    treated = [r["mean"] for r in rows if r["distance"] < 0]
    untreated = [r["mean"] for r in rows if r["distance"] > 0]
    assert max(untreated) == pytest.approx(0.0, abs=1e-12)
    assert treated[0] == pytest.approx(treated[1], rel=1e-6)
    assert treated[0] > 0.3
