import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import norm

from pmm.forward import ObservationBlock, interior_grid_2d, solve_forward
from pmm.inverse import (
    ACInverseSetup,
    AllWeightsDegenerate,
    AllZeroMass,
    CoarseSolutionCache,
    HalfCauchyPrior,
    LogUniformPrior,
    NoiseModel,
    PMEstimate,
    SolutionIndexOutOfRange,
    UniformPrior,
    ac_plugin_mcmc,
    grid_mean_std,
    grid_mode,
    grid_posterior,
    importance_sample_z,
    plugin_delta_scan,
    plugin_loglik,
    pm_loglik,
    pm_mcmc,
    pn_loglik,
    rw_metropolis,
)
from pmm.kernels import OperatorTag, SqExpKernel
from pmm.linalg import RngStream, mvn_logpdf
from pmm.problems import Poisson1D, ac_design, generate_data, poisson_exact


@pytest.fixture(scope="module")
def ac_context():
    data_locations = interior_grid_2d(4)
    cache = CoarseSolutionCache(31, 0.002, seed=0)
    setup = ACInverseSetup(design=ac_design(5, 5), data_locations=data_locations, cache=cache)
    truth = cache.solutions(0.04)[0].interpolate(data_locations)
    sigma = 0.02
    y = truth + sigma * RngStream(0, 32).generator().standard_normal(len(truth))
    return setup, y, NoiseModel.isotropic(sigma, len(y))


class TestNoiseModel:
    def test_isotropic(self):
        nm = NoiseModel.isotropic(0.1, 3)
        np.testing.assert_allclose(nm.cov, 0.01 * np.eye(3))
        assert nm.n == 3

    def test_invalid_sigma(self):
        with pytest.raises(ValueError):
            NoiseModel.isotropic(0.0, 2)


class TestPriors:
    def test_uniform(self):
        p = UniformPrior(0.0, 2.0)
        assert p.logpdf(1.0) == pytest.approx(-np.log(2.0))
        assert p.logpdf(2.5) == -np.inf

    def test_half_cauchy_normalization(self):
        from scipy.integrate import quad
        p = HalfCauchyPrior(0.7)
        total, _ = quad(lambda t: np.exp(p.logpdf(t)), 0, np.inf)
        assert total == pytest.approx(1.0, abs=1e-8)
        assert p.logpdf(-0.1) == -np.inf

    def test_log_uniform(self):
        p = LogUniformPrior(0.1, 10.0)
        from scipy.integrate import quad
        total, _ = quad(lambda t: np.exp(p.logpdf(t)), 0.1, 10.0)
        assert total == pytest.approx(1.0, abs=1e-8)


class TestPluginLoglik:
    def test_at_mode(self):
        n = 4
        y = np.arange(float(n))
        val = plugin_loglik(y, y, NoiseModel(np.eye(n)))
        assert val == pytest.approx(-0.5 * n * np.log(2 * np.pi))

    def test_scalar_formula(self):
        val = plugin_loglik([0.1], [0.0], NoiseModel.isotropic(0.01, 1))
        assert val == pytest.approx(norm.logpdf(0.1, 0.0, 0.01), rel=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal(5)
        mu = rng.standard_normal(5)
        cov = np.diag(rng.uniform(0.5, 2.0, 5))
        perm = rng.permutation(5)
        a = plugin_loglik(y, mu, NoiseModel(cov))
        b = plugin_loglik(y[perm], mu[perm], NoiseModel(cov[np.ix_(perm, perm)]))
        assert a == pytest.approx(b, rel=1e-12)


class TestPnLoglik:
    def make_posterior(self, with_identity_at=None, m=8, ell=0.2):
        problem = Poisson1D()
        blocks = problem.blocks(m)
        if with_identity_at is not None:
            pts = np.asarray(with_identity_at)[:, None]
            blocks.append(ObservationBlock(OperatorTag.identity(), pts,
                                           problem.exact(pts[:, 0])))
        return solve_forward(blocks, SqExpKernel(ell))

    def test_equals_plugin_when_solver_exact(self):
        locs = [0.25, 0.75]
        post = self.make_posterior(with_identity_at=locs)
        noise = NoiseModel.isotropic(0.01, 2)
        y = np.array([0.03, -0.02])
        a = pn_loglik(y, post, np.asarray(locs)[:, None], noise)
        b = plugin_loglik(y, post.mean(np.asarray(locs)[:, None]), noise)
        assert a == pytest.approx(b, abs=1e-6)

    def test_lower_at_mode_when_inflated(self):
        locs = np.array([[0.3], [0.6]])
        post = self.make_posterior(m=4)
        noise = NoiseModel.isotropic(0.01, 2)
        mu = post.mean(locs)
        assert np.trace(post.cov(locs)) > 1e-8
        assert pn_loglik(mu, post, locs, noise) < plugin_loglik(mu, mu, noise)

    def test_scalar_case(self):
        locs = np.array([[0.4]])
        post = self.make_posterior(m=4)
        noise = NoiseModel.isotropic(0.01, 1)
        s2 = post.cov(locs)[0, 0]
        mu = post.mean(locs)[0]
        y = 0.05
        want = -0.5 * np.log(2 * np.pi * (1e-4 + s2)) - 0.5 * (y - mu) ** 2 / (1e-4 + s2)
        assert pn_loglik([y], post, locs, noise) == pytest.approx(want, rel=1e-9)


class TestGridPosterior:
    def test_constant_loglik_returns_prior(self):
        grid = np.linspace(0.01, 1.99, 100)
        prior = UniformPrior(0.0, 2.0)
        dens = grid_posterior(grid, prior, lambda t: 0.0)
        np.testing.assert_allclose(dens, dens[0])
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-9)

    def test_all_zero_mass(self):
        grid = np.linspace(0.1, 1.0, 60)
        with pytest.raises(AllZeroMass):
            grid_posterior(grid, UniformPrior(2.0, 3.0), lambda t: 0.0)

    def test_needs_enough_points(self):
        with pytest.raises(ValueError):
            grid_posterior(np.linspace(0, 1, 10), UniformPrior(0, 1), lambda t: 0.0)

    def test_gaussian_loglik_recovers_moments(self):
        grid = np.linspace(-3, 5, 400)
        dens = grid_posterior(grid, UniformPrior(-4, 6),
                              lambda t: norm.logpdf(t, 1.2, 0.4))
        mean, std = grid_mean_std(grid, dens)
        assert mean == pytest.approx(1.2, abs=1e-3)
        assert std == pytest.approx(0.4, abs=1e-3)
        assert grid_mode(grid, dens) == pytest.approx(1.2, abs=0.02)


@pytest.fixture(scope="module")
def scenario():
    # small-noise configuration isolates the discretisation effects
    locations = np.array([0.25, 0.75])
    sigma = 0.001
    y = generate_data(1.0, locations, sigma, RngStream(5, 1))
    noise = NoiseModel.isotropic(sigma, 2)
    grid = np.linspace(0.4, 2.5, 220)
    prior = UniformPrior(0.25, 4.0)
    kernel = SqExpKernel(0.2)

    def posterior_for(m, kind):
        def loglik(theta):
            post = solve_forward(Poisson1D(theta).blocks(m), kernel)
            if kind == "pn":
                return pn_loglik(y, post, locations[:, None], noise)
            return plugin_loglik(y, post.mean(locations[:, None]), noise)

        return grid_posterior(grid, prior, loglik)

    return grid, posterior_for


class TestInverse1DBehavior:

    def test_pn_narrows_with_design(self, scenario):
        grid, posterior_for = scenario
        stds = [grid_mean_std(grid, posterior_for(m, "pn"))[1] for m in (4, 8, 16)]
        assert stds[0] > stds[1] > stds[2]

    def test_plugin_width_insensitive_to_design(self, scenario):
        grid, posterior_for = scenario
        stds = [grid_mean_std(grid, posterior_for(m, "plugin"))[1] for m in (4, 8, 16)]
        assert (max(stds) - min(stds)) / max(stds) < 0.25

    def test_plugin_mode_bias_shrinks(self, scenario):
        grid, posterior_for = scenario
        err4 = abs(grid_mode(grid, posterior_for(4, "plugin")) - 1.0)
        err16 = abs(grid_mode(grid, posterior_for(16, "plugin")) - 1.0)
        assert err4 > err16
        assert err16 < 0.05

    def test_pn_approaches_plugin_with_refinement(self, scenario):
        locations = np.array([0.25, 0.75])
        sigma = 0.001
        y = generate_data(1.0, locations, sigma, RngStream(5, 1))
        noise = NoiseModel.isotropic(sigma, 2)
        kernel = SqExpKernel(0.2)
        gaps = []
        for m in (4, 8, 16, 32):
            post = solve_forward(Poisson1D(1.0).blocks(m, design="nested"), kernel)
            a = pn_loglik(y, post, locations[:, None], noise)
            b = plugin_loglik(y, post.mean(locations[:, None]), noise)
            gaps.append(abs(a - b))
        assert all(g2 < g1 for g1, g2 in zip(gaps, gaps[1:]))


class TestRwMetropolis:
    def test_standard_normal_moments(self):
        chain, rate = rw_metropolis(lambda x: -0.5 * float(x @ x), np.zeros(1),
                                    [2.4], 100_000, RngStream(3))
        assert 0.2 < rate < 0.7
        assert abs(chain.mean()) < 0.05
        assert abs(chain.var() - 1.0) < 0.1

    def test_positive_steps_required(self):
        with pytest.raises(ValueError):
            rw_metropolis(lambda x: 0.0, np.zeros(1), [0.0], 10, RngStream(0))

    def test_reproducible(self):
        target = lambda x: -0.5 * float(x @ x)
        a, _ = rw_metropolis(target, np.zeros(2), [1.0, 1.0], 500, RngStream(9, 4))
        b, _ = rw_metropolis(target, np.zeros(2), [1.0, 1.0], 500, RngStream(9, 4))
        np.testing.assert_array_equal(a, b)

    def test_two_state_detailed_balance(self):
        # discretized two-well target: transition counts between the wells
        # are symmetric, and the occupancies match the well masses (the
        # substantive balance check; count symmetry alone is an exact
        # alternation property of any scalar trajectory)
        def logtarget(x):
            return float(np.log(0.3 * norm.pdf(x[0], -1, 0.3) + 0.7 * norm.pdf(x[0], 1, 0.3)))

        chain, _ = rw_metropolis(logtarget, np.zeros(1), [1.2], 200_000, RngStream(11))
        states = (chain[:, 0] > 0).astype(int)
        up = np.sum((states[:-1] == 0) & (states[1:] == 1))
        down = np.sum((states[:-1] == 1) & (states[1:] == 0))
        assert abs(up - down) <= 1
        assert up > 50
        assert abs(states.mean() - 0.7) < 0.03


class TestPMEstimate:
    def test_log_weight_combination(self):
        lw = np.array([-1.0, -2.0, -3.0])
        est = PMEstimate.from_log_weights(lw)
        assert est.m == 3
        assert est.log_estimate == pytest.approx(logsumexp(lw) - np.log(3), rel=1e-14)

    def test_single_weight(self):
        est = PMEstimate.from_log_weights(np.array([-4.2]))
        assert est.log_estimate == pytest.approx(-4.2)

    def test_degenerate_weights(self):
        with pytest.raises(AllWeightsDegenerate):
            PMEstimate.from_log_weights(np.array([-np.inf, -np.inf]))


class TestConjugateToy:
    """Gaussian toy with a closed-form marginal: y | z ~ N(z, s^2),
    z ~ N(0, t^2) used both as prior and proposal, so the weights are
    p(y | z_i) alone and the estimator targets N(y; 0, s^2 + t^2)."""

    s, t, y = 0.7, 1.1, 0.3

    def estimate(self, m, rng):
        z = self.t * rng.generator().standard_normal(m)
        logw = norm.logpdf(self.y, z, self.s)
        return PMEstimate.from_log_weights(logw)

    def exact(self):
        return norm.logpdf(self.y, 0.0, np.hypot(self.s, self.t))

    def test_unbiased(self):
        vals = np.array([
            np.exp(self.estimate(64, RngStream(100, i)).log_estimate) for i in range(200)
        ])
        target = np.exp(self.exact())
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - target) < 3 * se

    def test_error_scales_with_particles(self):
        sds = []
        for m in (32, 128):
            vals = [self.estimate(m, RngStream(200 + m, i)).log_estimate for i in range(20)]
            sds.append(np.std(vals))
        assert np.isfinite(sds[0]) and sds[0] > 0
        assert sds[1] < sds[0]


class TestImportanceSampleZ:
    def test_collapsed_proposal_returns_center(self, ac_context):
        setup, _, _ = ac_context
        kernel = SqExpKernel(0.2, dim=2)
        z, _ = importance_sample_z(0.04, 1, kernel, setup.design, RngStream(1),
                                   cache=setup.cache, cov_scale=1e-12)
        from pmm.problems import z_from_u
        center = z_from_u(setup.cache.solutions(0.04)[0], 0.04,
                          setup.design.interior_points).z_values
        assert np.max(np.abs(z.z_values - center)) < 1e-4

    def test_log_density_at_center(self, ac_context):
        setup, _, _ = ac_context
        kernel = SqExpKernel(0.2, dim=2)
        from pmm.kernels import op_gram
        from pmm.linalg import chol_jitter
        x = setup.design.interior_points
        cov = op_gram(OperatorTag.identity(), OperatorTag.identity(), kernel, x, x)
        f = chol_jitter(cov)
        expected = -0.5 * (len(x) * np.log(2 * np.pi)
                           + 2 * np.sum(np.log(np.diag(f.lower))))
        from pmm.problems import z_from_u
        center = z_from_u(setup.cache.solutions(0.04)[0], 0.04, x).z_values
        got = mvn_logpdf(center, center, cov)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_reproducible(self, ac_context):
        setup, _, _ = ac_context
        kernel = SqExpKernel(0.2, dim=2)
        a, la = importance_sample_z(0.04, 2, kernel, setup.design, RngStream(4, 7),
                                    cache=setup.cache)
        b, lb = importance_sample_z(0.04, 2, kernel, setup.design, RngStream(4, 7),
                                    cache=setup.cache)
        np.testing.assert_array_equal(a.z_values, b.z_values)
        assert la == lb

    def test_index_out_of_range(self, ac_context):
        setup, _, _ = ac_context
        with pytest.raises(SolutionIndexOutOfRange):
            importance_sample_z(0.04, 4, SqExpKernel(0.2, dim=2), setup.design,
                                RngStream(0), cache=setup.cache)


class TestPmLoglik:
    def test_single_particle_is_single_weight(self, ac_context):
        setup, y, noise = ac_context
        est = pm_loglik(y, 0.04, 0.1, 1, 1, noise, RngStream(6), setup=setup)
        assert est.m == 1
        assert est.log_estimate == pytest.approx(est.log_weights[0])

    def test_weight_count(self, ac_context):
        setup, y, noise = ac_context
        est = pm_loglik(y, 0.04, 0.1, 1, 8, noise, RngStream(7), setup=setup)
        assert est.m == 8
        assert len(est.log_weights) == 8

    def test_fixed_xi_reproducible(self, ac_context):
        setup, y, noise = ac_context
        xi = RngStream(8).generator().standard_normal((4, 25))
        a = pm_loglik(y, 0.04, 0.1, 1, 4, noise, RngStream(9), setup=setup, xi=xi)
        b = pm_loglik(y, 0.04, 0.1, 1, 4, noise, RngStream(10), setup=setup, xi=xi)
        assert a.log_estimate == b.log_estimate


class TestPmMcmc:
    def test_prior_support_respected(self, ac_context):
        setup, y, noise = ac_context
        chain = pm_mcmc(y, UniformPrior(0.02, 0.15), HalfCauchyPrior(1.0), 4, 120,
                        RngStream(10, 1), setup=setup, noise=noise, init=(0.04, 0.1, 1))
        assert np.all(chain.delta > 0.02) and np.all(chain.delta < 0.15)
        assert np.all((chain.j >= 1) & (chain.j <= 3))

    def test_estimator_called_once_per_evaluated_proposal(self, ac_context):
        setup, y, noise = ac_context
        calls = []

        def stub(delta, ell, j, xi):
            calls.append(delta)
            return PMEstimate.from_log_weights(np.array([0.0]))

        chain = pm_mcmc(y, UniformPrior(0.02, 0.15), HalfCauchyPrior(1.0), 4, 200,
                        RngStream(11, 2), setup=setup, noise=noise,
                        init=(0.04, 0.1, 1), estimator=stub)
        # one call at init plus one per in-support proposal; retained states
        # are never recomputed
        assert len(calls) == chain.estimator_calls
        assert len(calls) <= 201

    def test_reproducible(self, ac_context):
        setup, y, noise = ac_context
        kwargs = dict(setup=setup, noise=noise, init=(0.04, 0.1, 1))
        a = pm_mcmc(y, UniformPrior(0.02, 0.15), HalfCauchyPrior(1.0), 4, 60,
                    RngStream(12, 3), **kwargs)
        b = pm_mcmc(y, UniformPrior(0.02, 0.15), HalfCauchyPrior(1.0), 4, 60,
                    RngStream(12, 3), **kwargs)
        np.testing.assert_array_equal(a.delta, b.delta)
        np.testing.assert_array_equal(a.log_estimate, b.log_estimate)

    def test_rows_format(self, ac_context):
        setup, y, noise = ac_context
        chain = pm_mcmc(y, UniformPrior(0.02, 0.15), HalfCauchyPrior(1.0), 2, 10,
                        RngStream(13), setup=setup, noise=noise, init=(0.04, 0.1, 1))
        rows = list(chain.rows())
        assert len(rows) == 10
        assert rows[0][0] == 0
        assert chain.FIELDS == ("step", "delta", "ell", "j", "log_estimate", "accepted")


class TestPluginChain:
    def test_runs_and_respects_support(self, ac_context):
        setup, y, noise = ac_context
        chain = ac_plugin_mcmc(y, UniformPrior(0.02, 0.15), 300, RngStream(14),
                               setup=setup, noise=noise, init=(0.04, 1))
        assert np.all(chain.delta > 0.02) and np.all(chain.delta < 0.15)
        assert chain.acceptance_rate > 0.05

    def test_pilot_scan_finds_neighborhood(self, ac_context):
        setup, y, noise = ac_context
        best = plugin_delta_scan(y, setup, noise, np.arange(0.025, 0.146, 0.01))
        assert abs(best - 0.04) < 0.02


class TestCoarseCache:
    def test_snapping_and_memoization(self, ac_context):
        setup, _, _ = ac_context
        a = setup.cache.solutions(0.0401)
        b = setup.cache.solutions(0.0399)
        assert a is b  # same 0.002 cell

    def test_continuation_to_thin_interfaces(self):
        cache = CoarseSolutionCache(31, 0.002, seed=3)
        cache.solutions(0.031)
        assert len(cache.solutions(0.021)) == 3
