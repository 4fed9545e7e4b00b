"""Bayesian inverse problems over PDE parameters.

Two likelihoods are available for a forward solve: the plug-in baseline,
which inserts a point estimate of the solution and ignores discretisation
error, and the solver-marginalized one, which inflates the noise
covariance by the forward posterior covariance. For the nonlinear
Allen-Cahn problem the likelihood is intractable and is estimated
unbiasedly by importance-sampling the latent field around coarse-solver
solutions; a pseudo-marginal Metropolis chain accepts on that estimate.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .forward import ForwardPosterior, solve_forward
from .kernels import SqExpKernel, op_gram, OperatorTag
from .linalg import RngStream, chol_jitter, mvn_logpdf
from .problems import (
    ACDesign,
    GridSolution,
    LatentField,
    ac_deflated_solve,
    linearized_ac_blocks,
    z_from_u,
    DELTA_RANGE,
)

__all__ = [
    "AllZeroMass",
    "AllWeightsDegenerate",
    "SolutionIndexOutOfRange",
    "NoiseModel",
    "UniformPrior",
    "HalfCauchyPrior",
    "LogUniformPrior",
    "ChainState",
    "PMEstimate",
    "ChainResult",
    "plugin_loglik",
    "pn_loglik",
    "grid_posterior",
    "grid_mean_std",
    "grid_mode",
    "rw_metropolis",
    "CoarseSolutionCache",
    "ACInverseSetup",
    "importance_sample_z",
    "pm_loglik",
    "pm_mcmc",
    "ac_plugin_mcmc",
    "plugin_delta_scan",
]

_LOG_2PI = np.log(2.0 * np.pi)


class AllZeroMass(Exception):
    """Every grid log-likelihood underflowed; the grid misses the posterior."""


class AllWeightsDegenerate(Exception):
    """Every importance weight underflowed."""


class SolutionIndexOutOfRange(Exception):
    """A solution index exceeds the number of coarse solutions found."""


@dataclass(frozen=True)
class NoiseModel:
    """Observation-noise covariance."""

    cov: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValueError("noise covariance must be square")
        object.__setattr__(self, "cov", cov)

    @classmethod
    def isotropic(cls, sigma: float, n: int) -> "NoiseModel":
        if not sigma > 0.0:
            raise ValueError("sigma must be positive")
        return cls(sigma**2 * np.eye(n))

    @property
    def n(self) -> int:
        return self.cov.shape[0]


# ----------------------------------------------------------------------
# parameter priors
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class UniformPrior:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    def logpdf(self, x: float) -> float:
        if self.lo < x < self.hi:
            return -np.log(self.hi - self.lo)
        return -np.inf

    def sample(self, rng: RngStream) -> float:
        return float(rng.generator().uniform(self.lo, self.hi))


@dataclass(frozen=True)
class HalfCauchyPrior:
    """Half-Cauchy on (0, inf), the recommended weakly-informative choice
    for scale hyper-parameters."""

    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError("scale must be positive")

    def logpdf(self, x: float) -> float:
        if x <= 0.0:
            return -np.inf
        s = self.scale
        return float(np.log(2.0 / (np.pi * s)) - np.log1p((x / s) ** 2))


@dataclass(frozen=True)
class LogUniformPrior:
    lo: float
    hi: float

    def __post_init__(self):
        if not 0.0 < self.lo < self.hi:
            raise ValueError("need 0 < lo < hi")

    def logpdf(self, x: float) -> float:
        if self.lo < x < self.hi:
            return float(-np.log(x) - np.log(np.log(self.hi / self.lo)))
        return -np.inf


# ----------------------------------------------------------------------
# likelihoods
# ----------------------------------------------------------------------

def plugin_loglik(y, mean_at_data, noise: NoiseModel) -> float:
    """Gaussian data log-likelihood with a point estimate of the solution."""
    return mvn_logpdf(y, mean_at_data, noise.cov)


def pn_loglik(y, posterior: ForwardPosterior, data_locations, noise: NoiseModel) -> float:
    """Data log-likelihood with the forward posterior marginalized out.

    Identical to the plug-in likelihood except that the noise covariance
    is inflated by the solver's posterior covariance at the data
    locations, which widens inference when the design is coarse.
    """
    mean = posterior.mean(data_locations)
    cov = noise.cov + posterior.cov(data_locations)
    return mvn_logpdf(y, mean, cov)


# ----------------------------------------------------------------------
# grid posteriors
# ----------------------------------------------------------------------

def grid_posterior(theta_grid, prior, loglik) -> np.ndarray:
    """Normalized posterior density on a parameter grid.

    ``loglik`` maps a scalar parameter to its data log-likelihood. The
    density is normalized to unit trapezoid integral over the grid.
    """
    grid = np.asarray(theta_grid, dtype=float).reshape(-1)
    if grid.size < 50:
        raise ValueError("need at least 50 grid points")
    if np.any(np.diff(grid) <= 0.0):
        raise ValueError("grid must be sorted increasing")
    logpost = np.array([loglik(t) + prior.logpdf(t) for t in grid])
    finite = np.isfinite(logpost)
    if not np.any(finite):
        raise AllZeroMass("posterior mass vanished on the whole grid")
    shift = np.max(logpost[finite])
    dens = np.where(finite, np.exp(logpost - shift), 0.0)
    mass = np.trapezoid(dens, grid)
    if mass <= 0.0:
        raise AllZeroMass("posterior mass vanished on the whole grid")
    return dens / mass


def grid_mean_std(theta_grid, density):
    grid = np.asarray(theta_grid, dtype=float)
    dens = np.asarray(density, dtype=float)
    mean = np.trapezoid(grid * dens, grid)
    var = np.trapezoid((grid - mean) ** 2 * dens, grid)
    return float(mean), float(np.sqrt(max(var, 0.0)))


def grid_mode(theta_grid, density) -> float:
    grid = np.asarray(theta_grid, dtype=float)
    return float(grid[int(np.argmax(density))])


# ----------------------------------------------------------------------
# random-walk Metropolis
# ----------------------------------------------------------------------

def rw_metropolis(logtarget, init, step_scales, n_steps: int, rng: RngStream):
    """Gaussian-proposal Metropolis chain.

    Returns the chain states after each of ``n_steps`` updates, shape
    ``(n_steps, dim)``, together with the acceptance rate.
    """
    init = np.asarray(init, dtype=float).reshape(-1)
    scales = np.asarray(step_scales, dtype=float).reshape(-1)
    if scales.size == 1:
        scales = np.full(init.size, scales[0])
    if np.any(scales <= 0.0):
        raise ValueError("step_scales must be positive")
    current = init.copy()
    lp = float(logtarget(current))
    if not np.isfinite(lp):
        raise ValueError("logtarget must be finite at init")
    gen = rng.generator()
    chain = np.empty((n_steps, init.size))
    accepted = 0
    for t in range(n_steps):
        prop = current + scales * gen.standard_normal(init.size)
        lp_prop = float(logtarget(prop))
        if np.log(gen.uniform()) < lp_prop - lp:
            current, lp = prop, lp_prop
            accepted += 1
        chain[t] = current
    return chain, accepted / n_steps


# ----------------------------------------------------------------------
# coarse-solution cache for the nonlinear problem
# ----------------------------------------------------------------------

class CoarseSolutionCache:
    """Memoized multimodal coarse solves on a regular delta grid.

    Lookups snap to the nearest cell of the given resolution; a new cell
    is solved with continuation seeds from the nearest already-solved
    cell, which keeps thin-interface branches reachable near the lower
    end of the parameter range. Insertion is protected by a lock so
    concurrent chains can share one cache.
    """

    def __init__(self, grid_n: int = 31, resolution: float = 0.002,
                 seed: int = 0, damping: float = 1.0):
        self.grid_n = grid_n
        self.resolution = resolution
        self.damping = damping
        self._rng_seed = seed
        self._store: dict[int, list[GridSolution]] = {}
        self._lock = threading.Lock()

    def _cell(self, delta: float) -> int:
        return int(round(delta / self.resolution))

    def snapped(self, delta: float) -> float:
        lo, hi = DELTA_RANGE
        return float(np.clip(self._cell(delta) * self.resolution, lo, hi))

    def solutions(self, delta: float) -> list:
        cell = self._cell(delta)
        with self._lock:
            hit = self._store.get(cell)
        if hit is not None:
            return hit
        with self._lock:
            near = min(self._store, key=lambda c: abs(c - cell)) if self._store else None
        # walk toward distant cells one at a time so every solve is seeded by
        # its immediate neighbour; thin-interface branches at small delta are
        # not reachable from cold starts or across larger jumps
        if near is not None and abs(near - cell) > 3:
            step = 1 if cell > near else -1
            for mid in range(near + step, cell, step):
                self._solve_cell(mid)
        return self._solve_cell(cell)

    def _solve_cell(self, cell: int) -> list:
        with self._lock:
            hit = self._store.get(cell)
            if hit is not None:
                return hit
            near = min(self._store, key=lambda c: abs(c - cell)) if self._store else None
            seeds = [s.u.ravel() for s in self._store[near]] if near is not None else []
        sols = ac_deflated_solve(
            self.snapped(cell * self.resolution), self.grid_n,
            RngStream(self._rng_seed, cell), damping=self.damping, seeds=seeds,
        )
        with self._lock:
            return self._store.setdefault(cell, sols)


@dataclass(frozen=True)
class ACInverseSetup:
    """Context shared by every Allen-Cahn likelihood evaluation."""

    design: ACDesign
    data_locations: np.ndarray
    cache: CoarseSolutionCache


# ----------------------------------------------------------------------
# pseudo-marginal estimator
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class PMEstimate:
    """Unbiased (on the natural scale) log-likelihood estimate."""

    log_estimate: float
    m: int
    log_weights: np.ndarray

    @classmethod
    def from_log_weights(cls, log_weights) -> "PMEstimate":
        lw = np.asarray(log_weights, dtype=float).reshape(-1)
        if not np.any(np.isfinite(lw)):
            raise AllWeightsDegenerate("all importance weights underflowed")
        return cls(float(logsumexp(lw) - np.log(lw.size)), lw.size, lw)


@dataclass
class ChainState:
    """Pseudo-marginal chain state: parameters, solution index, and the
    retained likelihood estimate (never recomputed while retained)."""

    theta: np.ndarray
    j: int
    loglik_estimate: float
    aux_seed: int


def _draw_latents(zbar, cov, m: int, rng: RngStream, cov_scale: float = 1.0, xi=None):
    """Batch of Gaussian latent draws with their own log-densities.

    Reuses the covariance factor for draws and densities, so each density
    is exactly that of the jittered proposal the draw came from. A
    pre-drawn standard-normal batch ``xi`` may be supplied (the correlated
    pseudo-marginal chain keeps one in its state).
    """
    factor = chol_jitter(cov_scale * cov)
    dim = factor.n
    if xi is None:
        xi = rng.generator().standard_normal((m, dim))
    draws = zbar[None, :] + xi @ factor.lower.T
    logdet = 2.0 * np.sum(np.log(np.diag(factor.lower)))
    log_r = -0.5 * (dim * _LOG_2PI + logdet + np.sum(xi**2, axis=1))
    return draws, log_r


def importance_sample_z(delta: float, j: int, kernel: SqExpKernel, design: ACDesign,
                        rng: RngStream, *, cache: CoarseSolutionCache,
                        cov_scale: float = 1.0):
    """One latent-field proposal and its log-density.

    The proposal is Gaussian, centred at the latent field induced by the
    j-th coarse solution and with the prior kernel's Gram matrix as
    covariance (scaled by ``cov_scale``; a tiny scale collapses the
    proposal onto its centre, which the tests use).
    """
    sols = cache.solutions(delta)
    if not 1 <= j <= len(sols):
        raise SolutionIndexOutOfRange(f"j={j}, only {len(sols)} solutions found")
    zbar = z_from_u(sols[j - 1], delta, design.interior_points).z_values
    cov = op_gram(OperatorTag.identity(), OperatorTag.identity(), kernel,
                  design.interior_points, design.interior_points)
    draws, log_r = _draw_latents(zbar, cov, 1, rng, cov_scale)
    return LatentField(draws[0]), float(log_r[0])


def pm_loglik(y, delta: float, ell: float, j: int, m_particles: int,
              noise: NoiseModel, rng: RngStream, *, setup: ACInverseSetup,
              xi=None) -> PMEstimate:
    """Importance-sampled estimate of the intractable data likelihood.

    Each particle draws a latent field from the Gaussian proposal around
    the j-th coarse solution, solves the linearized forward problem it
    induces, and scores the data under the solver-marginalized Gaussian;
    weights divide out the proposal density (the latent prior is flat, so
    no prior factor appears). The estimate is the log of the weight
    average. All particles share one Gram factorization since the
    latent field only enters the right-hand side. ``xi`` optionally fixes
    the underlying standard-normal batch, which is how the correlated
    chain couples successive estimates.
    """
    if m_particles < 1:
        raise ValueError("need at least one particle")
    y = np.asarray(y, dtype=float).reshape(-1)
    sols = setup.cache.solutions(delta)
    if not 1 <= j <= len(sols):
        raise SolutionIndexOutOfRange(f"j={j}, only {len(sols)} solutions found")
    kernel = SqExpKernel(ell, dim=2)
    x_int = setup.design.interior_points
    zbar = z_from_u(sols[j - 1], delta, x_int).z_values
    k_prop = op_gram(OperatorTag.identity(), OperatorTag.identity(), kernel, x_int, x_int)
    z_draws, log_r = _draw_latents(zbar, k_prop, m_particles, rng, xi=xi)

    blocks = linearized_ac_blocks(delta, LatentField(z_draws[0]), setup.design)
    post = solve_forward(blocks, kernel)
    x_data = setup.data_locations
    cross = post.cross_cov(x_data)
    sigma = noise.cov + post.cov(x_data)
    factor = chol_jitter(sigma)
    logdet = 2.0 * np.sum(np.log(np.diag(factor.lower)))

    u_draws = np.cbrt(-delta * z_draws)
    rhs = np.vstack([
        z_draws.T,
        u_draws.T,
        np.tile(setup.design.boundary_rhs[:, None], (1, m_particles)),
    ])
    means = cross @ post.weights_for(rhs)
    resid = solve_triangular(factor.lower, y[:, None] - means, lower=True)
    logliks = -0.5 * (y.size * _LOG_2PI + logdet + np.sum(resid**2, axis=0))
    return PMEstimate.from_log_weights(logliks - log_r)


# ----------------------------------------------------------------------
# MCMC over (delta, lengthscale, solution index)
# ----------------------------------------------------------------------

@dataclass
class ChainResult:
    """Chain trace; serializes to CSV columns
    (step, delta, ell, j, log_estimate, accepted)."""

    delta: np.ndarray
    ell: np.ndarray
    j: np.ndarray
    log_estimate: np.ndarray
    accepted: np.ndarray
    acceptance_rate: float
    estimator_calls: int = 0

    FIELDS = ("step", "delta", "ell", "j", "log_estimate", "accepted")

    def rows(self):
        for t in range(len(self.delta)):
            yield (t, self.delta[t], self.ell[t], int(self.j[t]),
                   self.log_estimate[t], int(self.accepted[t]))


def _chain_arrays(n_steps):
    return (np.empty(n_steps), np.empty(n_steps), np.empty(n_steps, dtype=int),
            np.empty(n_steps), np.zeros(n_steps, dtype=bool))


def plugin_delta_scan(y, setup: ACInverseSetup, noise: NoiseModel, grid) -> float:
    """Cheap pilot: the grid value whose best coarse branch fits the data best.

    Used to initialize the chains away from the prior tails.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    best, best_ll = None, -np.inf
    for delta in np.asarray(grid, dtype=float):
        for sol in setup.cache.solutions(delta):
            ll = plugin_loglik(y, sol.interpolate(setup.data_locations), noise)
            if ll > best_ll:
                best, best_ll = float(delta), ll
    return best


def pm_mcmc(y, delta_prior: UniformPrior, ell_prior, m_particles: int, n_steps: int,
            rng: RngStream, *, setup: ACInverseSetup, noise: NoiseModel,
            step_scales=(0.003, 0.08), init=None, j_reproposal: float = 0.2,
            noise_correlation: float = 0.99, estimator=None) -> ChainResult:
    """Pseudo-marginal Metropolis over (delta, log lengthscale, j).

    The walk is Gaussian in (delta, log ell); with probability
    ``j_reproposal`` a step also redraws the solution index uniformly over
    the solutions found at the proposed delta, with the matching Hastings
    correction. Accepted states keep their likelihood estimate for as
    long as they are retained, which is what makes the chain target the
    exact posterior despite the noisy likelihood.

    The standard-normal batch behind the estimate is part of the chain
    state and is refreshed through a Crank-Nicolson move with correlation
    ``noise_correlation`` (the correlated pseudo-marginal scheme). With
    heavy-tailed importance weights the plain independent-noise chain
    freezes for thousands of steps whenever a lucky estimate is retained;
    coupling the noise cancels most of that variance in the acceptance
    ratio without changing the invariant distribution. Set the
    correlation to zero to recover the independent-noise sampler.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if not 0.0 <= noise_correlation < 1.0:
        raise ValueError("noise_correlation must lie in [0, 1)")
    gen = rng.generator()
    m_latent = len(setup.design.interior_points)
    calls = 0

    if estimator is None:
        def estimator(delta, ell, j, xi):
            return pm_loglik(y, delta, ell, j, m_particles, noise, rng,
                             setup=setup, xi=xi)

    def n_found(delta):
        return len(setup.cache.solutions(delta))

    def log_prior(delta, lam, j, n_sols):
        lp = delta_prior.logpdf(delta)
        ell = np.exp(lam)
        lp += ell_prior.logpdf(ell) + lam  # half-Cauchy density with log-scale Jacobian
        lp -= np.log(n_sols)
        return lp

    if init is None:
        init = (delta_prior.sample(rng.substream(rng.stream_id + 101)), 0.3, 1)
    delta, lam, j = float(init[0]), float(np.log(init[1])), int(init[2])
    n_cur = n_found(delta)
    if not 1 <= j <= n_cur:
        raise SolutionIndexOutOfRange(f"initial j={j}, {n_cur} solutions found")
    xi = gen.standard_normal((m_particles, m_latent))
    est = estimator(delta, np.exp(lam), j, xi)
    calls += 1
    state = ChainState(np.array([delta, np.exp(lam)]), j, est.log_estimate, rng.stream_id)
    lp_cur = log_prior(delta, lam, j, n_cur)

    sd, sl = step_scales
    rho = noise_correlation
    d_arr, e_arr, j_arr, l_arr, a_arr = _chain_arrays(n_steps)
    accepted = 0
    for t in range(n_steps):
        d_prop = state.theta[0] + sd * gen.standard_normal()
        lam_prop = np.log(state.theta[1]) + sl * gen.standard_normal()
        redraw = gen.uniform() < j_reproposal
        if delta_prior.lo < d_prop < delta_prior.hi:
            n_prop = n_found(d_prop)
            j_prop = int(gen.integers(1, n_prop + 1)) if redraw else state.j
            if j_prop <= n_prop:
                eps = gen.standard_normal((m_particles, m_latent))
                xi_prop = rho * xi + np.sqrt(1.0 - rho**2) * eps
                est_prop = estimator(d_prop, float(np.exp(lam_prop)), j_prop, xi_prop)
                calls += 1
                lp_prop = log_prior(d_prop, lam_prop, j_prop, n_prop)
                # Hastings correction for the index mixture proposal
                q_fwd = (1.0 - j_reproposal) * (j_prop == state.j) + j_reproposal / n_prop
                q_rev = (1.0 - j_reproposal) * (j_prop == state.j) + j_reproposal / n_found(state.theta[0])
                log_alpha = (est_prop.log_estimate + lp_prop
                             - state.loglik_estimate - lp_cur
                             + np.log(q_rev) - np.log(q_fwd))
                if np.log(gen.uniform()) < log_alpha:
                    state = ChainState(np.array([d_prop, float(np.exp(lam_prop))]),
                                       j_prop, est_prop.log_estimate, rng.stream_id)
                    lp_cur = lp_prop
                    xi = xi_prop
                    accepted += 1
                    a_arr[t] = True
        d_arr[t], e_arr[t] = state.theta
        j_arr[t] = state.j
        l_arr[t] = state.loglik_estimate
    return ChainResult(d_arr, e_arr, j_arr, l_arr, a_arr, accepted / n_steps, calls)


def ac_plugin_mcmc(y, delta_prior: UniformPrior, n_steps: int, rng: RngStream, *,
                   setup: ACInverseSetup, noise: NoiseModel, step_scale: float = 0.008,
                   init=None, j_reproposal: float = 0.2) -> ChainResult:
    """Baseline Metropolis over (delta, j) with the coarse solver plugged in.

    The likelihood evaluates the coarse solution itself at the data
    locations with no discretisation-error term, so the resulting
    posterior reflects only the observation noise.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    gen = rng.generator()

    def loglik(delta, j):
        sols = setup.cache.solutions(delta)
        if j > len(sols):
            return -np.inf, len(sols)
        mean = sols[j - 1].interpolate(setup.data_locations)
        return mvn_logpdf(y, mean, noise.cov), len(sols)

    if init is None:
        init = (delta_prior.sample(rng.substream(rng.stream_id + 103)), 1)
    delta, j = float(init[0]), int(init[1])
    ll_cur, n_cur = loglik(delta, j)
    lp_cur = ll_cur + delta_prior.logpdf(delta) - np.log(n_cur)

    d_arr, e_arr, j_arr, l_arr, a_arr = _chain_arrays(n_steps)
    accepted = 0
    for t in range(n_steps):
        d_prop = delta + step_scale * gen.standard_normal()
        redraw = gen.uniform() < j_reproposal
        if not delta_prior.lo < d_prop < delta_prior.hi:
            gen.uniform()
        else:
            n_prop = len(setup.cache.solutions(d_prop))
            j_prop = int(gen.integers(1, n_prop + 1)) if redraw else j
            ll_prop, _ = loglik(d_prop, j_prop)
            lp_prop = ll_prop + delta_prior.logpdf(d_prop) - np.log(n_prop)
            q_fwd = (1.0 - j_reproposal) * (j_prop == j) + j_reproposal / n_prop
            q_rev = (1.0 - j_reproposal) * (j_prop == j) + j_reproposal / n_cur
            if np.log(gen.uniform()) < lp_prop - lp_cur + np.log(q_rev) - np.log(q_fwd):
                delta, j, lp_cur, n_cur = d_prop, j_prop, lp_prop, n_prop
                accepted += 1
                a_arr[t] = True
        d_arr[t], e_arr[t], j_arr[t], l_arr[t] = delta, np.nan, j, lp_cur
    return ChainResult(d_arr, e_arr, j_arr, l_arr, a_arr, accepted / n_steps)
