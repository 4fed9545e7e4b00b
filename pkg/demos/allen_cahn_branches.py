"""The nonlinear showcase: a phase-field problem with three solutions.

The steady phase equation -delta lap(u) + (u^3 - u)/delta = 0 with +1 and
-1 edge data has three solutions. Deflated Newton finds them all;
introducing a latent field splits the cubic into a pair of equations that
are linear in u, which is what lets the Gaussian solver and the
pseudo-marginal chain attack the inverse problem for delta.

Run:  python3 demos/allen_cahn_branches.py    (takes a minute or two)
"""

import numpy as np

from pmm import (
    HalfCauchyPrior,
    NoiseModel,
    RngStream,
    UniformPrior,
    ac_deflated_solve,
    ac_design,
    ac_plugin_mcmc,
    pm_mcmc,
)
from pmm.forward import interior_grid_2d
from pmm.inverse import ACInverseSetup, CoarseSolutionCache, plugin_delta_scan

delta0 = 0.04
print(f"solving the phase problem at delta = {delta0} ...")
solutions = ac_deflated_solve(delta0, 31, RngStream(0))
for s in solutions:
    print(f"  branch {s.solution_index}: u(center) = {s.center_value():+.3f}, "
          f"residual {s.residual_norm:.1e}")

# synthetic observations from branch 1, then two chains for delta
sigma = 0.02
data_locations = interior_grid_2d(4)
y = solutions[0].interpolate(data_locations) \
    + sigma * RngStream(0, 32).generator().standard_normal(len(data_locations))
cache = CoarseSolutionCache(31, seed=0)
setup = ACInverseSetup(design=ac_design(5, 5), data_locations=data_locations, cache=cache)
noise = NoiseModel.isotropic(sigma, len(y))
prior = UniformPrior(0.02, 0.15)
init = plugin_delta_scan(y, setup, noise, np.arange(0.025, 0.146, 0.01))

print("\nrunning the solver-aware pseudo-marginal chain (2000 steps) ...")
chain = pm_mcmc(y, prior, HalfCauchyPrior(1.0), 32, 2000, RngStream(0, 33),
                setup=setup, noise=noise, init=(init, 0.1, 1))
print("running the plug-in baseline chain ...")
plug = ac_plugin_mcmc(y, prior, 2000, RngStream(0, 34), setup=setup, noise=noise,
                      init=(init, 1), step_scale=0.003)

burn = 400
d, dp = chain.delta[burn:], plug.delta[burn:]
lo, hi = np.quantile(d, [0.05, 0.95])
lop, hip = np.quantile(dp, [0.05, 0.95])
print(f"\nsolver-aware : delta 90% interval ({lo:.4f}, {hi:.4f}), "
      f"width {hi - lo:.4f}, acceptance {chain.acceptance_rate:.2f}")
print(f"plug-in      : delta 90% interval ({lop:.4f}, {hip:.4f}), "
      f"width {hip - lop:.4f}, acceptance {plug.acceptance_rate:.2f}")
print(f"truth delta0 = {delta0}: the aware interval is wider because the"
      "\nforward design (5x5 points) is genuinely coarse")
