"""Concrete PDE problems: a 1D Poisson family with a closed-form solution
and the steady-state Allen-Cahn system with its coarse multimodal solver.

The Allen-Cahn interior equation ``-delta lap(u) + (u^3 - u)/delta = 0``
splits, through a latent field ``z``, into a pair of equations that are
linear in ``u`` once ``z`` is fixed:

    delta * (-lap u) - u / delta = z        (interior operator equation)
    u = cbrt(-delta z)                      (pointwise identity data)

which is what lets the Gaussian forward solver handle a cubic problem.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu

from .forward import (
    ObservationBlock,
    boundary_points_1d,
    edge_points_2d,
    interior_grid_1d,
    interior_grid_2d,
    nested_points_1d,
)
from .kernels import OperatorTag
from .linalg import RngStream

__all__ = [
    "SolveFailed",
    "poisson_exact",
    "Poisson1D",
    "generate_data",
    "AllenCahnSpec",
    "GridSolution",
    "LatentField",
    "ACDesign",
    "ac_design",
    "ac_boundary_values",
    "ac_residual",
    "ac_deflated_solve",
    "z_from_u",
    "u_from_z",
    "linearized_ac_blocks",
]

DELTA_RANGE = (0.02, 0.15)

# boundary values on the unit square: +1 where x1 hits an edge, -1 where x2 does
_AC_BOUNDARY = (1.0, 1.0, -1.0, -1.0)  # (x1=0, x1=1, x2=0, x2=1)


class SolveFailed(Exception):
    """The nonlinear solver found no converged solution."""


# ----------------------------------------------------------------------
# 1D Poisson with sinusoidal forcing
# ----------------------------------------------------------------------

def poisson_exact(theta: float, x) -> np.ndarray:
    """Solution of ``-theta u'' = sin(2 pi x)`` with u(0) = u(1) = 0.

    Integrating twice and fitting the boundary values gives
    ``u(x) = sin(2 pi x) / (4 pi^2 theta)``; the tests cross-check this
    against an independent finite-difference solve.
    """
    if not theta > 0.0:
        raise ValueError("theta must be positive")
    x = np.asarray(x, dtype=float)
    return np.sin(2.0 * np.pi * x) / (4.0 * np.pi**2 * theta)


@dataclass(frozen=True)
class Poisson1D:
    """``-d/dx (theta du/dx) = sin(2 pi x)`` on (0, 1), zero boundary data."""

    theta: float = 1.0

    def __post_init__(self):
        if not self.theta > 0.0:
            raise ValueError("theta must be positive")

    def operator(self) -> OperatorTag:
        return OperatorTag.affine_interior(self.theta, 0.0)

    def forcing(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.sin(2.0 * np.pi * x)

    def exact(self, x) -> np.ndarray:
        return poisson_exact(self.theta, np.asarray(x, dtype=float).reshape(-1))

    def blocks(self, m: int, design: str = "uniform") -> list:
        """Interior forcing observations plus the two boundary values."""
        if design == "uniform":
            xi = interior_grid_1d(m)
        elif design == "nested":
            xi = nested_points_1d(m)
        else:
            raise ValueError(f"unknown design mode {design!r}")
        xb = boundary_points_1d()
        return [
            ObservationBlock(self.operator(), xi, self.forcing(xi[:, 0])),
            ObservationBlock(OperatorTag.boundary_trace(), xb, np.zeros(len(xb))),
        ]


def generate_data(theta0: float, locations, sigma: float, rng: RngStream) -> np.ndarray:
    """Noisy solution observations ``u(x_i) + N(0, sigma^2)``."""
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    locations = np.asarray(locations, dtype=float).reshape(-1)
    noise = sigma * rng.generator().standard_normal(locations.size)
    return poisson_exact(theta0, locations) + noise


# ----------------------------------------------------------------------
# steady-state Allen-Cahn on the unit square
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class AllenCahnSpec:
    """Interface parameter and the fixed boundary data of the phase problem.

    ``delta`` is restricted to the interval on which the discrete system
    reliably has three solutions.
    """

    delta: float

    def __post_init__(self):
        lo, hi = DELTA_RANGE
        if not lo < self.delta < hi:
            raise ValueError(f"delta must lie in ({lo}, {hi})")


@dataclass(frozen=True)
class GridSolution:
    """A converged discrete solution on the N-by-N interior lattice.

    ``u`` is indexed ``[j, i]`` for the node at ``((i+1) h, (j+1) h)``
    with ``h = 1/(N+1)``.
    """

    n: int
    u: np.ndarray
    solution_index: int
    residual_norm: float
    delta: float

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(self.n, self.n)
        if np.max(np.abs(u)) > 1.5:
            raise ValueError("solution values outside the physical range [-1.5, 1.5]")
        object.__setattr__(self, "u", u)

    @property
    def coords(self) -> np.ndarray:
        return np.arange(1, self.n + 1) / (self.n + 1)

    def center_value(self) -> float:
        mid = self.n // 2
        return float(self.u[mid, mid])

    def interpolate(self, points) -> np.ndarray:
        """Bilinear interpolation at points inside the unit square.

        The interior lattice is padded with the Dirichlet boundary ring;
        the four corners get the average of the conflicting edge values.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        n = self.n
        full = np.zeros((n + 2, n + 2))
        full[1:-1, 1:-1] = self.u
        left, right, bottom, top = _AC_BOUNDARY
        full[1:-1, 0] = left
        full[1:-1, -1] = right
        full[0, 1:-1] = bottom
        full[-1, 1:-1] = top
        full[0, 0] = full[0, -1] = full[-1, 0] = full[-1, -1] = 0.5 * (left + bottom)
        coords = np.concatenate([[0.0], self.coords, [1.0]])
        interp = RegularGridInterpolator((coords, coords), full.T)
        return interp(points)


@dataclass(frozen=True)
class LatentField:
    """Latent values at the interior design points."""

    z_values: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z_values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(z)):
            raise ValueError("latent field has non-finite entries")
        object.__setattr__(self, "z_values", z)

    def __len__(self) -> int:
        return len(self.z_values)


@lru_cache(maxsize=8)
def _ac_operators(n: int):
    """5-point Laplacian on the interior lattice and the boundary source term."""
    h = 1.0 / (n + 1)
    main = -4.0 * np.ones(n * n)
    ex = np.ones(n * n - 1)
    ex[np.arange(1, n * n) % n == 0] = 0.0
    ey = np.ones(n * n - n)
    lap = sp.diags([main, ex, ex, ey, ey], [0, 1, -1, n, -n], format="csr") / h**2
    return lap, h


def _boundary_source(n: int, h: float, boundary=_AC_BOUNDARY) -> np.ndarray:
    left, right, bottom, top = boundary
    b = np.zeros((n, n))
    b[:, 0] += left
    b[:, -1] += right
    b[0, :] += bottom
    b[-1, :] += top
    return b.ravel() / h**2


def ac_residual(u, delta: float, boundary=None) -> np.ndarray:
    """Five-point-stencil residual of the Allen-Cahn interior equation.

    ``u`` holds interior node values, flat or (N, N); the Dirichlet data
    enters the stencil at near-boundary nodes. ``boundary`` overrides the
    default edge values as a tuple (x1=0, x1=1, x2=0, x2=1).
    """
    u = np.asarray(u, dtype=float)
    shape = u.shape
    flat = u.reshape(-1)
    n = int(round(np.sqrt(flat.size)))
    if n * n != flat.size:
        raise ValueError("u must hold an N-by-N interior lattice")
    lap, h = _ac_operators(n)
    bsrc = _boundary_source(n, h, boundary or _AC_BOUNDARY)
    res = -delta * (lap @ flat + bsrc) + (flat**3 - flat) / delta
    return res.reshape(shape)


def _deflation(u, roots, power=2.0, shift=1.0):
    """Deflation multiplier ``prod(1/|u - r|^2 + 1)`` and its gradient."""
    m = 1.0
    for r in roots:
        m *= float(np.dot(u - r, u - r)) ** (-power / 2.0) + shift
    grad = np.zeros_like(u)
    for r in roots:
        d2 = float(np.dot(u - r, u - r))
        mf = d2 ** (-power / 2.0) + shift
        grad += (m / mf) * (-power * (u - r) * d2 ** (-power / 2.0 - 1.0))
    return m, grad


def _newton_ac(delta, n, u0, roots, damping, tol, maxiter=200):
    lap, h = _ac_operators(n)
    bsrc = _boundary_source(n, h)
    u = u0.copy()
    for _ in range(maxiter):
        res = -delta * (lap @ u + bsrc) + (u**3 - u) / delta
        rnorm = float(np.max(np.abs(res)))
        if rnorm < tol:
            return u, True
        jac = -delta * lap + sp.diags((3.0 * u**2 - 1.0) / delta)
        try:
            step = splu(jac.tocsc()).solve(-res)
        except RuntimeError:
            return u, False
        if roots:
            m, grad = _deflation(u, roots)
            denom = 1.0 - float(grad @ step) / m
            if abs(denom) < 1e-12:
                return u, False
            step = step / denom
        # backtrack on the sup-norm residual; full steps near convergence
        alpha = damping
        for _ in range(12):
            cand = u + alpha * step
            if np.all(np.isfinite(cand)):
                rnew = -delta * (lap @ cand + bsrc) + (cand**3 - cand) / delta
                if float(np.max(np.abs(rnew))) < rnorm or rnorm < 1e-6:
                    break
            alpha *= 0.5
        u = u + alpha * step
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > 10.0:
            return u, False
    return u, False


def _initial_guesses(n: int, delta: float) -> list:
    h = 1.0 / (n + 1)
    x = np.arange(1, n + 1) * h
    x1, x2 = np.meshgrid(x, x, indexing="xy")
    w = max(np.sqrt(2.0) * delta, 1.5 * h)
    d1 = np.minimum(x1, 1.0 - x1)
    d2 = np.minimum(x2, 1.0 - x2)
    saddle = np.tanh((d2 - d1) / w).ravel()
    plus = (-1.0 + 2.0 * np.tanh(d2 / w)).ravel()
    minus = (1.0 - 2.0 * np.tanh(d1 / w)).ravel()
    return [saddle, plus, minus, np.zeros(n * n)]


def ac_deflated_solve(
    delta: float,
    n: int,
    rng: RngStream,
    damping: float = 1.0,
    newton_tol: float = 1e-11,
    seeds=(),
) -> list:
    """All distinct solutions of the discrete Allen-Cahn system.

    Damped Newton runs from a saddle-shaped guess, two one-phase profiles
    and zero; each later run minimizes the residual deflated by the
    solutions already found, which blocks reconvergence to a known root.
    ``seeds`` supplies extra initial guesses (used for continuation from
    solutions at a nearby ``delta``). Solutions are deduplicated at
    sup-norm distance 0.1, sorted by their value at the domain centre
    (ties by L2 norm), and indexed 1..n_found.

    Returns fewer than three solutions if some branch does not converge;
    raises :class:`SolveFailed` only when nothing converges at all.
    """
    lo, hi = DELTA_RANGE
    if not lo <= delta <= hi:
        raise ValueError(f"delta must lie in [{lo}, {hi}]")
    if n < 16:
        raise ValueError("grid size must be at least 16")
    found: list[np.ndarray] = []
    gen = rng.generator()
    for attempt in range(3):
        cand = [np.asarray(s, dtype=float).reshape(-1) for s in seeds]
        cand += _initial_guesses(n, delta)
        if attempt > 0:
            cand = [g + 0.05 * attempt * gen.standard_normal(n * n) for g in cand]
        for guess in cand:
            if len(found) >= 3:
                break
            u, ok = _newton_ac(delta, n, guess, found, damping, newton_tol)
            if ok and np.max(np.abs(u)) <= 1.5 and all(
                np.max(np.abs(u - s)) > 0.1 for s in found
            ):
                found.append(u)
        if len(found) >= 3:
            break
    if not found:
        raise SolveFailed(f"no Allen-Cahn solution converged at delta={delta}")

    def center_key(u):
        mid = n // 2
        return (u.reshape(n, n)[mid, mid], float(np.linalg.norm(u)))

    found.sort(key=center_key)
    sols = []
    for idx, u in enumerate(found, start=1):
        rnorm = float(np.max(np.abs(ac_residual(u, delta))))
        sols.append(GridSolution(
            n=n, u=u.reshape(n, n), solution_index=idx,
            residual_norm=rnorm, delta=delta,
        ))
    return sols


# ----------------------------------------------------------------------
# latent-field linearization
# ----------------------------------------------------------------------

def z_from_u(u, delta: float, points=None) -> LatentField:
    """Latent values ``z = -u^3 / delta``.

    Pass a :class:`GridSolution` together with the interior design points
    to evaluate the solution there by bilinear interpolation first;
    plain arrays are mapped elementwise.
    """
    if not delta > 0.0:
        raise ValueError("delta must be positive")
    if isinstance(u, GridSolution):
        if points is None:
            raise ValueError("interpolating a grid solution needs target points")
        vals = u.interpolate(points)
    else:
        vals = np.asarray(u, dtype=float).reshape(-1)
    return LatentField(-vals**3 / delta)


def u_from_z(z, delta: float) -> np.ndarray:
    """Invert the latent map: the signed cube root of ``-delta z``."""
    zv = z.z_values if isinstance(z, LatentField) else np.asarray(z, dtype=float)
    return np.cbrt(-delta * zv)


@dataclass(frozen=True)
class ACDesign:
    """Design points for the linearized Allen-Cahn forward solve."""

    interior_points: np.ndarray
    boundary_points: np.ndarray
    boundary_rhs: np.ndarray


def ac_boundary_values(points) -> np.ndarray:
    """Dirichlet data: +1 on the x1 edges, -1 on the x2 edges."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    on_x1 = (np.abs(points[:, 0]) <= 1e-12) | (np.abs(points[:, 0] - 1.0) <= 1e-12)
    on_x2 = (np.abs(points[:, 1]) <= 1e-12) | (np.abs(points[:, 1] - 1.0) <= 1e-12)
    if not np.all(on_x1 | on_x2):
        raise ValueError("some points are not on the boundary")
    return np.where(on_x1, 1.0, -1.0)


def ac_design(interior_per_axis: int = 5, per_edge: int = 5) -> ACDesign:
    interior = interior_grid_2d(interior_per_axis)
    boundary = edge_points_2d(per_edge)
    return ACDesign(interior, boundary, ac_boundary_values(boundary))


def linearized_ac_blocks(delta: float, z, design: ACDesign) -> list:
    """Observation blocks of the latent-linearized system.

    Given ``z`` at the interior design points, the solver sees the
    interior operator equation with right-hand side ``z``, identity data
    ``u = cbrt(-delta z)`` at the same points, and the fixed boundary
    values.
    """
    zv = z.z_values if isinstance(z, LatentField) else np.asarray(z, dtype=float).reshape(-1)
    if len(zv) != len(design.interior_points):
        raise ValueError("latent field length does not match the interior design")
    op = OperatorTag.affine_interior(delta, -1.0 / delta)
    return [
        ObservationBlock(op, design.interior_points, zv),
        ObservationBlock(OperatorTag.identity(), design.interior_points, u_from_z(zv, delta)),
        ObservationBlock(OperatorTag.boundary_trace(), design.boundary_points, design.boundary_rhs),
    ]
