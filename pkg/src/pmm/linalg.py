"""Dense symmetric-positive-definite linear algebra.

Wraps Cholesky factorization with an adaptive diagonal-jitter schedule,
triangular solves, multivariate normal log-density and sampling, and a
seedable counter-based RNG wrapper used by every stochastic operation in
this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

__all__ = [
    "NotPositiveDefinite",
    "RngStream",
    "CholFactor",
    "chol_jitter",
    "psd_solve",
    "mvn_logpdf",
    "mvn_sample",
]

_LOG_2PI = np.log(2.0 * np.pi)
_MASK64 = (1 << 64) - 1


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized even at the maximum jitter."""


@dataclass
class RngStream:
    """Seedable random stream with independent substreams.

    Backed by the counter-based Philox bit generator keyed on
    ``(seed, stream_id)``: identical pairs reproduce identical draw
    sequences regardless of platform or thread count, provided draws are
    consumed in the same order within one stream.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator | None = field(
        default=None, repr=False, compare=False
    )

    def generator(self) -> np.random.Generator:
        """Return the generator for this stream, creating it on first use."""
        if self._gen is None:
            key = np.array(
                [self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64
            )
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def substream(self, stream_id: int) -> "RngStream":
        """A fresh stream with the same seed and a different stream id."""
        return RngStream(self.seed, stream_id)


@dataclass(frozen=True)
class CholFactor:
    """Lower Cholesky factor of ``m + jitter_used * I``."""

    lower: np.ndarray
    jitter_used: float
    n: int


def _as_sym_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    return m


def chol_jitter(m, jitter_min: float | None = None, jitter_max: float | None = None) -> CholFactor:
    """Cholesky factorization with a geometric jitter schedule.

    Attempts ``L L^T = m`` directly, then retries with ``m + j I`` for
    ``j = jitter_min, 10 jitter_min, ...`` up to ``jitter_max``. The
    defaults are scale-free: ``jitter_min = 1e-10 * mean(diag(m))`` and
    ``jitter_max = 1e-2 * mean(diag(m))`` (with unit scale substituted
    when the diagonal mean is not positive).

    Parameters
    ----------
    m : ndarray, shape (n, n)
        Symmetric matrix to factor.
    jitter_min, jitter_max : float, optional
        Explicit schedule bounds; both must be positive when given.

    Returns
    -------
    CholFactor
        Factor together with the jitter value that succeeded.

    Raises
    ------
    NotPositiveDefinite
        If factorization fails for every jitter in the schedule.
    """
    m = _as_sym_matrix(m)
    scale = float(np.mean(np.diag(m)))
    if scale <= 0.0 or not np.isfinite(scale):
        scale = 1.0
    if jitter_min is None:
        jitter_min = 1e-10 * scale
    if jitter_max is None:
        jitter_max = 1e-2 * scale
    if jitter_min <= 0.0:
        raise ValueError("jitter_min must be positive")

    n = m.shape[0]
    jitter = 0.0
    while True:
        try:
            lower = np.linalg.cholesky(m + jitter * np.eye(n) if jitter else m)
            return CholFactor(lower=lower, jitter_used=jitter, n=n)
        except np.linalg.LinAlgError:
            jitter = jitter_min if jitter == 0.0 else 10.0 * jitter
            if jitter > jitter_max * (1.0 + 1e-12):
                raise NotPositiveDefinite(
                    f"Cholesky failed up to jitter {jitter_max:.3e} "
                    f"(matrix size {n}, diagonal mean {scale:.3e})"
                ) from None


def psd_solve(f: CholFactor, b) -> np.ndarray:
    """Solve ``(m + jitter_used * I) x = b`` given the factor of ``m``.

    ``b`` may be a vector or a matrix of stacked right-hand sides.
    """
    b = np.asarray(b, dtype=float)
    return cho_solve((f.lower, True), b)


def mvn_logpdf(y, mu, cov) -> float:
    """Log-density of a multivariate normal, ``log N(y; mu, cov)``.

    The covariance is factored through :func:`chol_jitter`, so nearly
    singular covariances are evaluated at their jittered regularization.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    if y.shape != mu.shape:
        raise ValueError("y and mu must have the same length")
    f = chol_jitter(cov)
    if f.n != y.size:
        raise ValueError("covariance dimension does not match y")
    alpha = solve_triangular(f.lower, y - mu, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(f.lower)))
    return float(-0.5 * (y.size * _LOG_2PI + logdet + alpha @ alpha))


def mvn_sample(mu, cov, n: int, rng: RngStream) -> np.ndarray:
    """Draw ``n`` samples from ``N(mu, cov)``, shape ``(n, dim)``.

    Samples are ``mu + L xi`` for standard normal ``xi`` and the jittered
    Cholesky factor ``L``; draws are a pure function of ``(mu, cov, rng)``.
    """
    mu = np.asarray(mu, dtype=float).reshape(-1)
    f = chol_jitter(cov)
    if f.n != mu.size:
        raise ValueError("covariance dimension does not match mu")
    xi = rng.generator().standard_normal((n, mu.size))
    return mu[None, :] + xi @ f.lower.T
