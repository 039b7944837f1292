"""Gaussian identities used throughout the identification hierarchy.

A `Gaussian` is an immutable pair of mean vector and symmetric positive
semi-definite covariance.  The product of two Gaussian densities over the same
variables factorizes into an *evidence* term (a Gaussian density of one mean
around the other with the summed covariance) times a *posterior* Gaussian; see
`product_factorize()`.  `convolve_evidence()` evaluates that evidence term
directly.

Covariances of the hyper model are often built from standard deviations and
correlation coefficients (`CorrelationSpec`), whose Cholesky factor has a
closed form (`cholesky_from_correlation()`).

All densities are available in log space; linear-space values are thin
wrappers around the log versions.
"""

import collections
import dataclasses
import logging

import numpy
import scipy.linalg


logger = logging.getLogger(__name__)

LOG_2PI = numpy.log(2 * numpy.pi)

psd_rtol = 1e-10
"""Relative eigenvalue tolerance (times ``trace/d``) of PSD checks."""


class DegenerateEvidenceError(numpy.linalg.LinAlgError):
    """A summed covariance required to be invertible is singular."""
    pass


class NotPositiveDefiniteError(numpy.linalg.LinAlgError):
    """A matrix required to be positive (semi-)definite is not."""
    pass


def symmetrize(a):
    """Return ``(a + a.T) / 2`` as a new float array."""
    a = numpy.asarray(a, dtype=float)
    return (a + a.T) / 2


def is_psd(cov, rtol=psd_rtol):
    """Is the symmetric matrix `cov` positive semi-definite (within `rtol`)?"""
    cov = numpy.asarray(cov, dtype=float)
    d = cov.shape[0]
    if d == 0:
        return True
    trace = max(numpy.trace(cov), 0.0)
    return numpy.linalg.eigvalsh(cov).min() >= -rtol * trace / d


def cho_factor(a, what="matrix"):
    """Cholesky-factor the symmetric positive definite matrix `a`.

    Raise `DegenerateEvidenceError` naming `what` if it is not positive
    definite.
    """
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except numpy.linalg.LinAlgError as exc:
        raise DegenerateEvidenceError(f"singular {what}") from exc


def cho_logdet(factor):
    """Log-determinant from a `cho_factor()` result."""
    return 2 * numpy.log(numpy.diag(factor[0])).sum()


@dataclasses.dataclass(frozen=True, eq=False)
class Gaussian:
    """Multivariate normal distribution N(mean, cov)."""

    mean: numpy.ndarray
    cov: numpy.ndarray

    def __post_init__(self):
        mean = numpy.atleast_1d(numpy.asarray(self.mean, dtype=float)).copy()
        cov = numpy.atleast_2d(numpy.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"mean of shape {mean.shape} and covariance of shape "
                f"{cov.shape} do not describe a Gaussian")
        if not numpy.all(numpy.isfinite(cov)) \
                or not numpy.all(numpy.isfinite(mean)):
            raise ValueError("non-finite Gaussian parameters")
        cov = symmetrize(cov)
        if not is_psd(cov):
            raise NotPositiveDefiniteError(
                "covariance is not positive semi-definite")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'cov', cov)

    @property
    def dim(self):
        return self.mean.size

    @property
    def std(self):
        """Marginal standard deviations."""
        return numpy.sqrt(numpy.clip(numpy.diag(self.cov), 0, None))

    def logpdf(self, x):
        """Log-density at `x` (a point or an array of points, last axis)."""
        factor = cho_factor(self.cov, "Gaussian covariance")
        x = numpy.asarray(x, dtype=float)
        r = x - self.mean
        flat = r.reshape(-1, self.dim)
        z = scipy.linalg.solve_triangular(
            factor[0], flat.T, lower=True, check_finite=False)
        quad = (z * z).sum(axis=0)
        out = -0.5 * (self.dim * LOG_2PI + cho_logdet(factor) + quad)
        return out.reshape(r.shape[:-1]) if r.ndim > 1 else out[0]

    def pdf(self, x):
        return numpy.exp(self.logpdf(x))


Factorization = collections.namedtuple(
    'Factorization', ['evidence', 'posterior'])
Factorization.__doc__ = """\
Result of `product_factorize()`.

`evidence` is the Gaussian N(mu0, cov0 + cov) whose density at the second
mean gives the evidence value; `posterior` is the normalized product.
"""


def gain_matrix(cov0, cov):
    """Return the gain ``cov0 (cov0 + cov)^-1`` (via a Cholesky solve)."""
    cov0 = numpy.asarray(cov0, dtype=float)
    factor = cho_factor(symmetrize(cov0 + cov), "summed covariance")
    # cov0 and the sum are symmetric, so K^T = (cov0 + cov)^-1 cov0.
    return scipy.linalg.cho_solve(factor, cov0, check_finite=False).T


def product_factorize(g0, g):
    """Factorize the product of the densities of `g0` and `g`.

    ``g0(x) g(x) = N(g.mean | g0.mean, g0.cov + g.cov) * posterior(x)`` where
    the posterior has covariance ``cov0 - K cov0`` and mean
    ``mu0 + K (mu - mu0)`` with gain ``K = cov0 (cov0 + cov)^-1``.
    """
    if g0.dim != g.dim:
        raise ValueError(f"dimension mismatch: {g0.dim} != {g.dim}")
    gain = gain_matrix(g0.cov, g.cov)
    mean = g0.mean + gain @ (g.mean - g0.mean)
    # Equal to cov0 - K cov0, but stays PSD when g.cov vanishes.
    cov = symmetrize(gain @ g.cov)
    return Factorization(Gaussian(g0.mean, g0.cov + g.cov),
                         Gaussian(mean, cov))


def log_convolve_evidence(lambda_hat, sigma_hat, sigma_hyper, mu_hyper):
    """Log of ``N(mu_hyper | lambda_hat, sigma_hyper + sigma_hat)``.

    This is the integral over ``x`` of ``N(x | lambda_hat, sigma_hat)
    N(x | mu_hyper, sigma_hyper)``.
    """
    lambda_hat = numpy.atleast_1d(numpy.asarray(lambda_hat, dtype=float))
    d = lambda_hat.size
    total = symmetrize(numpy.atleast_2d(sigma_hat)
                       + numpy.atleast_2d(sigma_hyper))
    if total.shape != (d, d):
        raise ValueError("non-conformable evidence dimensions")
    factor = cho_factor(total, "summed covariance")
    r = numpy.atleast_1d(numpy.asarray(mu_hyper, dtype=float)) - lambda_hat
    quad = r @ scipy.linalg.cho_solve(factor, r, check_finite=False)
    return -0.5 * (d * LOG_2PI + cho_logdet(factor) + quad)


def convolve_evidence(lambda_hat, sigma_hat, sigma_hyper, mu_hyper):
    """Density value of `log_convolve_evidence()`."""
    return numpy.exp(log_convolve_evidence(
        lambda_hat, sigma_hat, sigma_hyper, mu_hyper))


@dataclasses.dataclass(frozen=True, eq=False)
class CorrelationSpec:
    """Covariance given by standard deviations and correlation coefficients.

    `rhos` holds the strictly lower triangle of the correlation matrix in
    row-major order (``numpy.tril_indices(d, -1)``).
    """

    sigmas: numpy.ndarray
    rhos: numpy.ndarray

    def __post_init__(self):
        sigmas = numpy.atleast_1d(numpy.asarray(self.sigmas, dtype=float))
        d = sigmas.size
        rhos = numpy.asarray(self.rhos, dtype=float).reshape(-1)
        if rhos.size != d * (d - 1) // 2:
            raise ValueError(
                f"{d} standard deviations need {d * (d - 1) // 2} "
                f"correlations, got {rhos.size}")
        if numpy.any(sigmas < 0) or not numpy.all(numpy.isfinite(sigmas)):
            raise ValueError("standard deviations must be finite and >= 0")
        if numpy.any(numpy.abs(rhos) >= 1):
            raise ValueError("correlations must lie in (-1, 1)")
        object.__setattr__(self, 'sigmas', sigmas)
        object.__setattr__(self, 'rhos', rhos)

    @property
    def dim(self):
        return self.sigmas.size

    def correlation_matrix(self):
        d = self.dim
        r = numpy.eye(d)
        rows, cols = numpy.tril_indices(d, -1)
        r[rows, cols] = self.rhos
        r[cols, rows] = self.rhos
        return r


def cholesky_from_correlation(spec):
    """Return the lower-triangular factor L of the correlation matrix R.

    Row j holds ``R_{j-1}^-1``-projected correlations of variable j against
    the preceding ones; the first column equals the correlations with the
    first variable and every row has unit norm.  Raise
    `NotPositiveDefiniteError` if R is not positive definite.
    """
    r = spec.correlation_matrix()
    d = spec.dim
    lower = numpy.zeros((d, d))
    lower[0, 0] = 1.0
    for j in range(1, d):
        row = scipy.linalg.solve_triangular(
            lower[:j, :j], r[:j, j], lower=True, check_finite=False)
        rest = 1.0 - row @ row
        if rest <= 0:
            raise NotPositiveDefiniteError(
                f"correlation matrix is not positive definite (row {j})")
        lower[j, :j] = row
        lower[j, j] = numpy.sqrt(rest)
    return lower


def assemble_covariance(spec):
    """Return ``S L L^T S`` with S the diagonal of standard deviations."""
    scaled = spec.sigmas[:, None] * cholesky_from_correlation(spec)
    return symmetrize(scaled @ scaled.T)
