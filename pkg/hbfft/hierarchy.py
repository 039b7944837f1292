"""Hierarchical fusion of per-record modal evidence.

Each record contributes a `DatasetEvidence`: a Gaussian summary
``N(lambda_hat_s, cov_s)`` of its likelihood over the dynamical parameters
``lambda = (f, xi, phi)``.  Across records the dynamical parameters follow a
hyper Gaussian ``N(mu, Sigma)`` (`HyperParams`).  Integrating the
record-specific parameters out gives the negative log marginal `hyper_nll()`
with analytic gradient (`hyper_gradient()`) and Hessian (`hyper_hessian()`).

Hyper-parameters are packed into flat vectors by *layouts*:

- `TriangleLayout`: mean then the upper triangle of Sigma;
- `ChartLayout`: mean then the eigenvalues of Sigma over a fixed eigenbasis
  (`EigenbasisChart`, from `eigenbasis_reduce()`);
- `CorrelationLayout`: mean, standard deviations and correlations, used for
  sampling.

`map_estimate()` maximizes the marginal, `hyper_laplace()` approximates its
uncertainty, and `dataset_conditional()` / `predictive()` give the fused
posterior of one record and the distribution for an unobserved condition.
"""

import dataclasses
import logging
import warnings

import numpy
import scipy.linalg

from . import gaussian
from .gaussian import (CorrelationSpec, DegenerateEvidenceError, Gaussian,
                       assemble_covariance, symmetrize)


logger = logging.getLogger(__name__)

jitter_rtol = 1e-10
"""Jitter (times ``trace/d``) added to singular summed covariances."""


class ModeMismatchError(ValueError):
    """Mode shapes of different records look like different modes."""
    pass


class ModeMismatchWarning(UserWarning):
    """Mode shapes of different records look like different modes."""
    pass


class ConvergenceError(RuntimeError):
    """The hyper-parameter optimization did not converge."""
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class DatasetEvidence:
    """Gaussian summary of one record's likelihood over ``(f, xi, phi)``.

    If `n_shape` is given, `lambda_hat` is laid out as ``(f, xi, phi)`` with
    `n_shape` mode shape entries of unit norm.
    """

    lambda_hat: numpy.ndarray
    cov: numpy.ndarray
    dataset_id: object = None
    n_shape: int = None

    def __post_init__(self):
        lam = numpy.atleast_1d(numpy.asarray(self.lambda_hat, dtype=float))
        lam = lam.copy()
        cov = symmetrize(numpy.atleast_2d(self.cov))
        if cov.shape != (lam.size, lam.size):
            raise ValueError(
                f"evidence covariance shape {cov.shape} does not match "
                f"{lam.size} parameters")
        if not gaussian.is_psd(cov):
            raise gaussian.NotPositiveDefiniteError(
                f"evidence covariance of {self.dataset_id!r} is not PSD")
        if self.n_shape is not None:
            if lam.size != self.n_shape + 2:
                raise ValueError("evidence does not have (f, xi, phi) layout")
            norm = numpy.linalg.norm(lam[2:])
            if abs(norm - 1) > 1e-10:
                raise ValueError(f"evidence mode shape norm is {norm}")
        lam.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, 'lambda_hat', lam)
        object.__setattr__(self, 'cov', cov)

    @property
    def dim(self):
        return self.lambda_hat.size

    @property
    def phi(self):
        return self.lambda_hat[2:]

    def gaussian(self):
        return Gaussian(self.lambda_hat, self.cov)


@dataclasses.dataclass(frozen=True, eq=False)
class HyperParams:
    """Mean and covariance of the hyper Gaussian."""

    mu: numpy.ndarray
    cov: numpy.ndarray

    def __post_init__(self):
        mu = numpy.atleast_1d(numpy.asarray(self.mu, dtype=float)).copy()
        cov = symmetrize(numpy.atleast_2d(self.cov))
        if cov.shape != (mu.size, mu.size):
            raise ValueError("hyper mean and covariance do not conform")
        if not gaussian.is_psd(cov):
            raise gaussian.NotPositiveDefiniteError(
                "hyper covariance is not PSD")
        mu.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, 'mu', mu)
        object.__setattr__(self, 'cov', cov)

    @property
    def dim(self):
        return self.mu.size

    def gaussian(self):
        return Gaussian(self.mu, self.cov)


@dataclasses.dataclass(frozen=True, eq=False)
class EigenbasisChart:
    """Fixed orthonormal eigenvectors (columns of `basis`) of Sigma."""

    basis: numpy.ndarray
    eigenvalues: numpy.ndarray

    def __post_init__(self):
        basis = numpy.atleast_2d(numpy.asarray(self.basis, dtype=float))
        evals = numpy.atleast_1d(numpy.asarray(self.eigenvalues, dtype=float))
        d = evals.size
        if basis.shape != (d, d):
            raise ValueError("chart basis and eigenvalues do not conform")
        if not numpy.allclose(basis.T @ basis, numpy.eye(d), atol=1e-10):
            raise ValueError("chart basis is not orthonormal")
        if numpy.any(evals < 0):
            raise ValueError("chart eigenvalues must be non-negative")
        object.__setattr__(self, 'basis', basis)
        object.__setattr__(self, 'eigenvalues', evals)

    @property
    def dim(self):
        return self.eigenvalues.size

    def covariance(self, eigenvalues=None):
        evals = self.eigenvalues if eigenvalues is None else eigenvalues
        return symmetrize((self.basis * evals) @ self.basis.T)


def eigenbasis_reduce(sigma_bar):
    """Chart Sigma over the eigenvectors of `sigma_bar`.

    Eigenvalues are sorted in descending order and clipped at zero; every
    eigenvector has a positive largest-magnitude entry.
    """
    sigma_bar = symmetrize(sigma_bar)
    evals, evecs = numpy.linalg.eigh(sigma_bar)
    evals, evecs = evals[::-1], evecs[:, ::-1]
    pivots = numpy.argmax(numpy.abs(evecs), axis=0)
    evecs = evecs * numpy.sign(evecs[pivots, numpy.arange(evecs.shape[1])])
    return EigenbasisChart(evecs, numpy.clip(evals, 0, None))


# Layouts of packed hyper-parameter vectors.

def _mean_names(d, n_shape):
    if n_shape is not None and d == n_shape + 2:
        return (['mu_f', 'mu_xi']
                + [f'mu_phi{i + 1}' for i in range(n_shape)])
    return [f'mu{i + 1}' for i in range(d)]


class TriangleLayout:
    """Mean followed by the upper triangle of Sigma (row-major)."""

    kind = 'triangle'

    def __init__(self, dim, n_shape=None):
        self.dim = dim
        self.n_shape = n_shape
        self._rows, self._cols = numpy.triu_indices(dim)
        self.size = dim + self._rows.size

    def names(self):
        return (_mean_names(self.dim, self.n_shape)
                + [f'cov{i + 1}_{j + 1}'
                   for (i, j) in zip(self._rows, self._cols)])

    def pack(self, psi):
        return numpy.concatenate([psi.mu, psi.cov[self._rows, self._cols]])

    def covariance(self, x_sigma):
        cov = numpy.zeros((self.dim, self.dim))
        cov[self._rows, self._cols] = x_sigma
        cov[self._cols, self._rows] = x_sigma
        return cov

    def unpack(self, x):
        return HyperParams(x[:self.dim], self.covariance(x[self.dim:]))

    def jacobian(self):
        """``d vec(Sigma) / d x_sigma``; off-diagonals move both entries."""
        d = self.dim
        jac = numpy.zeros((d * d, self._rows.size))
        for (a, (i, j)) in enumerate(zip(self._rows, self._cols)):
            jac[i * d + j, a] = 1.0
            jac[j * d + i, a] = 1.0
        return jac

    def project(self, x_sigma, lower=None, upper=None):
        """Nearest PSD matrix by eigenvalue clipping, then into the box.

        Variances are clipped to their bounds keeping the correlations, and
        the off-diagonal entries are shrunk by a common factor until they
        fit theirs.  Both moves keep the matrix PSD; off-diagonal bounds
        are expected to straddle zero.
        """
        evals, evecs = numpy.linalg.eigh(self.covariance(x_sigma))
        cov = symmetrize((evecs * evals.clip(0, None)) @ evecs.T)
        if lower is None and upper is None:
            return cov[self._rows, self._cols]
        m = self._rows.size
        lower = numpy.full(m, -numpy.inf) if lower is None \
            else numpy.asarray(lower, dtype=float)
        upper = numpy.full(m, numpy.inf) if upper is None \
            else numpy.asarray(upper, dtype=float)
        on_diag = self._rows == self._cols

        sd = numpy.sqrt(numpy.diag(cov).clip(0, None))
        outer = numpy.outer(sd, sd)
        corr = numpy.divide(cov, outer, out=numpy.zeros_like(cov),
                            where=outer > 0)
        numpy.fill_diagonal(corr, 1.0)
        var = numpy.clip(sd ** 2, numpy.maximum(lower[on_diag], 0),
                         upper[on_diag])
        new_sd = numpy.sqrt(var)
        x = (corr * numpy.outer(new_sd, new_sd))[self._rows, self._cols]

        off = x[~on_diag]
        ratios = numpy.ones_like(off)
        high = off > upper[~on_diag]
        low = off < lower[~on_diag]
        ratios[high] = upper[~on_diag][high] / off[high]
        ratios[low] = lower[~on_diag][low] / off[low]
        x[~on_diag] = off * ratios.clip(0, 1).min(initial=1.0)
        lower = numpy.where(on_diag, numpy.maximum(lower, 0), lower)
        return numpy.clip(x, lower, upper)


class ChartLayout:
    """Mean followed by the eigenvalues of Sigma over a fixed chart."""

    kind = 'chart'

    def __init__(self, chart, n_shape=None):
        self.chart = chart
        self.dim = chart.dim
        self.n_shape = n_shape
        self.size = 2 * self.dim

    def names(self):
        return (_mean_names(self.dim, self.n_shape)
                + [f'eig{i + 1}' for i in range(self.dim)])

    def pack(self, psi):
        basis = self.chart.basis
        return numpy.concatenate(
            [psi.mu, numpy.einsum('ia,ij,ja->a', basis, psi.cov, basis)])

    def covariance(self, x_sigma):
        return self.chart.covariance(x_sigma)

    def unpack(self, x):
        return HyperParams(x[:self.dim], self.covariance(x[self.dim:]))

    def jacobian(self):
        basis = self.chart.basis
        return numpy.einsum('ia,ja->ija', basis, basis).reshape(
            self.dim * self.dim, self.dim)

    def project(self, x_sigma, lower=None, upper=None):
        lower = 0.0 if lower is None else numpy.maximum(lower, 0.0)
        return numpy.clip(x_sigma, lower, upper)


class CorrelationLayout:
    """Mean, standard deviations and correlations (lower triangle) of Sigma.

    Sigma is assembled as ``S L L^T S`` from the closed-form Cholesky factor
    of the correlation matrix.
    """

    kind = 'correlation'

    def __init__(self, dim, n_shape=None):
        self.dim = dim
        self.n_shape = n_shape
        self._rows, self._cols = numpy.tril_indices(dim, -1)
        self.size = 2 * dim + self._rows.size

    def names(self):
        return (_mean_names(self.dim, self.n_shape)
                + [f'sigma{i + 1}' for i in range(self.dim)]
                + [f'rho{i + 1}_{j + 1}'
                   for (i, j) in zip(self._rows, self._cols)])

    def pack(self, psi):
        sigmas = numpy.sqrt(numpy.clip(numpy.diag(psi.cov), 0, None))
        scale = numpy.outer(sigmas, sigmas)
        corr = numpy.divide(psi.cov, scale, out=numpy.zeros_like(psi.cov),
                            where=scale > 0)
        return numpy.concatenate(
            [psi.mu, sigmas, corr[self._rows, self._cols]])

    def spec(self, x_sigma):
        return CorrelationSpec(x_sigma[:self.dim], x_sigma[self.dim:])

    def covariance(self, x_sigma):
        return assemble_covariance(self.spec(x_sigma))

    def unpack(self, x):
        return HyperParams(x[:self.dim], self.covariance(x[self.dim:]))


def layout_for(dim, chart=None, n_shape=None):
    """`ChartLayout` when a chart is given, `TriangleLayout` otherwise."""
    if chart is not None:
        return ChartLayout(chart, n_shape)
    return TriangleLayout(dim, n_shape)


@dataclasses.dataclass(frozen=True, eq=False)
class PriorBox:
    """Uniform prior over the closed box ``lower <= x <= upper``."""

    lower: numpy.ndarray
    upper: numpy.ndarray

    def __post_init__(self):
        lower = numpy.asarray(self.lower, dtype=float).reshape(-1)
        upper = numpy.asarray(self.upper, dtype=float).reshape(-1)
        if lower.shape != upper.shape or numpy.any(lower >= upper):
            raise ValueError("invalid prior box bounds")
        object.__setattr__(self, 'lower', lower)
        object.__setattr__(self, 'upper', upper)

    @property
    def size(self):
        return self.lower.size

    def contains(self, x):
        x = numpy.asarray(x)
        return bool(numpy.all(x >= self.lower) and numpy.all(x <= self.upper))

    @property
    def midpoint(self):
        return (self.lower + self.upper) / 2


def default_prior_box(layout, f_max, xi_max=0.1, phi_bound=1.0,
                      variance_max=0.1, f_min=0.0):
    """Uniform box of a modal hyper model (``lambda = (f, xi, phi)``).

    Means: f in (f_min, f_max), xi in (0, xi_max), phi in (-phi_bound,
    phi_bound).  Covariance coordinates: eigenvalues and variances in
    (0, variance_max), standard deviations up to its square root,
    correlations in (-1, 1) and triangle off-diagonals in
    (-variance_max, variance_max).
    """
    d = layout.dim
    lower = [f_min, 0.0] + [-phi_bound] * (d - 2)
    upper = [f_max, xi_max] + [phi_bound] * (d - 2)
    if layout.kind == 'chart':
        lower += [0.0] * d
        upper += [variance_max] * d
    elif layout.kind == 'correlation':
        n_rho = layout.size - 2 * d
        lower += [0.0] * d + [-1.0] * n_rho
        upper += [numpy.sqrt(variance_max)] * d + [1.0] * n_rho
    else:
        rows, cols = numpy.triu_indices(d)
        lower += [0.0 if i == j else -variance_max
                  for (i, j) in zip(rows, cols)]
        upper += [variance_max] * rows.size
    return PriorBox(lower, upper)


def align_mode_signs(evidences, strict=True, min_overlap=0.2):
    """Flip mode shapes to agree in sign with the first record's shape.

    Flipping negates the mode shape entries of the mean and transforms the
    covariance congruently.  A record whose shape overlaps the reference by
    less than `min_overlap` (absolute cosine) raises `ModeMismatchError` if
    `strict`, otherwise a `ModeMismatchWarning` is issued and the record is
    aligned by the sign of the overlap anyway.
    """
    evidences = list(evidences)
    if not evidences:
        raise ValueError("no evidence to align")
    dims = {ev.dim for ev in evidences}
    if len(dims) != 1:
        raise ValueError(f"heterogeneous evidence dimensions: {dims}")
    reference = evidences[0].phi
    aligned = []
    for ev in evidences:
        overlap = ev.phi @ reference / (numpy.linalg.norm(ev.phi)
                                        * numpy.linalg.norm(reference))
        if abs(overlap) < min_overlap:
            message = (f"mode shape of {ev.dataset_id!r} overlaps the "
                       f"reference shape by {overlap:.3f} only")
            if strict:
                raise ModeMismatchError(message)
            logger.warning(message)
            warnings.warn(message, ModeMismatchWarning)
        if overlap >= 0:
            aligned.append(ev)
            continue
        signs = numpy.ones(ev.dim)
        signs[2:] = -1
        aligned.append(DatasetEvidence(
            signs * ev.lambda_hat, signs[:, None] * ev.cov * signs[None, :],
            ev.dataset_id, ev.n_shape))
    return aligned


# Hyper marginal and its derivatives.

def _stack(evidences):
    evidences = list(evidences)
    if not evidences:
        raise ValueError("no evidence")
    lam = numpy.array([ev.lambda_hat for ev in evidences])
    covs = numpy.array([ev.cov for ev in evidences])
    return lam, covs


def _cholesky_stack(a):
    try:
        return numpy.linalg.cholesky(a)
    except numpy.linalg.LinAlgError:
        pass
    out = numpy.empty_like(a)
    jittered = 0
    d = a.shape[-1]
    for (s, m) in enumerate(a):
        try:
            out[s] = numpy.linalg.cholesky(m)
            continue
        except numpy.linalg.LinAlgError:
            pass
        jitter = jitter_rtol * max(numpy.trace(m), 0.0) / d
        try:
            out[s] = numpy.linalg.cholesky(m + jitter * numpy.eye(d))
        except numpy.linalg.LinAlgError as exc:
            raise DegenerateEvidenceError(
                f"singular summed covariance (evidence {s})") from exc
        jittered += 1
    logger.debug("Added jitter to %d singular summed covariances", jittered)
    return out


def _summed_terms(mu, sigma, lam, covs):
    """Cholesky factors of ``A_s = Sigma + cov_s`` and whitened residuals."""
    a = sigma[None, :, :] + covs
    a = (a + a.transpose(0, 2, 1)) / 2
    chol = _cholesky_stack(a)
    resid = mu[None, :] - lam
    z = numpy.linalg.solve(chol, resid[:, :, None])[:, :, 0]
    return chol, resid, z


def _inverse_terms(mu, sigma, lam, covs):
    """Return ``B_s = A_s^-1`` and ``b_s = B_s (mu - lambda_hat_s)``."""
    chol, resid, z = _summed_terms(mu, sigma, lam, covs)
    inv_chol = numpy.linalg.inv(chol)
    inv = numpy.einsum('ski,skj->sij', inv_chol, inv_chol)
    inv = (inv + inv.transpose(0, 2, 1)) / 2
    return inv, numpy.einsum('sij,sj->si', inv, resid)


def hyper_nll_terms(mu, sigma, evidences):
    """Per-record terms of `hyper_nll()` (without any prior)."""
    lam, covs = _stack(evidences)
    chol, resid, z = _summed_terms(numpy.asarray(mu, dtype=float),
                                   numpy.asarray(sigma, dtype=float),
                                   lam, covs)
    logdet = 2 * numpy.log(numpy.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
    return 0.5 * (logdet + (z * z).sum(axis=1))


def hyper_nll(psi, evidences, box=None, layout=None):
    """Negative log marginal of the hyper-parameters (constant 0).

    ``L = 1/2 sum_s [ln det(A_s) + (mu - lambda_hat_s)^T A_s^-1
    (mu - lambda_hat_s)]`` with ``A_s = Sigma + cov_s``.  With a prior `box`
    over the packed coordinates of `layout` (default `TriangleLayout`), the
    result is infinite outside the box.
    """
    if box is not None:
        layout = layout or TriangleLayout(psi.dim)
        if not box.contains(layout.pack(psi)):
            return numpy.inf
    return float(hyper_nll_terms(psi.mu, psi.cov, evidences).sum())


def hyper_gradient(psi, evidences):
    """Gradient of `hyper_nll()` as ``(grad_mu, grad_sigma)``.

    ``grad_sigma`` is the matrix ``1/2 sum_s [B_s - b_s b_s^T]``; entries of
    Sigma are treated as independent.
    """
    lam, covs = _stack(evidences)
    inv, b = _inverse_terms(psi.mu, psi.cov, lam, covs)
    grad_sigma = 0.5 * (inv.sum(axis=0) - numpy.einsum('si,sj->ij', b, b))
    return b.sum(axis=0), symmetrize(grad_sigma)


def packed_gradient(psi, evidences, layout=None):
    """Gradient of `hyper_nll()` over the packed coordinates of `layout`."""
    layout = layout or TriangleLayout(psi.dim)
    grad_mu, grad_sigma = hyper_gradient(psi, evidences)
    return numpy.concatenate(
        [grad_mu, layout.jacobian().T @ grad_sigma.reshape(-1)])


def _hessian_blocks(psi, evidences, jac):
    d = psi.dim
    lam, covs = _stack(evidences)
    inv, b = _inverse_terms(psi.mu, psi.cov, lam, covs)
    h_mu = symmetrize(inv.sum(axis=0))
    cross = -numpy.einsum('smk,sl->mkl', inv, b).reshape(d, d * d) @ jac
    tensor = (-0.5 * numpy.einsum('sjk,sli->ijkl', inv, inv)
              + numpy.einsum('si,sjk,sl->ijkl', b, inv, b))
    h_sigma = symmetrize(jac.T @ tensor.reshape(d * d, d * d) @ jac)
    return h_mu, cross, h_sigma


def hyper_hessian(psi, evidences, layout=None):
    """Hessian of `hyper_nll()` over the packed coordinates of `layout`."""
    layout = layout or TriangleLayout(psi.dim)
    h_mu, cross, h_sigma = _hessian_blocks(psi, evidences, layout.jacobian())
    return symmetrize(numpy.block([[h_mu, cross], [cross.T, h_sigma]]))


def mean_weights(sigma, evidences):
    """Weights ``Lambda_s = (sum_r A_r^-1)^-1 A_s^-1``; they sum to I."""
    lam, covs = _stack(evidences)
    inv, _ = _inverse_terms(lam[0], numpy.asarray(sigma, dtype=float),
                            lam, covs)
    total = gaussian.cho_factor(symmetrize(inv.sum(axis=0)),
                                "summed precision")
    return numpy.array([scipy.linalg.cho_solve(total, m) for m in inv])


def weighted_mean(sigma, evidences):
    """Hyper mean minimizing `hyper_nll()` for the given Sigma."""
    lam, _ = _stack(evidences)
    weights = mean_weights(sigma, evidences)
    return numpy.einsum('sij,sj->i', weights, lam)


def initial_hyper(evidences):
    """Moment-based starting point of the hyper-parameters.

    The mean is the ensemble mean of the record estimates; the covariance is
    their scatter matrix minus the mean evidence covariance, with negative
    eigenvalues clipped to zero.
    """
    lam, covs = _stack(evidences)
    if lam.shape[0] < 2:
        raise ValueError("at least two records are needed")
    mu = lam.mean(axis=0)
    resid = lam - mu
    scatter = resid.T @ resid / lam.shape[0]
    sigma = symmetrize(scatter - covs.mean(axis=0))
    evals, evecs = numpy.linalg.eigh(sigma)
    if evals.min() < 0:
        logger.debug("Clipping %d negative eigenvalues of the initial "
                     "hyper covariance", (evals < 0).sum())
    return HyperParams(mu, symmetrize((evecs * evals.clip(0, None))
                                      @ evecs.T))


@dataclasses.dataclass(frozen=True, eq=False)
class MapEstimate:
    """Outcome of `map_estimate()`."""

    psi: HyperParams
    layout: object
    nll: float
    iterations: int
    converged: bool
    no_variability: bool
    mu_phi_norm: float = None

    @property
    def x(self):
        """Packed hyper-parameters."""
        return self.layout.pack(self.psi)


def _safe_nll(mu, sigma, evidences):
    try:
        return float(hyper_nll_terms(mu, sigma, evidences).sum())
    except DegenerateEvidenceError:
        return numpy.inf


def _sigma_step(mu, x_sigma, layout, evidences, lower, upper):
    """One projected Newton step on the covariance coordinates."""
    d = layout.dim
    sigma = layout.covariance(x_sigma)
    psi = HyperParams(mu, sigma)
    jac = layout.jacobian()
    _, grad_sigma = hyper_gradient(psi, evidences)
    grad = jac.T @ grad_sigma.reshape(-1)
    _, _, hess = _hessian_blocks(psi, evidences, jac)
    current = _safe_nll(mu, sigma, evidences)

    free = numpy.ones(grad.size, dtype=bool)
    if layout.kind == 'chart':
        lo = numpy.zeros(d) if lower is None else numpy.maximum(lower, 0)
        free &= ~((x_sigma <= lo) & (grad > 0))
        if upper is not None:
            free &= ~((x_sigma >= upper) & (grad < 0))
    step = numpy.zeros_like(grad)
    if not free.any():
        return x_sigma, current
    g = grad[free]
    try:
        factor = scipy.linalg.cho_factor(hess[numpy.ix_(free, free)])
        step[free] = scipy.linalg.cho_solve(factor, g)
    except numpy.linalg.LinAlgError:
        curvature = g @ hess[numpy.ix_(free, free)] @ g
        scale = ((g @ g) / curvature if curvature > 0
                 else 1e-3 * numpy.abs(x_sigma).max(initial=1.0)
                 / max(numpy.linalg.norm(g), 1e-300))
        step[free] = scale * g

    t = 1.0
    for _ in range(60):
        trial = layout.project(x_sigma - t * step, lower, upper)
        value = _safe_nll(mu, layout.covariance(trial), evidences)
        if value < current:
            return trial, value
        t /= 2
    return x_sigma, current


def map_estimate(evidences, chart=None, box=None, max_iter=1000,
                 rtol=1e-10, xtol=1e-8):
    """Maximum a posteriori hyper-parameters under a uniform prior.

    Alternates the closed-form mean update with a projected Newton step on
    the covariance coordinates (the eigenvalues of `chart` if given, the
    full matrix otherwise).  `box` (over the packed coordinates) clips the
    mean after each update and bounds the covariance coordinates through
    `project()` of the layout.  Converged when the relative decrease of the
    objective is below `rtol` and the coordinate change below `xtol`.
    """
    evidences = list(evidences)
    init = initial_hyper(evidences)
    n_shape = evidences[0].n_shape
    layout = layout_for(init.dim, chart, n_shape)
    d = init.dim
    lower = upper = None
    mu_lower = mu_upper = None
    if box is not None:
        if box.size != layout.size:
            raise ValueError(
                f"prior box has {box.size} coordinates, layout {layout.size}")
        lower, upper = box.lower[d:], box.upper[d:]
        mu_lower, mu_upper = box.lower[:d], box.upper[:d]

    def update_mean(sigma):
        mu = weighted_mean(sigma, evidences)
        if box is None:
            return mu
        return numpy.clip(mu, mu_lower, mu_upper)

    x_sigma = layout.project(layout.pack(init)[d:], lower, upper)

    mu = init.mu
    current = numpy.inf
    for iteration in range(1, max_iter + 1):
        mu = update_mean(layout.covariance(x_sigma))
        new_x, value = _sigma_step(mu, x_sigma, layout, evidences,
                                   lower, upper)
        change = numpy.abs(new_x - x_sigma).max(initial=0.0)
        decrease = ((current - value) / max(abs(value), 1.0)
                    if numpy.isfinite(current) else numpy.inf)
        x_sigma, current = new_x, value
        logger.debug("MAP iteration %d: NLL %.12g", iteration, current)
        if decrease < rtol and change < xtol:
            break
    else:
        raise ConvergenceError(
            f"hyper MAP did not converge in {max_iter} iterations")

    sigma = layout.covariance(x_sigma)
    mu = update_mean(sigma)
    psi = HyperParams(mu, sigma)
    nll = hyper_nll(psi, evidences)
    scale = max(numpy.trace(numpy.mean([ev.cov for ev in evidences],
                                       axis=0)) / d, 1e-300)
    if layout.kind == 'chart':
        no_variability = bool(numpy.all(x_sigma <= 0))
    else:
        no_variability = bool(numpy.linalg.eigvalsh(sigma).max()
                              <= 1e-12 * scale)
    if no_variability:
        logger.warning("No across-record variability detected: the hyper "
                       "covariance reached zero")
    mu_phi_norm = (float(numpy.linalg.norm(mu[2:]))
                   if n_shape is not None else None)
    logger.info("Hyper MAP converged in %d iterations (NLL %.6g)",
                iteration, nll)
    return MapEstimate(psi, layout, nll, iteration, True, no_variability,
                       mu_phi_norm)


def factorize_jittered(g0, g):
    """`gaussian.product_factorize()` with jitter on singular sums."""
    try:
        return gaussian.product_factorize(g0, g)
    except DegenerateEvidenceError:
        d = g0.dim
        jitter = jitter_rtol * max(numpy.trace(g0.cov + g.cov), 0.0) / d
        if not jitter > 0:
            raise
        logger.debug("Added jitter %.3g to a singular summed covariance",
                     jitter)
        return gaussian.product_factorize(
            Gaussian(g0.mean, g0.cov + jitter * numpy.eye(d)), g)


def dataset_conditional(r, evidences, psi_hat):
    """Fused posterior of the dynamical parameters of record `r`.

    Mean ``lambda_hat_r + K (mu - lambda_hat_r)`` and covariance
    ``cov_r - K cov_r`` with gain ``K = cov_r (cov_r + Sigma)^-1``.
    """
    evidence = list(evidences)[r]
    return factorize_jittered(evidence.gaussian(),
                              psi_hat.gaussian()).posterior


def conditional_posteriors(evidences, estimate, leave_one_out_below=10,
                           **map_kwargs):
    """`dataset_conditional()` for every record.

    With fewer than `leave_one_out_below` records, record r is conditioned on
    hyper-parameters estimated from the other records only (same chart as
    `estimate`); otherwise `estimate` is used throughout.
    """
    evidences = list(evidences)
    n_d = len(evidences)
    if n_d >= leave_one_out_below or n_d < 3:
        return [dataset_conditional(r, evidences, estimate.psi)
                for r in range(n_d)]
    chart = getattr(estimate.layout, 'chart', None)
    out = []
    for r in range(n_d):
        others = evidences[:r] + evidences[r + 1:]
        psi_r = map_estimate(others, chart=chart, **map_kwargs).psi
        out.append(dataset_conditional(r, evidences, psi_r))
    return out


def predictive(psi_hat, renormalize=False, n_shape=None):
    """Distribution of the dynamical parameters for an unobserved record.

    With `renormalize`, the mode shape part (``lambda[2:]``, requires
    `n_shape`) of the mean is scaled to unit norm and the covariance
    transformed congruently.
    """
    mean, cov = psi_hat.mu, psi_hat.cov
    if not numpy.any(cov):
        logger.warning("Predictive distribution is a point mass")
    if renormalize:
        if n_shape is None or mean.size != n_shape + 2:
            raise ValueError("renormalizing needs the (f, xi, phi) layout")
        scale = numpy.ones(mean.size)
        scale[2:] = 1 / numpy.linalg.norm(mean[2:])
        mean, cov = mean * scale, scale[:, None] * cov * scale[None, :]
    return Gaussian(mean, cov)


@dataclasses.dataclass(frozen=True, eq=False)
class HyperPosteriorLaplace:
    """Gaussian approximation of the hyper-parameter posterior.

    `indefinite` flags a Hessian that is not positive definite; `direction`
    is then the eigenvector of its smallest eigenvalue.
    """

    psi_hat: numpy.ndarray
    cov: numpy.ndarray
    names: list
    indefinite: bool = False
    direction: numpy.ndarray = None

    @property
    def std(self):
        return numpy.sqrt(numpy.clip(numpy.diag(self.cov), 0, None))


def hyper_laplace(estimate, evidences, layout=None):
    """Laplace approximation around a MAP estimate.

    `estimate` is a `MapEstimate` (its layout is used) or `HyperParams`
    (with `layout`, default `TriangleLayout`).  The covariance is the
    inverse Hessian of `hyper_nll()` over the packed coordinates.
    """
    if isinstance(estimate, MapEstimate):
        psi, layout = estimate.psi, estimate.layout
    else:
        psi, layout = estimate, layout or TriangleLayout(estimate.dim)
    hess = hyper_hessian(psi, evidences, layout)
    evals, evecs = numpy.linalg.eigh(hess)
    names = layout.names()
    indefinite = bool(evals[0] <= 0)
    direction = None
    if indefinite:
        direction = evecs[:, 0]
        logger.warning(
            "Hyper Hessian is not positive definite (eigenvalue %.3g, "
            "mostly along %s): the Laplace approximation is unreliable",
            evals[0], names[int(numpy.argmax(numpy.abs(direction)))])
    nonzero = numpy.abs(evals) > 1e-300
    inv_evals = numpy.zeros_like(evals)
    inv_evals[nonzero] = 1 / evals[nonzero]
    cov = symmetrize((evecs * inv_evals) @ evecs.T)
    return HyperPosteriorLaplace(layout.pack(psi), cov, names, indefinite,
                                 direction)
