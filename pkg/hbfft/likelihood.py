"""Single-mode Bayesian FFT identification of one record.

The FFT lines of a resonance band are modelled as independent circularly
symmetric complex Gaussian vectors with covariance
``E_k = S D_k phi phi^T + Se I`` where ``D_k = |h_k|^2`` is the dynamic
amplification of a single mode (see `frf()`).  `nll()` evaluates the negative
log-likelihood through the rank-1 structure of ``E_k``; `nll_direct()` uses
plain determinants and solves and exists as a cross-check.

The most probable value (`mpv()`) is searched over a chart which removes the
unit-norm constraint of the mode shape: ``phi = (phi0 + T u) / |phi0 + T u|``
with T an orthonormal basis of the complement of phi0, plus the logarithms of
the positive parameters.  The chart is re-centred at the current mode shape
in every outer iteration.  `laplace()` inverts the Hessian in that chart and
maps the covariance back to ``(f, xi, phi, S, Se)``, which leaves the mode
shape block singular along the mode shape itself.
"""

import dataclasses
import logging

import numpy
import scipy.linalg
import scipy.optimize

from . import spectral
from .gaussian import Gaussian, symmetrize
from .hierarchy import DatasetEvidence


logger = logging.getLogger(__name__)

LOG_PI = numpy.log(numpy.pi)

min_band_lines = 10
"""Smallest number of FFT lines accepted for identification."""


class IdentificationError(RuntimeError):
    """Modal identification failed."""
    pass


class UnidentifiableBandError(IdentificationError):
    """The Hessian at the MPV is not positive definite.

    `direction` holds the offending eigenvector, expressed over the chart
    coordinates named in `names`.
    """

    def __init__(self, message, direction=None, names=None):
        super().__init__(message)
        self.direction = direction
        self.names = names


@dataclasses.dataclass(frozen=True, eq=False)
class ModalParams:
    """Parameters of one mode identified from one record.

    `phi` has unit Euclidean norm; all scalars are positive.
    """

    f: float
    xi: float
    phi: numpy.ndarray
    S: float
    Se: float

    def __post_init__(self):
        phi = numpy.atleast_1d(numpy.asarray(self.phi, dtype=float)).copy()
        if phi.ndim != 1:
            raise ValueError("mode shape must be a vector")
        if abs(numpy.linalg.norm(phi) - 1) > 1e-12:
            raise ValueError(
                f"mode shape norm is {numpy.linalg.norm(phi)}, not 1")
        for name in ('f', 'xi', 'S', 'Se'):
            value = float(getattr(self, name))
            if not (numpy.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be finite and > 0: {value}")
            object.__setattr__(self, name, value)
        phi.flags.writeable = False
        object.__setattr__(self, 'phi', phi)

    @classmethod
    def normalized(cls, f, xi, phi, S, Se):
        """Build parameters scaling `phi` to unit norm first."""
        phi = numpy.asarray(phi, dtype=float)
        return cls(f, xi, phi / numpy.linalg.norm(phi), S, Se)

    @classmethod
    def from_vector(cls, vector):
        """Inverse of `vector()`; the mode shape is renormalized."""
        vector = numpy.asarray(vector, dtype=float)
        return cls.normalized(vector[0], vector[1], vector[2:-2],
                              vector[-2], vector[-1])

    @property
    def n(self):
        return self.phi.size

    def vector(self):
        """Parameters as ``(f, xi, phi_1 ... phi_n, S, Se)``."""
        return numpy.concatenate(
            [[self.f, self.xi], self.phi, [self.S, self.Se]])

    def names(self):
        return parameter_names(self.n)


def parameter_names(n):
    return (['f', 'xi'] + [f'phi{i + 1}' for i in range(n)] + ['S', 'Se'])


def frf(f_k, f, xi, q=0):
    """Frequency response ``(2 pi i f_k)^-q / (1 - b^2 - 2 i xi b)``.

    Here ``b = f_k / f``; `f_k` may be an array.
    """
    f_k = numpy.asarray(f_k, dtype=float)
    beta = f_k / f
    return ((2j * numpy.pi * f_k) ** (-q)
            / (1 - beta ** 2 - 2j * xi * beta))


def dynamic_amplification(f_k, f, xi, q=0):
    """Return ``D_k = |h_k|^2`` for the `frf()` values."""
    f_k = numpy.asarray(f_k, dtype=float)
    beta = f_k / f
    den = (1 - beta ** 2) ** 2 + (2 * xi * beta) ** 2
    return (2 * numpy.pi * f_k) ** (-2.0 * q) / den


def psd_model(theta, f_k, q=0):
    """Theoretical spectral density matrix ``S D_k phi phi^T + Se I``."""
    d = dynamic_amplification(f_k, theta.f, theta.xi, q)
    return symmetrize(theta.S * d * numpy.outer(theta.phi, theta.phi)
                      + theta.Se * numpy.eye(theta.n))


def _band_arrays(band_lines):
    freqs, values = spectral.stack_lines(band_lines)
    if freqs.size == 0:
        raise ValueError("empty band")
    return freqs, values


def nll(theta, band_lines, q=0):
    """Negative log-likelihood of the band lines (additive constant 0)."""
    freqs, values = _band_arrays(band_lines)
    return _nll_arrays(theta.f, theta.xi, theta.phi, theta.S, theta.Se,
                       freqs, values, q)


def _nll_arrays(f, xi, phi, S, Se, freqs, values, q):
    if not (S > 0 and Se > 0):
        raise ValueError(f"spectral densities must be positive: {S}, {Se}")
    nf, n = values.shape
    g = S * dynamic_amplification(freqs, f, xi, q)
    power = (values.real ** 2 + values.imag ** 2).sum(axis=1)
    proj = numpy.abs(values @ phi) ** 2
    total = Se + g
    return (n * nf * LOG_PI
            + nf * (n - 1) * numpy.log(Se) + numpy.log(total).sum()
            + ((power - g / total * proj) / Se).sum())


def nll_direct(theta, band_lines, q=0):
    """`nll()` computed with full determinants and linear solves."""
    freqs, values = _band_arrays(band_lines)
    n = theta.n
    out = n * freqs.size * LOG_PI
    for (f_k, v) in zip(freqs, values):
        e = psd_model(theta, f_k, q)
        sign, logdet = numpy.linalg.slogdet(e)
        out += logdet + (v.conj() @ numpy.linalg.solve(e, v)).real
    return out


class TangentChart:
    """Unconstrained coordinates around a unit mode shape `phi0`.

    Coordinates are ``(ln f, ln xi, u_1 ... u_{n-1}, ln S, ln Se)``.
    """

    def __init__(self, phi0):
        self.phi0 = numpy.asarray(phi0, dtype=float)
        n = self.phi0.size
        self.basis = scipy.linalg.null_space(self.phi0[None, :]) \
            if n > 1 else numpy.zeros((1, 0))
        self.size = n + 3

    def names(self):
        n = self.phi0.size
        return (['ln f', 'ln xi'] + [f'u{i + 1}' for i in range(n - 1)]
                + ['ln S', 'ln Se'])

    def to_chart(self, theta):
        """Chart coordinates of `theta` (its shape must be near `phi0`)."""
        u = self.basis.T @ theta.phi / (self.phi0 @ theta.phi)
        return numpy.concatenate([
            [numpy.log(theta.f), numpy.log(theta.xi)], u,
            [numpy.log(theta.S), numpy.log(theta.Se)]])

    def shape(self, u):
        v = self.phi0 + self.basis @ u
        norm = numpy.linalg.norm(v)
        return v / norm, norm

    def to_theta(self, y):
        phi, _ = self.shape(y[2:-2])
        return ModalParams(numpy.exp(y[0]), numpy.exp(y[1]), phi,
                           numpy.exp(y[-2]), numpy.exp(y[-1]))

    def jacobian(self, theta):
        """``d theta / d y`` at ``u = 0``, shape ``(n + 4, n + 3)``."""
        n = self.phi0.size
        jac = numpy.zeros((n + 4, n + 3))
        jac[0, 0] = theta.f
        jac[1, 1] = theta.xi
        jac[2:2 + n, 2:1 + n] = self.basis
        jac[-2, -2] = theta.S
        jac[-1, -1] = theta.Se
        return jac


def chart_objective(y, chart, freqs, values, q):
    """Return the NLL and its exact gradient at chart coordinates `y`."""
    nf, n = values.shape
    f, xi = numpy.exp(y[0]), numpy.exp(y[1])
    S, Se = numpy.exp(y[-2]), numpy.exp(y[-1])
    phi, norm = chart.shape(y[2:-2])

    beta = freqs / f
    den = (1 - beta ** 2) ** 2 + (2 * xi * beta) ** 2
    d = (2 * numpy.pi * freqs) ** (-2.0 * q) / den
    g = S * d
    total = Se + g
    power = (values.real ** 2 + values.imag ** 2).sum(axis=1)
    proj = values @ phi
    qk = numpy.abs(proj) ** 2
    value = (n * nf * LOG_PI + nf * (n - 1) * numpy.log(Se)
             + numpy.log(total).sum() + ((power - g / total * qk) / Se).sum())

    dl_dg = 1 / total - qk / total ** 2
    dden_dbeta = -4 * beta * (1 - beta ** 2) + 8 * xi ** 2 * beta
    dd_dlnf = d * beta * dden_dbeta / den
    dd_dlnxi = -d * 8 * xi ** 2 * beta ** 2 / den
    dl_dse = ((n - 1) / Se + 1 / total - (power - g * qk / total) / Se ** 2
              + g * qk / (total ** 2 * Se))
    dl_dq = -g / (total * Se)
    dl_dphi = 2 * ((dl_dq * proj.conj())[:, None] * values).real.sum(axis=0)
    tangent = dl_dphi - phi * (phi @ dl_dphi)

    grad = numpy.concatenate([
        [(dl_dg * S * dd_dlnf).sum(), (dl_dg * S * dd_dlnxi).sum()],
        chart.basis.T @ tangent / norm,
        [(dl_dg * g).sum(), Se * dl_dse.sum()]])
    return value, grad


def numerical_gradient(fun, x, rel_step=1e-6):
    """Central-difference gradient of scalar `fun` at `x`.

    The step of coordinate i is ``rel_step * max(|x_i|, 1)``.
    """
    x = numpy.asarray(x, dtype=float)
    grad = numpy.empty(x.size)
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (fun(xp) - fun(xm)) / (2 * h)
    return grad


def numerical_jacobian(fun, x, rel_step=1e-6):
    """Central-difference Jacobian of vector-valued `fun` at `x`."""
    x = numpy.asarray(x, dtype=float)
    columns = []
    for i in range(x.size):
        h = rel_step * max(abs(x[i]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        columns.append((numpy.asarray(fun(xp)) - numpy.asarray(fun(xm)))
                       / (2 * h))
    return numpy.stack(columns, axis=-1)


def numerical_hessian(fun, x, grad=None, rel_step=None):
    """Central-difference Hessian of scalar `fun` at `x`.

    If the gradient function `grad` is given the Hessian is the symmetrized
    Jacobian of it (default step ``1e-6``); otherwise second differences of
    `fun` are used (default step ``1e-4``).
    """
    x = numpy.asarray(x, dtype=float)
    if grad is not None:
        return symmetrize(numerical_jacobian(grad, x, rel_step or 1e-6))
    rel_step = rel_step or 1e-4
    steps = rel_step * numpy.maximum(numpy.abs(x), 1.0)
    m = x.size
    hess = numpy.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            total = 0.0
            for (si, sj, sign) in ((1, 1, 1), (1, -1, -1),
                                   (-1, 1, -1), (-1, -1, 1)):
                xx = x.copy()
                xx[i] += si * steps[i]
                xx[j] += sj * steps[j]
                total += sign * fun(xx)
            hess[i, j] = hess[j, i] = total / (4 * steps[i] * steps[j])
    return hess


def _smoothed_band_spectrum(values, halfwidth):
    """Singular values/vectors of the band PSD averaged over nearby lines."""
    nf, n = values.shape
    outer = numpy.einsum('ki,kj->kij', values, values.conj())
    csum = numpy.concatenate([numpy.zeros((1, n, n), complex),
                              numpy.cumsum(outer, axis=0)])
    lo = numpy.clip(numpy.arange(nf) - halfwidth, 0, nf)
    hi = numpy.clip(numpy.arange(nf) + halfwidth + 1, 0, nf)
    psd = (csum[hi] - csum[lo]) / (hi - lo)[:, None, None]
    svals, svecs = numpy.linalg.eigh(psd)
    return svals[:, ::-1].clip(0, None), svecs[:, :, ::-1]


def _half_power_crossing(spectrum, peak, step):
    """Fractional index where `spectrum` first drops below half the peak."""
    half = spectrum[peak] / 2
    k = peak
    while 0 <= k + step < spectrum.size:
        if spectrum[k + step] < half:
            frac = (spectrum[k] - half) / (spectrum[k] - spectrum[k + step])
            return k + step * frac
        k += step
    return None


def initial_guess(band_lines, q=0, halfwidth=None, flat_ratio=4.0):
    """Initial parameters from the singular value spectrum of the band.

    The band PSD is averaged over ``2 * halfwidth + 1`` neighbouring lines
    (default ``max(2, n)``).  Frequency and mode shape come from the peak of
    the largest singular value, damping from its half-power bandwidth
    (clamped to [0.001, 0.1]) and the noise level from the smallest
    singular value.  If the spectrum has no clear peak (peak below
    `flat_ratio` times the median), damping falls back to 0.01.
    """
    freqs, values = _band_arrays(band_lines)
    nf, n = values.shape
    if nf < min_band_lines:
        raise IdentificationError(
            f"band has {nf} lines, at least {min_band_lines} required")
    halfwidth = max(2, n) if halfwidth is None else halfwidth
    svals, svecs = _smoothed_band_spectrum(values, halfwidth)
    top = svals[:, 0]
    peak = int(numpy.argmax(top))
    f0 = freqs[peak]

    vec = svecs[peak, :, 0]
    vec = vec * numpy.exp(-1j * numpy.angle(vec[numpy.argmax(numpy.abs(vec))]))
    phi0 = vec.real / numpy.linalg.norm(vec.real)

    if n > 1:
        se0 = svals[:, -1].mean()
    else:
        se0 = top.min()
    if not se0 > 0:
        se0 = 1e-3 * top.max() if top.max() > 0 else 1.0

    xi0 = None
    if top[peak] >= flat_ratio * numpy.median(top):
        left = _half_power_crossing(top, peak, -1)
        right = _half_power_crossing(top, peak, 1)
        if left is not None or right is not None:
            df = numpy.mean(numpy.diff(freqs))
            if left is None:
                width = 2 * (right - peak) * df
            elif right is None:
                width = 2 * (peak - left) * df
            else:
                width = (right - left) * df
            xi0 = float(numpy.clip(width / (2 * f0), 0.001, 0.1))
    if xi0 is None:
        logger.info("Flat band spectrum near %.4g Hz, using default damping",
                    f0)
        xi0 = 0.01

    excess = top[peak] - se0
    if not excess > 0:
        excess = max(top[peak], se0)
    s0 = excess * 4 * xi0 ** 2 * (2 * numpy.pi * f0) ** (2 * q)
    phi0 = phi0 * numpy.sign(phi0[numpy.argmax(numpy.abs(phi0))])
    return ModalParams.normalized(f0, xi0, phi0, s0, se0)


@dataclasses.dataclass(frozen=True, eq=False)
class LaplacePosterior:
    """Gaussian approximation of the posterior of one mode and record.

    `cov` is ordered as ``(f, xi, phi_1 ... phi_n, S, Se)``.
    """

    theta_hat: ModalParams
    cov: numpy.ndarray

    def __post_init__(self):
        cov = symmetrize(self.cov)
        m = self.theta_hat.n + 4
        if cov.shape != (m, m):
            raise ValueError(f"covariance shape {cov.shape} != {(m, m)}")
        cov.flags.writeable = False
        object.__setattr__(self, 'cov', cov)

    @property
    def std(self):
        return numpy.sqrt(numpy.clip(numpy.diag(self.cov), 0, None))

    def names(self):
        return self.theta_hat.names()


@dataclasses.dataclass(frozen=True, eq=False)
class Identification:
    """Outcome of `identify()`."""

    theta_hat: ModalParams
    posterior: LaplacePosterior
    converged: bool
    iterations: int
    nll: float


def _chart_bounds(y0, freqs, n):
    return ([(numpy.log(freqs[0]), numpy.log(freqs[-1])),
             (numpy.log(1e-5), 0.0)]
            + [(-1.0, 1.0)] * (n - 1)
            + [(y0[-2] - 30, y0[-2] + 30), (y0[-1] - 30, y0[-1] + 30)])


def _chart_gradient(theta, freqs, values, q, gradient):
    chart = TangentChart(theta.phi)
    y = chart.to_chart(theta)
    if gradient == 'numeric':
        grad = numerical_gradient(
            lambda yy: chart_objective(yy, chart, freqs, values, q)[0], y)
    else:
        grad = chart_objective(y, chart, freqs, values, q)[1]
    return chart, y, grad


def chart_hessian(theta, freqs, values, q=0):
    """Hessian of the NLL over the tangent chart centred at `theta`."""
    chart = TangentChart(theta.phi)
    y = chart.to_chart(theta)
    hess = numerical_hessian(
        None, y,
        grad=lambda yy: chart_objective(yy, chart, freqs, values, q)[1])
    return chart, y, hess


def _newton_polish(theta, freqs, values, q, gtol, steps=5):
    """Refine a near-optimal `theta` with Newton steps on the chart."""
    for _ in range(steps):
        chart, y, hess = chart_hessian(theta, freqs, values, q)
        value, grad = chart_objective(y, chart, freqs, values, q)
        gnorm = numpy.linalg.norm(grad)
        if gnorm < gtol:
            break
        try:
            step = scipy.linalg.solve(hess, grad, assume_a='pos')
        except (numpy.linalg.LinAlgError, ValueError):
            break
        candidate = chart.to_theta(y - step)
        new_chart = TangentChart(candidate.phi)
        new_value, new_grad = chart_objective(
            new_chart.to_chart(candidate), new_chart, freqs, values, q)
        if (numpy.linalg.norm(new_grad) >= gnorm
                or new_value > value + 1e-9 * max(abs(value), 1)):
            break
        theta = candidate
    return theta


def identify(band_lines, init=None, q=0, max_iter=500, rtol=1e-10,
             gtol=1e-6, gradient='analytic', max_outer=50):
    """Compute the MPV and its Laplace posterior for one band.

    `init` defaults to `initial_guess()`.  `gradient` selects the exact
    chart gradient (``'analytic'``) or central differences (``'numeric'``).
    Raise `IdentificationError` when more than `max_iter` optimizer
    iterations are spent.
    """
    freqs, values = _band_arrays(band_lines)
    nf, n = values.shape
    if nf < min_band_lines:
        raise IdentificationError(
            f"band has {nf} lines, at least {min_band_lines} required")
    if init is None:
        init = initial_guess(band_lines, q)
    if init.n != n:
        raise IdentificationError(
            f"initial mode shape has {init.n} entries, data has {n} channels")
    if not freqs[0] <= init.f <= freqs[-1]:
        raise IdentificationError(
            f"initial frequency {init.f} Hz outside the band")

    def objective(y, chart):
        value, grad = chart_objective(y, chart, freqs, values, q)
        if gradient == 'numeric':
            grad = numerical_gradient(
                lambda yy: chart_objective(yy, chart, freqs, values, q)[0], y)
        if not numpy.isfinite(value):
            return numpy.inf, numpy.zeros_like(y)
        return value, grad

    theta = init
    current = nll(theta, band_lines, q)
    iterations = 0
    converged = False
    for outer in range(max_outer):
        chart = TangentChart(theta.phi)
        y0 = chart.to_chart(theta)
        result = scipy.optimize.minimize(
            objective, y0, args=(chart,), jac=True, method='L-BFGS-B',
            bounds=_chart_bounds(y0, freqs, n),
            options=dict(maxiter=max(max_iter - iterations, 1),
                         ftol=1e-15, gtol=gtol, maxcor=20))
        iterations += result.nit
        candidate = chart.to_theta(result.x)
        value = nll(candidate, band_lines, q)
        if value > current:
            logger.debug("Outer step %d increased the NLL, rejected", outer)
            break
        decrease = (current - value) / max(abs(current), 1.0)
        theta, current = candidate, value
        logger.debug("Outer step %d: NLL %.12g after %d iterations",
                     outer, current, iterations)
        if decrease < rtol:
            break
        if iterations >= max_iter:
            raise IdentificationError(
                f"no convergence after {iterations} iterations")

    theta = _newton_polish(theta, freqs, values, q, gtol)
    current = nll(theta, band_lines, q)
    _, y, grad = _chart_gradient(theta, freqs, values, q, gradient)
    converged = bool(numpy.linalg.norm(grad) < gtol)
    if not converged:
        logger.warning("MPV gradient norm %.3g above tolerance %.3g",
                       numpy.linalg.norm(grad), gtol)
    lower, upper = zip(*_chart_bounds(y, freqs, n)[:2])
    if numpy.any(numpy.isclose(y[:2], lower)) \
            or numpy.any(numpy.isclose(y[:2], upper)):
        logger.warning("MPV reached a frequency or damping bound")
    posterior = laplace(theta, band_lines, q)
    return Identification(theta, posterior, converged, iterations, current)


def mpv(band_lines, init, q=0, **kwargs):
    """Return the most probable `ModalParams` of the band lines.

    See `identify()` for the keyword arguments.
    """
    return identify(band_lines, init, q, **kwargs).theta_hat


def laplace_covariance(hessian, names=None):
    """Inverse of a positive definite Hessian.

    Raise `UnidentifiableBandError` carrying the eigenvector of the smallest
    eigenvalue otherwise.
    """
    hessian = symmetrize(hessian)
    evals, evecs = numpy.linalg.eigh(hessian)
    if evals[0] <= 0:
        direction = evecs[:, 0]
        label = ''
        if names is not None:
            label = f" (mostly {names[int(numpy.argmax(abs(direction)))]})"
        raise UnidentifiableBandError(
            f"Hessian not positive definite: eigenvalue {evals[0]:.3g}"
            f"{label}", direction, names)
    return symmetrize((evecs / evals) @ evecs.T)


def laplace(theta_hat, band_lines, q=0):
    """Laplace approximation of the posterior at the MPV `theta_hat`."""
    freqs, values = _band_arrays(band_lines)
    chart, y, hess = chart_hessian(theta_hat, freqs, values, q)
    cov_chart = laplace_covariance(hess, chart.names())
    jac = chart.jacobian(theta_hat)
    return LaplacePosterior(theta_hat, jac @ cov_chart @ jac.T)


def split_evidence(lp, dataset_id=None):
    """Split a posterior into the dynamical and spectral parameter parts.

    Return ``(evidence, nuisance)``: a `DatasetEvidence` over
    ``(f, xi, phi)`` and a `Gaussian` over ``(S, Se)``.
    """
    n = lp.theta_hat.n
    vector = lp.theta_hat.vector()
    evidence = DatasetEvidence(vector[:n + 2], lp.cov[:n + 2, :n + 2],
                               dataset_id, n_shape=n)
    nuisance = Gaussian(vector[n + 2:], lp.cov[n + 2:, n + 2:])
    return evidence, nuisance
