"""Synthetic multi-record vibration data with known ground truth.

A `SynthScenario` fixes the hyper Gaussian of the dynamical parameters
``(f, xi, phi)`` and the ranges of the per-record spectral densities.
`draw_dataset_params()` draws the true `ModalParams` of one record, which
can be turned into band FFT lines following the likelihood model exactly
(`generate_fft_band()`) or into a full time history
(`generate_time_history()`).  `draw_evidences()` skips identification and
draws record evidence straight from the hierarchical model.

Every generator is deterministic given the scenario seed and the record
index.
"""

import dataclasses
import logging

import numpy
import scipy.fft
import scipy.linalg

from . import spectral
from .hierarchy import DatasetEvidence, HyperParams
from .likelihood import ModalParams, dynamic_amplification


logger = logging.getLogger(__name__)

max_redraws = 100


@dataclasses.dataclass(frozen=True, eq=False)
class SynthScenario:
    """Generative setting of a synthetic project.

    `true_hyper` is over ``(f, xi, phi_1 ... phi_n)``; `S_range` and
    `Se_range` are the ``(low, high)`` bounds of the uniformly drawn
    spectral densities.
    """

    true_hyper: HyperParams
    n: int
    N: int
    dt: float
    S_range: tuple
    Se_range: tuple
    N_D: int
    q: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.true_hyper.dim != self.n + 2:
            raise ValueError(f"hyper-parameters of dimension "
                             f"{self.true_hyper.dim} do not fit "
                             f"{self.n} channels")
        if self.N < 1 or self.N_D < 1 or self.n < 1:
            raise ValueError("N, N_D and n must be >= 1")
        if not self.dt > 0:
            raise ValueError(f"sampling interval must be positive: {self.dt}")
        if self.q not in spectral.RESPONSE_ORDERS:
            raise ValueError(f"invalid response order: {self.q}")
        for name in ('S_range', 'Se_range'):
            low, high = getattr(self, name)
            if not 0 < low <= high:
                raise ValueError(f"invalid {name}: {(low, high)}")
            object.__setattr__(self, name, (float(low), float(high)))


def _rng(seed, *keys):
    entropy = [int(s) for s in numpy.atleast_1d(seed)] + list(keys)
    return numpy.random.default_rng(entropy)


def draw_dataset_params(scenario, s):
    """True modal parameters of record `s`.

    ``lambda_s ~ N(mu, Sigma)`` with the mode shape renormalized, drawn again
    (up to `max_redraws` times) while f or xi are not positive.
    """
    rng = _rng(scenario.seed, s)
    psi = scenario.true_hyper
    for _ in range(max_redraws):
        lam = rng.multivariate_normal(psi.mu, psi.cov, method='eigh')
        if lam[0] > 0 and lam[1] > 0 and numpy.linalg.norm(lam[2:]) > 0:
            break
    else:
        raise ValueError(f"no valid parameters for record {s} in "
                         f"{max_redraws} draws: check the scenario")
    S = rng.uniform(*scenario.S_range)
    Se = rng.uniform(*scenario.Se_range)
    return ModalParams.normalized(lam[0], lam[1], lam[2:], S, Se)


def generate_fft_band(theta, band, freqs, seed=0, q=0):
    """Draw the FFT lines of `band` among the grid `freqs`.

    ``F_k = sqrt(S D_k / 2) phi (a + i b) + sqrt(Se / 2) (z1 + i z2)`` with
    standard normal a, b, z1, z2: a circularly symmetric complex Gaussian
    of covariance ``S D_k phi phi^T + Se I``.
    """
    freqs = numpy.asarray(freqs, dtype=float)
    df = numpy.min(numpy.diff(freqs)) if freqs.size > 1 else 1.0
    slack = 1e-9 * df
    freqs = freqs[(freqs >= band.f_lb - slack) & (freqs <= band.f_ub + slack)]
    if freqs.size == 0:
        raise spectral.EmptyBandError(
            f"band [{band.f_lb}, {band.f_ub}] Hz contains no grid line")
    rng = _rng(seed)
    nf, n = freqs.size, theta.n
    modal = (numpy.sqrt(theta.S * dynamic_amplification(
        freqs, theta.f, theta.xi, q) / 2)
        * (rng.standard_normal(nf) + 1j * rng.standard_normal(nf)))
    noise = numpy.sqrt(theta.Se / 2) * (rng.standard_normal((nf, n))
                                        + 1j * rng.standard_normal((nf, n)))
    values = modal[:, None] * theta.phi[None, :] + noise
    return [spectral.FftLine(float(f), v) for (f, v) in zip(freqs, values)]


def _discrete_modal_system(f, xi, S, dt):
    omega = 2 * numpy.pi * f
    if omega * dt >= numpy.pi:
        raise ValueError(f"mode at {f} Hz is not resolved with dt={dt}")
    a = numpy.array([[0.0, 1.0], [-omega ** 2, -2 * xi * omega]])
    b = numpy.array([0.0, omega ** 2])
    # Van Loan: transition and integrated process noise covariance.
    block = numpy.zeros((4, 4))
    block[:2, :2] = -a
    block[:2, 2:] = S * numpy.outer(b, b)
    block[2:, 2:] = a.T
    expm = scipy.linalg.expm(block * dt)
    ad = expm[2:, 2:].T
    qd = ad @ expm[:2, 2:]
    qd = (qd + qd.T) / 2
    if numpy.abs(numpy.linalg.eigvals(ad)).max() >= 1:
        raise ValueError("unstable discrete-time modal system")
    return ad, qd


def _root(cov):
    evals, evecs = numpy.linalg.eigh(cov)
    return evecs * numpy.sqrt(evals.clip(0, None))


def _integrate(signal, dt, q):
    """Integrate `q` times by division in the frequency domain."""
    if q == 0:
        return signal
    freqs = scipy.fft.fftfreq(signal.size, dt)
    spectrum = scipy.fft.fft(signal)
    nonzero = freqs != 0
    spectrum[~nonzero] = 0
    spectrum[nonzero] /= (2j * numpy.pi * freqs[nonzero]) ** q
    return scipy.fft.ifft(spectrum).real


def generate_time_history(theta, scenario, s=0):
    """Time history of one record by exact discretization of the mode.

    The modal response r obeys ``r'' + 2 xi w r' + w^2 r = w^2 p`` with
    white noise p of spectral density S; channels get ``phi r`` plus white
    noise of spectral density Se.  Velocity and displacement records
    (``scenario.q``) integrate r in the frequency domain.
    """
    rng = _rng(scenario.seed, s, 1)
    ad, qd = _discrete_modal_system(theta.f, theta.xi, theta.S, scenario.dt)
    stationary = scipy.linalg.solve_discrete_lyapunov(ad, qd)
    state = _root(stationary) @ rng.standard_normal(2)
    steps = _root(qd) @ rng.standard_normal((2, scenario.N))
    response = numpy.empty(scenario.N)
    for k in range(scenario.N):
        response[k] = state[0]
        state = ad @ state + steps[:, k]
    response = _integrate(response, scenario.dt, scenario.q)
    noise = numpy.sqrt(theta.Se / scenario.dt) * rng.standard_normal(
        (theta.n, scenario.N))
    samples = theta.phi[:, None] * response[None, :] + noise
    return spectral.TimeHistory(samples, scenario.dt, scenario.q,
                                name=f'record{s:03d}')


def draw_evidences(true_hyper, evidence_cov, n_datasets, seed=0):
    """Evidence drawn from the hierarchical model itself.

    ``lambda_hat_s = lambda_s + e_s`` with ``lambda_s ~ N(mu, Sigma)`` and
    ``e_s ~ N(0, cov_s)``; `evidence_cov` is one matrix for all records or
    a sequence of them.  Return ``(evidences, true_lambdas)``.
    """
    evidence_cov = numpy.asarray(evidence_cov, dtype=float)
    d = true_hyper.dim
    if evidence_cov.ndim == 2:
        evidence_cov = numpy.broadcast_to(evidence_cov,
                                          (n_datasets, d, d))
    if evidence_cov.shape != (n_datasets, d, d):
        raise ValueError("evidence covariances do not conform")
    evidences, truths = [], []
    for s in range(n_datasets):
        rng = _rng(seed, s)
        lam = rng.multivariate_normal(true_hyper.mu, true_hyper.cov,
                                      method='eigh')
        error = rng.multivariate_normal(numpy.zeros(d), evidence_cov[s],
                                        method='eigh')
        evidences.append(DatasetEvidence(lam + error, evidence_cov[s],
                                         dataset_id=s))
        truths.append(lam)
    return evidences, numpy.array(truths)
