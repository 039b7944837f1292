"""Scaled FFT of multi-channel records and resonance band extraction.

A `TimeHistory` holds one record (channels by time steps).  `scaled_fft()`
turns it into `FftLine` objects scaled by ``sqrt(dt/N)`` so that their second
moments are (two-sided) spectral densities.  Lines between DC and Nyquist
(both excluded) are kept.  `band_select()` keeps the lines of a closed
`FrequencyBand`, and `singular_value_spectrum()` averages periodogram
matrices over several records to help choosing bands.
"""

import dataclasses
import logging

import numpy
import scipy.fft


logger = logging.getLogger(__name__)

RESPONSE_ORDERS = {0: 'acceleration', 1: 'velocity', 2: 'displacement'}


class EmptyBandError(ValueError):
    """A frequency band contains no FFT line of the record."""
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class TimeHistory:
    """A multi-channel sampled vibration record.

    `samples` has one row per channel and one column per time step.
    `response_order` is 0, 1 or 2 for acceleration, velocity or displacement
    data.
    """

    samples: numpy.ndarray
    dt: float
    response_order: int = 0
    name: str = None

    def __post_init__(self):
        samples = numpy.atleast_2d(numpy.asarray(self.samples, dtype=float))
        if samples.ndim != 2 or samples.shape[1] < 2:
            raise ValueError("a record needs >= 1 channel and >= 2 samples")
        if not numpy.all(numpy.isfinite(samples)):
            raise ValueError("record contains non-finite samples")
        if not self.dt > 0:
            raise ValueError(f"sampling interval must be positive: {self.dt}")
        if self.response_order not in RESPONSE_ORDERS:
            raise ValueError(f"invalid response order: {self.response_order}")
        samples.flags.writeable = False
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'dt', float(self.dt))

    @property
    def channels(self):
        return self.samples.shape[0]

    @property
    def length(self):
        return self.samples.shape[1]

    @property
    def nyquist(self):
        return 0.5 / self.dt


@dataclasses.dataclass(frozen=True, eq=False)
class FftLine:
    """Scaled FFT values of all channels at one frequency (Hz)."""

    freq: float
    values: numpy.ndarray


@dataclasses.dataclass(frozen=True)
class FrequencyBand:
    """Closed frequency interval ``[f_lb, f_ub]`` in Hz."""

    f_lb: float
    f_ub: float

    def __post_init__(self):
        if not 0 < self.f_lb < self.f_ub:
            raise ValueError(
                f"invalid band [{self.f_lb}, {self.f_ub}]: "
                f"need 0 < f_lb < f_ub")

    def check_nyquist(self, nyquist):
        if self.f_ub >= nyquist:
            raise EmptyBandError(
                f"band [{self.f_lb}, {self.f_ub}] Hz reaches "
                f"the Nyquist frequency {nyquist} Hz")


def fft_frequencies(length, dt):
    """Frequencies of the lines returned by `scaled_fft()`."""
    return numpy.arange(1, length // 2) / (length * dt)


def scaled_fft_array(samples, dt, demean=False):
    """Scaled FFT of a channels-by-time array.

    Return ``(freqs, values)`` with `values` of shape ``(lines, channels)``.
    """
    samples = numpy.atleast_2d(numpy.asarray(samples, dtype=float))
    if not numpy.all(numpy.isfinite(samples)):
        raise ValueError("record contains non-finite samples")
    if demean:
        samples = samples - samples.mean(axis=1, keepdims=True)
    length = samples.shape[1]
    nq = length // 2
    spectrum = scipy.fft.fft(samples, axis=1)[:, 1:nq]
    return (fft_frequencies(length, dt),
            numpy.sqrt(dt / length) * spectrum.T)


def scaled_fft(th, demean=False):
    """Return the `FftLine` list of the given `TimeHistory`.

    No window or detrending is applied; `demean` removes the channel means
    first.
    """
    freqs, values = scaled_fft_array(th.samples, th.dt, demean)
    return [FftLine(float(f), v) for (f, v) in zip(freqs, values)]


def stack_lines(lines):
    """Return ``(freqs, values)`` arrays for a list of `FftLine` objects."""
    if not lines:
        return numpy.empty(0), numpy.empty((0, 0), dtype=complex)
    freqs = numpy.array([line.freq for line in lines], dtype=float)
    values = numpy.array([line.values for line in lines], dtype=complex)
    return freqs, values


def band_select(lines, band):
    """Return the lines with ``band.f_lb <= freq <= band.f_ub``, in order.

    Raise `EmptyBandError` if no line falls inside the band.
    """
    if not lines:
        raise EmptyBandError("no FFT lines to select from")
    freqs = numpy.array([line.freq for line in lines])
    # Slack for band edges computed as k / (N dt) landing on a bin.
    df = numpy.min(numpy.diff(freqs)) if freqs.size > 1 else freqs[0]
    slack = 1e-9 * df
    keep = (freqs >= band.f_lb - slack) & (freqs <= band.f_ub + slack)
    if not keep.any():
        raise EmptyBandError(
            f"band [{band.f_lb}, {band.f_ub}] Hz contains no FFT line "
            f"(resolution {df:.4g} Hz, range {freqs[0]:.4g}"
            f"-{freqs[-1]:.4g} Hz)")
    return [line for (line, k) in zip(lines, keep) if k]


def singular_value_spectrum(datasets, demean=False):
    """Singular values of the periodogram matrix averaged over datasets.

    Records longer than the shortest one are truncated.  Return
    ``(freqs, values)`` with `values` of shape ``(lines, channels)``, sorted
    in descending order along the last axis.
    """
    datasets = list(datasets)
    if not datasets:
        raise ValueError("no datasets for the singular value spectrum")
    channels = {th.channels for th in datasets}
    if len(channels) != 1:
        raise ValueError(f"heterogeneous channel counts: {sorted(channels)}")
    dts = {th.dt for th in datasets}
    if len(dts) != 1:
        raise ValueError(f"heterogeneous sampling intervals: {sorted(dts)}")
    length = min(th.length for th in datasets)
    if any(th.length != length for th in datasets):
        logger.info("Truncating records to %d samples", length)

    dt = datasets[0].dt
    psd = 0
    for th in datasets:
        freqs, values = scaled_fft_array(th.samples[:, :length], dt, demean)
        psd = psd + numpy.einsum('ki,kj->kij', values, values.conj())
    psd = psd / len(datasets)
    # Hermitian PSD: singular values are the eigenvalues.
    values = numpy.linalg.eigvalsh(psd)[:, ::-1]
    return freqs, numpy.clip(values, 0, None)
