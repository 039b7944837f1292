"""Common code for hbfft tests."""

import contextlib
import unittest

import numpy

from hbfft import records
from hbfft.hierarchy import DatasetEvidence, HyperParams
from hbfft.likelihood import ModalParams
from hbfft.spectral import FrequencyBand, fft_frequencies


# Record layout of the single-mode scenario used across tests.
N = 12000
DT = 0.005
BAND = FrequencyBand(3.2, 5.2)


class DirectReadNotUsedError(Exception):
    """The HDF5 filter pipeline was used instead of direct Blosc2 reading"""
    pass


@contextlib.contextmanager
def checking_direct_read():
    # Force an exception if the filter pipeline is used.
    orig_read = records._filter_read

    def failing_read(dataset, start, stop):
        raise DirectReadNotUsedError(dataset.name)

    records._filter_read = failing_read
    try:
        yield
    finally:
        records._filter_read = orig_read


class TestCase(unittest.TestCase):
    def assertArrayClose(self, actual, desired, rtol=1e-10, atol=0.0,
                         msg=''):
        numpy.testing.assert_allclose(actual, desired, rtol=rtol, atol=atol,
                                      err_msg=msg)

    def assertPSD(self, a, tol=1e-10):
        a = numpy.asarray(a)
        scale = max(numpy.abs(a).max(initial=0.0), 1.0)
        self.assertGreaterEqual(numpy.linalg.eigvalsh((a + a.T) / 2).min(),
                                -tol * scale)


def random_spd(rng, d, scale=1.0):
    a = rng.standard_normal((d, d + 3))
    return scale * (a @ a.T) / (d + 3)


def random_gaussian_pair(rng, d):
    return (rng.standard_normal(d), random_spd(rng, d),
            rng.standard_normal(d), random_spd(rng, d))


def random_evidences(rng, d, n_d, scale=0.1):
    """Evidence without the modal layout."""
    return [DatasetEvidence(rng.standard_normal(d),
                            random_spd(rng, d, scale ** 2), dataset_id=s)
            for s in range(n_d)]


def random_hyper(rng, d, scale=0.2):
    return HyperParams(rng.standard_normal(d), random_spd(rng, d, scale ** 2))


def modal_truth(f=4.2, xi=0.02, phi=(1.0, 2.0, 3.0), S=1e-2, Se=1e-4):
    return ModalParams.normalized(f, xi, phi, S, Se)


def grid():
    return fft_frequencies(N, DT)


def hierarchical_scenario():
    """Hyper model over ``(f, xi, phi)`` with one mode shape entry."""
    mu = numpy.array([4.2, 0.05, 0.6])
    std = numpy.array([0.035, 0.005, 0.02])
    evidence_std = numpy.array([0.01, 0.01, 0.02])
    return (HyperParams(mu, numpy.diag(std ** 2)),
            numpy.diag(evidence_std ** 2))
