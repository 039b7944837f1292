"""Scaled FFT, band selection and singular value spectra."""

import numpy

from hbfft import spectral
from hbfft.spectral import EmptyBandError, FrequencyBand, TimeHistory
from hbfft.tests.common import BAND, DT, N, TestCase


class ScaledFftTestCase(TestCase):
    def setUp(self):
        self.rng = numpy.random.default_rng(11)

    def test_lines_between_dc_and_nyquist(self):
        th = TimeHistory(self.rng.standard_normal((2, N)), DT)
        lines = spectral.scaled_fft(th)
        self.assertEqual(len(lines), N // 2 - 1)
        self.assertAlmostEqual(lines[0].freq, 1 / (N * DT))
        self.assertLess(lines[-1].freq, th.nyquist)
        self.assertEqual(lines[0].values.shape, (2,))

    def test_scaling(self):
        samples = self.rng.standard_normal((3, 1000))
        lines = spectral.scaled_fft(TimeHistory(samples, 0.01))
        full = numpy.fft.fft(samples, axis=1) * numpy.sqrt(0.01 / 1000)
        for (k, line) in enumerate(lines, start=1):
            self.assertArrayClose(line.values, full[:, k], rtol=1e-12,
                                  atol=1e-14)

    def test_white_noise_density(self):
        """White noise of variance v has spectral density v dt"""
        v = 4.0
        th = TimeHistory(numpy.sqrt(v) * self.rng.standard_normal((1, N)),
                         DT)
        _, values = spectral.stack_lines(spectral.scaled_fft(th))
        power = numpy.abs(values[:, 0]) ** 2
        se = power.std() / numpy.sqrt(power.size)
        self.assertLess(abs(power.mean() - v * DT), 4 * se)

    def test_sine_peak(self):
        t = numpy.arange(N) * DT
        f0 = 250 / (N * DT)
        th = TimeHistory(numpy.sin(2 * numpy.pi * f0 * t)[None, :], DT)
        freqs, values = spectral.stack_lines(spectral.scaled_fft(th))
        self.assertAlmostEqual(freqs[numpy.argmax(abs(values[:, 0]))], f0)

    def test_demean(self):
        th = TimeHistory(5.0 + numpy.zeros((1, 64)), 0.1)
        _, values = spectral.stack_lines(spectral.scaled_fft(th,
                                                             demean=True))
        self.assertArrayClose(abs(values), 0.0, atol=1e-12)

    def test_invalid_records(self):
        with self.assertRaises(ValueError):
            TimeHistory(numpy.zeros((2, 10)), 0.0)
        with self.assertRaises(ValueError):
            TimeHistory(numpy.full((2, 10), numpy.nan), 0.1)
        with self.assertRaises(ValueError):
            TimeHistory(numpy.zeros((2, 10)), 0.1, response_order=3)


class BandSelectTestCase(TestCase):
    def setUp(self):
        rng = numpy.random.default_rng(12)
        self.lines = spectral.scaled_fft(
            TimeHistory(rng.standard_normal((3, N)), DT))

    def test_band_includes_edges(self):
        """Closed band: 3.2 and 5.2 Hz fall on lines 192 and 312"""
        selected = spectral.band_select(self.lines, BAND)
        self.assertEqual(len(selected), 121)
        self.assertAlmostEqual(selected[0].freq, 3.2)
        self.assertAlmostEqual(selected[-1].freq, 5.2)

    def test_order_preserved(self):
        freqs = [line.freq for line in spectral.band_select(self.lines,
                                                            BAND)]
        self.assertTrue(numpy.all(numpy.diff(freqs) > 0))

    def test_empty_band(self):
        df = 1 / (N * DT)
        band = FrequencyBand(3.2 + 0.25 * df, 3.2 + 0.75 * df)
        with self.assertRaises(EmptyBandError):
            spectral.band_select(self.lines, band)

    def test_single_line_band(self):
        df = 1 / (N * DT)
        selected = spectral.band_select(
            self.lines, FrequencyBand(3.2 - 0.1 * df, 3.2 + 0.1 * df))
        self.assertEqual(len(selected), 1)

    def test_invalid_band(self):
        with self.assertRaises(ValueError):
            FrequencyBand(5.2, 3.2)
        with self.assertRaises(ValueError):
            FrequencyBand(0.0, 3.2)

    def test_band_above_nyquist(self):
        with self.assertRaises(EmptyBandError):
            FrequencyBand(90.0, 110.0).check_nyquist(0.5 / DT)


class SingularValueSpectrumTestCase(TestCase):
    def setUp(self):
        self.rng = numpy.random.default_rng(13)

    def test_sorted_and_non_negative(self):
        records = [TimeHistory(self.rng.standard_normal((3, 2048)), DT)
                   for _ in range(4)]
        freqs, values = spectral.singular_value_spectrum(records)
        self.assertEqual(values.shape, (freqs.size, 3))
        self.assertTrue(numpy.all(values >= 0))
        self.assertTrue(numpy.all(numpy.diff(values, axis=1) <= 0))

    def test_single_channel_is_average_power(self):
        records = [TimeHistory(self.rng.standard_normal((1, 512)), DT)
                   for _ in range(3)]
        _, values = spectral.singular_value_spectrum(records)
        power = numpy.mean(
            [abs(spectral.stack_lines(spectral.scaled_fft(th))[1][:, 0]) ** 2
             for th in records], axis=0)
        self.assertArrayClose(values[:, 0], power, rtol=1e-10)

    def test_mode_peak(self):
        """A shared sinusoid dominates the first singular value"""
        t = numpy.arange(4096) * DT
        f0 = 200 / (4096 * DT)
        phi = numpy.array([1.0, -2.0, 0.5])
        records = [TimeHistory(
            phi[:, None] * numpy.sin(2 * numpy.pi * f0 * t + p)
            + 0.01 * self.rng.standard_normal((3, 4096)), DT)
            for p in (0.0, 1.0, 2.0)]
        freqs, values = spectral.singular_value_spectrum(records)
        self.assertAlmostEqual(freqs[numpy.argmax(values[:, 0])], f0)

    def test_truncates_to_shortest(self):
        records = [TimeHistory(self.rng.standard_normal((2, n)), DT)
                   for n in (1000, 1200)]
        freqs, _ = spectral.singular_value_spectrum(records)
        self.assertEqual(freqs.size, 499)

    def test_inconsistent_channels(self):
        records = [TimeHistory(self.rng.standard_normal((c, 100)), DT)
                   for c in (2, 3)]
        with self.assertRaises(ValueError):
            spectral.singular_value_spectrum(records)

    def test_no_records(self):
        with self.assertRaises(ValueError):
            spectral.singular_value_spectrum([])
