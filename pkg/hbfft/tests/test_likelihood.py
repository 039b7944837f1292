"""Single-record Bayesian FFT identification."""

import numpy

from hbfft import likelihood, spectral, synth
from hbfft.likelihood import (IdentificationError, ModalParams,
                              TangentChart, UnidentifiableBandError)
from hbfft.tests.common import BAND, TestCase, grid, modal_truth


def band_lines(theta, seed, band=BAND):
    return synth.generate_fft_band(theta, band, grid(), seed=seed)


class ModalParamsTestCase(TestCase):
    def test_requires_unit_mode_shape(self):
        with self.assertRaises(ValueError):
            ModalParams(4.0, 0.01, [1.0, 1.0], 1.0, 1.0)

    def test_requires_positive_scalars(self):
        with self.assertRaises(ValueError):
            ModalParams.normalized(4.0, -0.01, [1.0, 1.0], 1.0, 1.0)
        with self.assertRaises(ValueError):
            ModalParams.normalized(4.0, 0.01, [1.0, 1.0], 1.0, 0.0)

    def test_vector_layout(self):
        theta = modal_truth()
        self.assertEqual(theta.names(),
                         ['f', 'xi', 'phi1', 'phi2', 'phi3', 'S', 'Se'])
        self.assertArrayClose(ModalParams.from_vector(theta.vector()).phi,
                              theta.phi)


class NllTestCase(TestCase):
    def test_fast_equals_direct(self):
        rng = numpy.random.default_rng(21)
        for i in range(1000):
            n = 1 + i % 6
            theta = ModalParams.normalized(
                rng.uniform(1, 10), rng.uniform(0.001, 0.1),
                rng.standard_normal(n), rng.uniform(0.1, 10),
                rng.uniform(0.01, 1))
            nf = 5
            lines = [spectral.FftLine(
                f, rng.standard_normal(n) + 1j * rng.standard_normal(n))
                for f in numpy.linspace(0.8, 1.2, nf) * theta.f]
            self.assertArrayClose(likelihood.nll(theta, lines),
                                  likelihood.nll_direct(theta, lines),
                                  rtol=1e-10)

    def test_response_order(self):
        theta = modal_truth()
        lines = band_lines(theta, 0)
        for q in (1, 2):
            self.assertArrayClose(likelihood.nll(theta, lines, q),
                                  likelihood.nll_direct(theta, lines, q),
                                  rtol=1e-10)

    def test_psd_model_structure(self):
        theta = modal_truth()
        e = likelihood.psd_model(theta, 4.1)
        d = likelihood.dynamic_amplification(4.1, theta.f, theta.xi)
        evals = numpy.linalg.eigvalsh(e)
        self.assertArrayClose(evals, [theta.Se, theta.Se,
                                      theta.S * d + theta.Se])

    def test_frf(self):
        f_k = numpy.linspace(3.0, 5.0, 11)
        for q in (0, 1, 2):
            h = likelihood.frf(f_k, 4.2, 0.02, q)
            self.assertArrayClose(
                numpy.abs(h) ** 2,
                likelihood.dynamic_amplification(f_k, 4.2, 0.02, q),
                rtol=1e-12)
        # At resonance the response is i / (2 xi).
        self.assertArrayClose(likelihood.frf(4.2, 4.2, 0.02), 25j)

    def test_truth_beats_shifted_frequency(self):
        theta = modal_truth()
        lines = band_lines(theta, 1)
        shifted = ModalParams(theta.f * 1.05, theta.xi, theta.phi,
                              theta.S, theta.Se)
        self.assertLess(likelihood.nll(theta, lines),
                        likelihood.nll(shifted, lines))

    def test_non_positive_densities(self):
        freqs, values = spectral.stack_lines(band_lines(modal_truth(), 2))
        with self.assertRaises(ValueError):
            likelihood._nll_arrays(4.2, 0.02, numpy.ones(3) / numpy.sqrt(3),
                                   0.0, 1.0, freqs, values, 0)


class TangentChartTestCase(TestCase):
    def test_basis(self):
        phi0 = numpy.array([1.0, 2.0, 2.0]) / 3
        chart = TangentChart(phi0)
        self.assertArrayClose(chart.basis.T @ chart.basis, numpy.eye(2),
                              atol=1e-12)
        self.assertArrayClose(phi0 @ chart.basis, numpy.zeros(2),
                              atol=1e-12)

    def test_chart_coordinates(self):
        theta = modal_truth()
        chart = TangentChart(theta.phi)
        y = chart.to_chart(theta)
        self.assertArrayClose(y[2:-2], 0.0, atol=1e-12)
        back = chart.to_theta(y)
        self.assertArrayClose(back.vector(), theta.vector(), rtol=1e-12)

    def test_single_channel(self):
        theta = ModalParams.normalized(4.2, 0.02, [1.0], 1.0, 0.1)
        chart = TangentChart(theta.phi)
        self.assertEqual(chart.size, 4)
        self.assertArrayClose(chart.to_theta(chart.to_chart(theta)).vector(),
                              theta.vector(), rtol=1e-12)

    def test_analytic_gradient(self):
        theta = modal_truth()
        freqs, values = spectral.stack_lines(band_lines(theta, 3))
        rng = numpy.random.default_rng(22)
        chart = TangentChart(theta.phi)
        for q in (0, 1, 2):
            y = chart.to_chart(theta) + 0.05 * rng.standard_normal(
                chart.size)
            _, grad = likelihood.chart_objective(y, chart, freqs, values, q)
            numeric = likelihood.numerical_gradient(
                lambda yy: likelihood.chart_objective(
                    yy, chart, freqs, values, q)[0], y)
            self.assertArrayClose(grad, numeric, rtol=1e-5,
                                  atol=1e-6 * numpy.abs(numeric).max())


class IdentifyTestCase(TestCase):
    def test_recovery_within_laplace_sd(self):
        """MPV within 3 posterior SDs of the truth for most seeds"""
        theta = modal_truth()
        seeds = range(50)
        hits = numpy.zeros(theta.n + 4)
        f_hat, f_sd = [], []
        for seed in seeds:
            ident = likelihood.identify(band_lines(theta, 100 + seed))
            self.assertTrue(ident.converged)
            err = ident.theta_hat.vector() - theta.vector()
            hits += abs(err) <= 3 * ident.posterior.std
            f_hat.append(ident.theta_hat.f)
            f_sd.append(ident.posterior.std[0])
        self.assertTrue(numpy.all(hits >= 0.9 * len(seeds)), hits)
        # Scatter of the frequency matches the reported uncertainty.
        ratio = numpy.std(f_hat, ddof=1) / numpy.mean(f_sd)
        self.assertGreater(ratio, 0.5)
        self.assertLess(ratio, 2.0)

    def test_fixed_point(self):
        theta = modal_truth()
        lines = band_lines(theta, 4)
        first = likelihood.mpv(lines, None)
        again = likelihood.mpv(lines, first)
        self.assertArrayClose(again.vector(), first.vector(), rtol=1e-6)

    def test_scale_invariance(self):
        """Scaling the data scales S and Se only"""
        theta = modal_truth()
        lines = band_lines(theta, 5)
        c = 10.0
        scaled = [spectral.FftLine(line.freq, c * line.values)
                  for line in lines]
        a = likelihood.mpv(lines, None)
        b = likelihood.mpv(scaled, None)
        self.assertArrayClose(b.vector()[:-2], a.vector()[:-2], rtol=1e-5,
                              atol=1e-8)
        self.assertArrayClose(b.vector()[-2:], c ** 2 * a.vector()[-2:],
                              rtol=1e-5)

    def test_numeric_gradient_option(self):
        theta = modal_truth()
        lines = band_lines(theta, 6)
        a = likelihood.mpv(lines, None)
        b = likelihood.mpv(lines, None, gradient='numeric')
        self.assertArrayClose(b.vector(), a.vector(), rtol=1e-5)

    def test_velocity_record(self):
        theta = modal_truth(S=1e2)
        lines = synth.generate_fft_band(theta, BAND, grid(), seed=7, q=1)
        ident = likelihood.identify(lines, q=1)
        self.assertLess(abs(ident.theta_hat.f - theta.f),
                        4 * ident.posterior.std[0])

    def test_too_few_lines(self):
        lines = band_lines(modal_truth(), 8)[:5]
        with self.assertRaises(IdentificationError):
            likelihood.identify(lines)

    def test_initial_frequency_outside_band(self):
        lines = band_lines(modal_truth(), 9)
        with self.assertRaises(IdentificationError):
            likelihood.identify(lines, modal_truth(f=8.0))

    def test_initial_guess(self):
        theta = modal_truth()
        init = likelihood.initial_guess(band_lines(theta, 10))
        self.assertLess(abs(init.f - theta.f), 0.1)
        self.assertGreater(abs(init.phi @ theta.phi), 0.99)


class LaplaceTestCase(TestCase):
    def setUp(self):
        self.theta = modal_truth()
        self.lines = band_lines(self.theta, 11)
        self.ident = likelihood.identify(self.lines)

    def test_covariance_symmetric_psd(self):
        cov = self.ident.posterior.cov
        self.assertArrayClose(cov, cov.T, atol=0)
        self.assertPSD(cov)

    def test_mode_shape_direction_is_null(self):
        phi = self.ident.theta_hat.phi
        cov = self.ident.posterior.cov
        block = cov[2:2 + phi.size, 2:2 + phi.size]
        self.assertLess(numpy.linalg.norm(block @ phi),
                        1e-8 * numpy.linalg.norm(block))

    def test_split_evidence(self):
        evidence, nuisance = likelihood.split_evidence(self.ident.posterior,
                                                       'a')
        n = self.theta.n
        self.assertEqual(evidence.dim, n + 2)
        self.assertEqual(evidence.n_shape, n)
        self.assertEqual(evidence.dataset_id, 'a')
        self.assertEqual(nuisance.dim, 2)
        self.assertArrayClose(nuisance.mean, [self.ident.theta_hat.S,
                                              self.ident.theta_hat.Se])

    def test_unidentifiable(self):
        with self.assertRaises(UnidentifiableBandError) as cm:
            likelihood.laplace_covariance(numpy.diag([1.0, -1.0]),
                                          ['a', 'b'])
        self.assertArrayClose(abs(cm.exception.direction), [0.0, 1.0])

    def test_numerical_hessian(self):
        a = numpy.array([[2.0, 0.5], [0.5, 1.0]])
        hess = likelihood.numerical_hessian(lambda x: 0.5 * x @ a @ x,
                                            numpy.array([0.3, -0.2]))
        self.assertArrayClose(hess, a, rtol=1e-5)
