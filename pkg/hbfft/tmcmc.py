"""Transitional MCMC sampling of the hyper-parameter posterior.

`sample_hyper()` draws packed hyper-parameter vectors from the posterior
``exp(-hyper_nll)`` restricted to a uniform `PriorBox`, by tempering from
the prior to the posterior in stages (`tmcmc()`).  Covariances are sampled
through a `ChartLayout` (eigenvalues over a fixed basis) or, uncharted,
through a `CorrelationLayout` (standard deviations and correlations).

The samples turn into Gaussian mixtures for the posterior of one record
(`mixture_conditional()`) and for an unobserved record
(`mixture_predictive()`), whose moments are computed exactly.

Random streams are derived from ``(seed, stage, chain)``, so results do not
depend on the number of threads.
"""

import concurrent.futures
import dataclasses
import logging

import numpy
import scipy.optimize
import scipy.special

from . import hierarchy
from .gaussian import DegenerateEvidenceError, NotPositiveDefiniteError
from .hierarchy import (ChartLayout, CorrelationLayout, EigenbasisChart,
                        PriorBox)


logger = logging.getLogger(__name__)

min_samples = 100


class DegenerateStageError(RuntimeError):
    """A tempering stage has no sample with non-zero weight."""
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class HyperSampleSet:
    """Posterior samples of packed hyper-parameters.

    `log_target_values` holds ``-hyper_nll`` at every sample and
    `log_evidence` the estimate of the log normalizing constant (relative
    to the uniform prior density).
    """

    samples: numpy.ndarray
    log_target_values: numpy.ndarray
    stage_exponents: numpy.ndarray
    rng_seed: object
    layout: object
    log_evidence: float = numpy.nan

    def __post_init__(self):
        samples = numpy.atleast_2d(numpy.asarray(self.samples, dtype=float))
        values = numpy.asarray(self.log_target_values, dtype=float)
        exponents = numpy.asarray(self.stage_exponents, dtype=float)
        if values.shape != (samples.shape[0],):
            raise ValueError("one target value per sample is needed")
        if (exponents[0] != 0 or exponents[-1] != 1
                or numpy.any(numpy.diff(exponents) <= 0)):
            raise ValueError("stage exponents must rise from 0 to 1")
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'log_target_values', values)
        object.__setattr__(self, 'stage_exponents', exponents)

    def __len__(self):
        return self.samples.shape[0]

    def hyper_params(self):
        """The samples as `HyperParams` objects."""
        return [self.layout.unpack(x) for x in self.samples]


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture of Gaussian components."""

    components: list
    weights: numpy.ndarray = None

    def __post_init__(self):
        if not self.components:
            raise ValueError("empty mixture")
        if self.weights is None:
            weights = numpy.full(len(self.components),
                                 1 / len(self.components))
        else:
            weights = numpy.asarray(self.weights, dtype=float)
        if (weights.shape != (len(self.components),)
                or numpy.any(weights < 0)
                or abs(weights.sum() - 1) > 1e-12):
            raise ValueError("mixture weights must be >= 0 and sum to 1")
        object.__setattr__(self, 'weights', weights)

    def moments(self):
        """Exact mean and covariance (law of total covariance)."""
        means = numpy.array([c.mean for c in self.components])
        covs = numpy.array([c.cov for c in self.components])
        w = self.weights
        mean = w @ means
        resid = means - mean
        cov = (numpy.einsum('s,sij->ij', w, covs)
               + numpy.einsum('s,si,sj->ij', w, resid, resid))
        return mean, (cov + cov.T) / 2

    def sample(self, size, rng):
        """Draw `size` points (used to check the moments)."""
        counts = rng.multinomial(size, self.weights)
        out = [rng.multivariate_normal(c.mean, c.cov, size=k,
                                       method='eigh')
               for (c, k) in zip(self.components, counts) if k]
        return numpy.concatenate(out)


def _rng(seed, *keys):
    entropy = [int(s) for s in numpy.atleast_1d(seed)] + list(keys)
    return numpy.random.default_rng(entropy)


def _weight_cov(log_w):
    w = numpy.exp(log_w - log_w.max())
    return w.std() / w.mean()


def next_exponent(log_likelihood, p, cov_target=1.0):
    """Next stage exponent: CoV of the incremental weights is `cov_target`."""
    finite = log_likelihood[numpy.isfinite(log_likelihood)]
    if _weight_cov((1 - p) * finite) <= cov_target:
        return 1.0
    step = scipy.optimize.brentq(
        lambda dp: _weight_cov(dp * finite) - cov_target, 0.0, 1 - p,
        xtol=1e-12)
    return p + step


def _proposal_root(samples, weights, beta):
    mean = weights @ samples
    resid = samples - mean
    cov = beta ** 2 * (weights[:, None] * resid).T @ resid
    evals, evecs = numpy.linalg.eigh((cov + cov.T) / 2)
    return evecs * numpy.sqrt(evals.clip(0, None))


def _prior_draws(log_likelihood, box, n_samples, seed, max_tries):
    rng = _rng(seed, 0)
    samples, values = [], []
    tries = 0
    while len(samples) < n_samples:
        if tries >= max_tries:
            raise DegenerateStageError(
                f"only {len(samples)} of {tries} prior draws have a "
                f"finite likelihood")
        x = rng.uniform(box.lower, box.upper)
        tries += 1
        value = log_likelihood(x)
        if numpy.isfinite(value):
            samples.append(x)
            values.append(value)
    return numpy.array(samples), numpy.array(values)


def tmcmc(log_likelihood, box, n_samples, seed, cov_target=1.0, beta=0.2,
          chain_steps=3, max_stages=200, threads=None):
    """Sample ``exp(log_likelihood)`` under the uniform prior of `box`.

    Return ``(samples, log_likelihood_values, stage_exponents,
    log_evidence)``.  `log_likelihood` may return ``-inf`` for invalid
    points; Metropolis moves leaving the box are rejected.
    """
    samples, values = _prior_draws(log_likelihood, box, n_samples, seed,
                                   max_tries=100 * n_samples)
    exponents = [0.0]
    log_evidence = 0.0
    stage = 0
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        while exponents[-1] < 1:
            stage += 1
            if stage > max_stages:
                raise DegenerateStageError(
                    f"no convergence to the posterior in {max_stages} "
                    f"stages")
            p = exponents[-1]
            if not numpy.isfinite(values).any():
                raise DegenerateStageError(
                    f"all weights vanish at stage {stage}")
            p_next = next_exponent(values, p, cov_target)
            log_w = (p_next - p) * values
            log_w[~numpy.isfinite(log_w)] = -numpy.inf
            log_evidence += (scipy.special.logsumexp(log_w)
                             - numpy.log(n_samples))
            weights = numpy.exp(log_w - log_w.max())
            weights /= weights.sum()

            rng = _rng(seed, stage)
            positions = (rng.random() + numpy.arange(n_samples)) / n_samples
            starts = numpy.searchsorted(numpy.cumsum(weights), positions)
            starts = numpy.minimum(starts, n_samples - 1)
            root = _proposal_root(samples, weights, beta)

            def chain(k, p_next=p_next, root=root, starts=starts,
                      stage=stage, samples=samples, values=values):
                chain_rng = _rng(seed, stage, k)
                x, value = samples[starts[k]], values[starts[k]]
                accepted = 0
                for _ in range(chain_steps):
                    y = x + root @ chain_rng.standard_normal(x.size)
                    u = chain_rng.random()
                    if not box.contains(y):
                        continue
                    y_value = log_likelihood(y)
                    if (numpy.isfinite(y_value)
                            and numpy.log(u) < p_next * (y_value - value)):
                        x, value = y, y_value
                        accepted += 1
                return x, value, accepted

            results = list(pool.map(chain, range(n_samples)))
            samples = numpy.array([r[0] for r in results])
            values = numpy.array([r[1] for r in results])
            rate = sum(r[2] for r in results) / (n_samples * chain_steps)
            exponents.append(p_next)
            logger.info("TMCMC stage %d: exponent %.4g, acceptance %.2f",
                        stage, p_next, rate)
    return samples, values, numpy.array(exponents), log_evidence


def _dim_from_box(box, chart):
    if chart is not None:
        return chart.dim
    d = (-3 + numpy.sqrt(9 + 8 * box.size)) / 2
    if d != int(d):
        raise ValueError(f"prior box of size {box.size} does not fit "
                         f"a correlation layout")
    return int(d)


def hyper_log_likelihood(evidences, layout):
    """``x -> -hyper_nll(layout.unpack(x))``, ``-inf`` when invalid."""
    evidences = list(evidences)

    def log_likelihood(x):
        try:
            psi = layout.unpack(x)
        except (NotPositiveDefiniteError, ValueError):
            return -numpy.inf
        if not evidences:
            return 0.0
        try:
            return -float(hierarchy.hyper_nll_terms(
                psi.mu, psi.cov, evidences).sum())
        except DegenerateEvidenceError:
            return -numpy.inf
    return log_likelihood


def sample_hyper(evidences, prior_box, chart=None, n_samples=2000, seed=0,
                 threads=None, **options):
    """TMCMC samples of the hyper posterior.

    Samples are packed by ``ChartLayout(chart)`` if `chart` is given, by
    `CorrelationLayout` otherwise; `prior_box` is over those coordinates.
    An empty `evidences` samples the prior.  Further `options` go to
    `tmcmc()`.
    """
    evidences = list(evidences)
    if n_samples < min_samples:
        raise ValueError(f"at least {min_samples} samples are needed")
    d = evidences[0].dim if evidences else _dim_from_box(prior_box, chart)
    n_shape = evidences[0].n_shape if evidences else None
    if chart is not None:
        layout = ChartLayout(chart, n_shape)
    else:
        layout = CorrelationLayout(d, n_shape)
    if layout.size != prior_box.size:
        raise ValueError(f"prior box has {prior_box.size} coordinates, "
                         f"the layout {layout.size}")
    samples, values, exponents, log_evidence = tmcmc(
        hyper_log_likelihood(evidences, layout), prior_box, n_samples, seed,
        threads=threads, **options)
    logger.info("TMCMC finished after %d stages (log evidence %.6g)",
                len(exponents) - 1, log_evidence)
    return HyperSampleSet(samples, values, exponents, seed, layout,
                          log_evidence)


def diagonal_pairwise_target(evidences, p, box=None):
    """Log-density of ``(mu_p, var_p)`` when evidence covariances are diagonal.

    ``sum_s ln N(mu_p | lambda_hat_s[p], var_p + cov_s[p, p])``, ``-inf``
    outside the two-dimensional `box` or for negative variances.  Raise
    `ValueError` if an evidence covariance is not diagonal.
    """
    evidences = list(evidences)
    for ev in evidences:
        off = ev.cov - numpy.diag(numpy.diag(ev.cov))
        tol = max(1e-12 * numpy.trace(ev.cov), 1e-300)
        if numpy.abs(off).max(initial=0.0) >= tol:
            raise ValueError(f"evidence {ev.dataset_id!r} is not diagonal")
    lam = numpy.array([ev.lambda_hat[p] for ev in evidences])
    var_hat = numpy.array([ev.cov[p, p] for ev in evidences])

    def target(mu_p, var_p):
        if var_p < 0 or (box is not None
                         and not box.contains([mu_p, var_p])):
            return -numpy.inf
        total = var_p + var_hat
        if numpy.any(total <= 0):
            return -numpy.inf
        return float(-0.5 * (numpy.log(2 * numpy.pi * total)
                             + (mu_p - lam) ** 2 / total).sum())
    return target


def sample_hyper_diagonal(evidences, prior_box, n_samples=2000, seed=0,
                          threads=None, **options):
    """Independent two-parameter TMCMC runs per coordinate.

    Valid when all evidence covariances are diagonal and Sigma is sampled
    diagonal.  `prior_box` is over ``ChartLayout`` coordinates with the
    identity basis (means, then variances).  The i-th samples of all runs
    form the i-th joint sample; the stage exponents are the union of those
    of all runs.
    """
    evidences = list(evidences)
    d = evidences[0].dim
    layout = ChartLayout(EigenbasisChart(numpy.eye(d), numpy.zeros(d)),
                         evidences[0].n_shape)
    columns = numpy.empty((n_samples, 2 * d))
    total = numpy.zeros(n_samples)
    exponents = []
    log_evidence = 0.0
    for p in range(d):
        box = PriorBox([prior_box.lower[p], prior_box.lower[d + p]],
                       [prior_box.upper[p], prior_box.upper[d + p]])
        target = diagonal_pairwise_target(evidences, p, box)
        samples, values, stages, log_z = tmcmc(
            lambda x, target=target: target(x[0], x[1]), box, n_samples,
            (*numpy.atleast_1d(seed), p), threads=threads, **options)
        columns[:, p], columns[:, d + p] = samples[:, 0], samples[:, 1]
        total += values
        exponents.extend(stages)
        log_evidence += log_z
    # Equal to -hyper_nll up to the Gaussian normalizing constants.
    total += 0.5 * numpy.log(2 * numpy.pi) * d * len(evidences)
    return HyperSampleSet(columns, total, numpy.unique(exponents), seed,
                          layout, log_evidence)


def mixture_conditional(sample_set, evidence_r):
    """Mixture posterior of one record over the hyper samples.

    Return ``(mixture, mean, cov)``.  Component m is the fused posterior of
    `evidence_r` given the m-th hyper sample.
    """
    prior = evidence_r.gaussian()
    components = [hierarchy.factorize_jittered(prior, psi.gaussian())
                  .posterior
                  for psi in sample_set.hyper_params()]
    mixture = GaussianMixture(components)
    mean, cov = mixture.moments()
    return mixture, mean, cov


def mixture_conditionals(sample_set, evidences, prior_box,
                         leave_one_out_below=10, **sample_options):
    """`mixture_conditional()` for every record.

    With fewer than `leave_one_out_below` records, record r uses hyper
    samples drawn from the other records only.
    """
    evidences = list(evidences)
    n_d = len(evidences)
    if n_d >= leave_one_out_below or n_d < 3:
        return [mixture_conditional(sample_set, ev) for ev in evidences]
    chart = getattr(sample_set.layout, 'chart', None)
    out = []
    for r in range(n_d):
        others = evidences[:r] + evidences[r + 1:]
        loo = sample_hyper(others, prior_box, chart=chart,
                           n_samples=len(sample_set),
                           seed=(*numpy.atleast_1d(sample_set.rng_seed),
                                 n_d, r), **sample_options)
        out.append(mixture_conditional(loo, evidences[r]))
    return out


def mixture_predictive(sample_set):
    """Mixture over the hyper Gaussians of the samples.

    Return ``(mixture, mean, cov)``.
    """
    mixture = GaussianMixture([psi.gaussian()
                               for psi in sample_set.hyper_params()])
    mean, cov = mixture.moments()
    return mixture, mean, cov
