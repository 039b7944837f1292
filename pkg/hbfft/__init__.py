"""Hierarchical Bayesian FFT modal identification.

Modal parameters (natural frequency, damping ratio and mode shape) of one
vibration mode are identified from each of several ambient vibration records
by the Bayesian FFT method (`identify()`), and the resulting per-record
Gaussian evidence is fused by a hierarchical Gaussian model whose
hyper-parameters describe the variability of the modal parameters across
records (`map_estimate()`, `hyper_laplace()`, `sample_hyper()`).  The fused
model gives refined per-record posteriors (`dataset_conditional()`,
`mixture_conditional()`) and the distribution for a record not yet observed
(`predictive()`, `mixture_predictive()`).

The ``hbfft`` command (`hbfft.cli`) runs the whole pipeline over record files
described by a project file (`hbfft.config`).

**Note:** For testing and debugging purposes, you may force reading HDF5
records through the HDF5 filter pipeline by setting ``HBFFT_BLOSC2_FILTER=1``
in the environment.  ``HBFFT_LOG_LEVEL`` sets the default log level of the
command-line tool.
"""

from .gaussian import Gaussian, product_factorize
from .hierarchy import (DatasetEvidence, HyperParams, align_mode_signs,
                        conditional_posteriors, dataset_conditional,
                        eigenbasis_reduce, hyper_laplace, hyper_nll,
                        initial_hyper, map_estimate, predictive)
from .likelihood import ModalParams, identify, laplace, mpv, split_evidence
from .spectral import (FrequencyBand, TimeHistory, band_select, scaled_fft,
                       singular_value_spectrum)
from .tmcmc import (mixture_conditional, mixture_conditionals,
                    mixture_predictive, sample_hyper)


__all__ = ['DatasetEvidence',
           'FrequencyBand',
           'Gaussian',
           'HyperParams',
           'ModalParams',
           'TimeHistory',
           'align_mode_signs',
           'band_select',
           'conditional_posteriors',
           'dataset_conditional',
           'eigenbasis_reduce',
           'hyper_laplace',
           'hyper_nll',
           'identify',
           'initial_hyper',
           'laplace',
           'map_estimate',
           'mixture_conditional',
           'mixture_conditionals',
           'mixture_predictive',
           'mpv',
           'predictive',
           'product_factorize',
           'sample_hyper',
           'scaled_fft',
           'singular_value_spectrum',
           'split_evidence']
