"""Project files of the command-line tool.

A project file is INI text (`configparser`) with these sections::

    [project]
    datasets = records/*.csv          ; paths or glob patterns, one per line
    response_order = 0                ; 0, 1 or 2 (default: from the records)
    dt = 0.005                        ; optional, checked against the records
    algorithm = laplace               ; laplace | tmcmc
    chart = yes                       ; eigenbasis chart of hyper covariance
    align = strict                    ; strict | warn
    n_samples = 2000
    seed = 0
    threads = 1
    output = out                      ; relative to the project file

    [prior]
    xi_max = 0.1
    phi_bound = 1.0
    variance_max = 0.1

    [tmcmc]
    cov_target = 1.0
    beta = 0.2
    chain_steps = 3
    max_stages = 200

    [mode 1]
    band = 3.2 5.2                    ; Hz, closed interval
    f_min = 3.2                       ; prior box of the mean frequency,
    f_max = 5.2                       ; default: the band

    [synth]
    channels = 3
    samples = 12000
    dt = 0.005
    datasets = 40
    response_order = 0
    seed = 0
    mean = 4.2 0.05 0.57735 0.57735 0.57735
    std = 0.035 0.005 0.01 0.01 0.01  ; or: cov = row; row; ...
    S_range = 1e-6 2e-6
    Se_range = 1e-9 2e-9

Only ``[project]`` and at least one ``[mode ...]`` are needed to analyse
records; ``[synth]`` alone suffices for the ``synth`` command.  Every
problem is reported as a `ConfigError`.
"""

import configparser
import dataclasses
import glob
import logging
import os

import numpy

from .hierarchy import HyperParams
from .spectral import FrequencyBand, RESPONSE_ORDERS
from .synth import SynthScenario


logger = logging.getLogger(__name__)

ALGORITHMS = ('laplace', 'tmcmc')


class ConfigError(ValueError):
    """The project configuration is invalid."""
    pass


@dataclasses.dataclass(frozen=True)
class PriorSettings:
    xi_max: float = 0.1
    phi_bound: float = 1.0
    variance_max: float = 0.1


@dataclasses.dataclass(frozen=True)
class TmcmcOptions:
    cov_target: float = 1.0
    beta: float = 0.2
    chain_steps: int = 3
    max_stages: int = 200

    def as_kwargs(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class ModeConfig:
    """One resonance band and the frequency range of its prior box."""

    name: str
    band: FrequencyBand
    f_min: float = None
    f_max: float = None

    def f_bounds(self):
        return (self.band.f_lb if self.f_min is None else self.f_min,
                self.band.f_ub if self.f_max is None else self.f_max)


@dataclasses.dataclass(frozen=True)
class ProjectConfig:
    datasets: tuple = ()
    dt: float = None
    response_order: int = None
    modes: tuple = ()
    prior: PriorSettings = PriorSettings()
    algorithm: str = 'laplace'
    n_samples: int = 2000
    seed: int = 0
    chart: bool = True
    align: str = 'strict'
    threads: int = 1
    output: str = 'out'
    tmcmc: TmcmcOptions = TmcmcOptions()
    synth: SynthScenario = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}: "
                              f"{self.algorithm!r}")
        if self.align not in ('strict', 'warn'):
            raise ConfigError(f"align must be 'strict' or 'warn': "
                              f"{self.align!r}")
        if self.response_order is not None \
                and self.response_order not in RESPONSE_ORDERS:
            raise ConfigError(f"invalid response order "
                              f"{self.response_order}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.n_samples < 100:
            raise ConfigError("n_samples must be >= 100")
        bands = sorted((m.band for m in self.modes), key=lambda b: b.f_lb)
        for (a, b) in zip(bands, bands[1:]):
            if b.f_lb <= a.f_ub:
                raise ConfigError(f"overlapping bands [{a.f_lb}, {a.f_ub}] "
                                  f"and [{b.f_lb}, {b.f_ub}]")
        if self.dt is not None:
            self.check_nyquist(0.5 / self.dt)

    def check_nyquist(self, nyquist):
        for mode in self.modes:
            if mode.band.f_ub >= nyquist:
                raise ConfigError(f"band of mode {mode.name!r} reaches the "
                                  f"Nyquist frequency {nyquist} Hz")


def _floats(text, count=None, what='value'):
    try:
        values = [float(v) for v in text.replace(',', ' ').split()]
    except ValueError as exc:
        raise ConfigError(f"invalid {what}: {text!r}") from exc
    if count is not None and len(values) != count:
        raise ConfigError(f"{what} needs {count} numbers: {text!r}")
    return values


def _get(section, key, conv, default):
    if key not in section:
        return default
    try:
        return conv(section[key])
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {key}: {exc}") from exc


def _bool(text):
    value = configparser.ConfigParser.BOOLEAN_STATES.get(text.lower())
    if value is None:
        raise ValueError(f"not a boolean: {text!r}")
    return value


def expand_datasets(patterns, base_dir):
    """Paths matching `patterns`, relative to `base_dir`, in order."""
    paths = []
    for pattern in patterns:
        pattern = os.path.join(base_dir, os.path.expanduser(pattern))
        matches = sorted(glob.glob(pattern))
        if not matches and not glob.has_magic(pattern):
            matches = [pattern]
        paths.extend(matches)
    return tuple(paths)


def _parse_mode(section, name):
    if 'band' not in section:
        raise ConfigError(f"[{section.name}] has no band")
    lb, ub = _floats(section['band'], 2, f"band of mode {name!r}")
    try:
        band = FrequencyBand(lb, ub)
    except ValueError as exc:
        raise ConfigError(f"[{section.name}] {exc}") from exc
    return ModeConfig(name, band, _get(section, 'f_min', float, None),
                      _get(section, 'f_max', float, None))


def _parse_synth(section):
    n = _get(section, 'channels', int, None)
    if n is None or 'mean' not in section:
        raise ConfigError("[synth] needs channels and mean")
    d = n + 2
    mean = _floats(section['mean'], d, "[synth] mean")
    if 'cov' in section:
        rows = [_floats(row, d, "[synth] cov row")
                for row in section['cov'].split(';') if row.strip()]
        cov = numpy.array(rows)
        if cov.shape != (d, d):
            raise ConfigError(f"[synth] cov must be {d} x {d}")
    else:
        std = _floats(section.get('std', ' '.join(['0'] * d)), d,
                      "[synth] std")
        cov = numpy.diag(numpy.square(std))
    try:
        return SynthScenario(
            true_hyper=HyperParams(mean, cov),
            n=n,
            N=_get(section, 'samples', int, 12000),
            dt=_get(section, 'dt', float, 0.005),
            S_range=tuple(_floats(section.get('S_range', '1 1'), 2,
                                  "[synth] S_range")),
            Se_range=tuple(_floats(section.get('Se_range', '0.01 0.01'), 2,
                                   "[synth] Se_range")),
            N_D=_get(section, 'datasets', int, 1),
            q=_get(section, 'response_order', int, 0),
            seed=_get(section, 'seed', int, 0))
    except (ValueError, numpy.linalg.LinAlgError) as exc:
        raise ConfigError(f"[synth] {exc}") from exc


def parse_config(text, base_dir='.'):
    """Parse project file `text`; relative paths refer to `base_dir`."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(';',))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    modes = []
    for name in parser.sections():
        if name.startswith('mode '):
            modes.append(_parse_mode(parser[name], name[5:].strip()))
    known = {'project', 'prior', 'tmcmc', 'synth'}
    for name in parser.sections():
        if name not in known and not name.startswith('mode '):
            raise ConfigError(f"unknown section [{name}]")

    empty = configparser.SectionProxy(parser, 'DEFAULT')
    project = parser['project'] if parser.has_section('project') else empty
    prior = parser['prior'] if parser.has_section('prior') else empty
    tmcmc = parser['tmcmc'] if parser.has_section('tmcmc') else empty
    patterns = project.get('datasets', '').split()
    return ProjectConfig(
        datasets=expand_datasets(patterns, base_dir),
        dt=_get(project, 'dt', float, None),
        response_order=_get(project, 'response_order', int, None),
        modes=tuple(modes),
        prior=PriorSettings(
            _get(prior, 'xi_max', float, 0.1),
            _get(prior, 'phi_bound', float, 1.0),
            _get(prior, 'variance_max', float, 0.1)),
        algorithm=project.get('algorithm', 'laplace'),
        n_samples=_get(project, 'n_samples', int, 2000),
        seed=_get(project, 'seed', int, 0),
        chart=_get(project, 'chart', _bool, True),
        align=project.get('align', 'strict'),
        threads=_get(project, 'threads', int, 1),
        output=os.path.join(base_dir, project.get('output', 'out')),
        tmcmc=TmcmcOptions(
            _get(tmcmc, 'cov_target', float, 1.0),
            _get(tmcmc, 'beta', float, 0.2),
            _get(tmcmc, 'chain_steps', int, 3),
            _get(tmcmc, 'max_stages', int, 200)),
        synth=(_parse_synth(parser['synth'])
               if parser.has_section('synth') else None))


def load_config(path):
    """Read and parse the project file at `path`."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    config = parse_config(text, os.path.dirname(os.path.abspath(path)))
    logger.debug("Loaded %s: %d datasets, %d modes", path,
                 len(config.datasets), len(config.modes))
    return config
