"""Command-line front end of the modal identification pipeline.

Verbs (all read a project file, see `hbfft.config`):

``spectrum``
    Averaged singular value spectrum of the records (``spectrum.csv``), to
    choose the resonance bands.
``identify``
    Bayesian FFT identification of every record in every band
    (``evidence/<record>.<mode>.json`` plus ``identify_report.json``).
``fuse``
    Hierarchical fusion of the evidence of each mode
    (``fusion_<mode>.json``, ``evidence_<mode>.csv`` and, with TMCMC,
    ``samples_<mode>.h5``).
``predict``
    Like ``fuse``, also writing the predictive part alone
    (``predictive_<mode>.json``).
``synth``
    Synthetic records and their ground truth (``records/*.csv``,
    ``truth.json``).

Exit codes: 0 on success (possibly with partial failures, which are logged
and reported), 2 on usage or configuration errors, 3 when the whole
computation failed.
"""

import argparse
import concurrent.futures
import dataclasses
import logging
import os
import sys
import warnings

import numpy

from . import hierarchy, likelihood, records, spectral, synth, tmcmc
from .config import ALGORITHMS, ConfigError, load_config
from .records import RecordError


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILURE = 3


class ComputationFailed(RuntimeError):
    """No part of a command's computation succeeded."""
    pass


def _mode_tag(mode):
    return mode.name.replace(' ', '_')


def load_records(config):
    """Read all configured records.

    Return a list of ``(record_id, TimeHistory or exception)`` pairs; HDF5
    archives contribute one entry per record.
    """
    out = []
    for path in config.datasets:
        if path.endswith(('.h5', '.hdf5')):
            try:
                archive = records.read_archive(path)
            except (RecordError, ValueError, OSError) as exc:
                out.append((os.path.basename(path), exc))
                continue
            stem = os.path.splitext(os.path.basename(path))[0]
            out.extend((f'{stem}.{th.name}', th) for th in archive)
            continue
        try:
            th = records.read_record_csv(path)
            if config.dt is not None and not numpy.isclose(th.dt, config.dt):
                raise RecordError(f"{path}: dt={th.dt} differs from the "
                                  f"configured {config.dt}")
            if (config.response_order is not None
                    and th.response_order != config.response_order):
                raise RecordError(f"{path}: response order "
                                  f"{th.response_order} differs from the "
                                  f"configured {config.response_order}")
            out.append((th.name, th))
        except RecordError as exc:
            stem = os.path.splitext(os.path.basename(path))[0]
            out.append((stem, exc))
    return out


def cmd_spectrum(config):
    """Write the singular value spectrum CSV; return its path."""
    loaded = load_records(config)
    if not loaded:
        raise ConfigError("no datasets configured")
    for (record_id, th) in loaded:
        if isinstance(th, Exception):
            raise RecordError(f"cannot read record {record_id}: {th}")
    try:
        freqs, values = spectral.singular_value_spectrum(
            [th for (_, th) in loaded])
    except ValueError as exc:
        raise RecordError(str(exc)) from exc
    os.makedirs(config.output, exist_ok=True)
    path = os.path.join(config.output, 'spectrum.csv')
    header = ','.join(['freq_hz'] + [f'sv_{i + 1}'
                                     for i in range(values.shape[1])])
    with open(path, 'w', newline='\n') as f:
        numpy.savetxt(f, numpy.column_stack([freqs, values]), fmt='%.17g',
                      delimiter=',', header=header, comments='')
    logger.info("Wrote %s (%d lines)", path, freqs.size)
    return path


def evidence_record(record_id, mode, ident):
    """JSON content of one identification."""
    return {
        'dataset_id': record_id,
        'mode': mode.name,
        'band': [mode.band.f_lb, mode.band.f_ub],
        'names': ident.theta_hat.names(),
        'theta_hat': ident.theta_hat.vector(),
        'covariance': ident.posterior.cov,
        'converged': ident.converged,
        'iterations': ident.iterations,
        'final_nll': ident.nll,
    }


def _identify_record(th, modes, config):
    q = (th.response_order if config.response_order is None
         else config.response_order)
    lines = spectral.scaled_fft(th)
    results = {}
    for mode in modes:
        try:
            mode.band.check_nyquist(th.nyquist)
            band_lines = spectral.band_select(lines, mode.band)
            results[mode.name] = likelihood.identify(band_lines, q=q)
        except (likelihood.IdentificationError, ValueError,
                numpy.linalg.LinAlgError) as exc:
            results[mode.name] = exc
    return results


def cmd_identify(config):
    """Identify every record in every band; return the report."""
    if not config.modes:
        raise ConfigError("no [mode ...] sections configured")
    loaded = load_records(config)
    if not loaded:
        raise ConfigError("no datasets configured")
    evidence_dir = os.path.join(config.output, 'evidence')
    os.makedirs(evidence_dir, exist_ok=True)

    def work(item):
        record_id, th = item
        if isinstance(th, Exception):
            return {mode.name: th for mode in config.modes}
        return _identify_record(th, config.modes, config)

    with concurrent.futures.ThreadPoolExecutor(
            max_workers=config.threads) as pool:
        outcomes = list(pool.map(work, loaded))

    report = {'succeeded': 0, 'failed': 0, 'records': []}
    for ((record_id, _), results) in zip(loaded, outcomes):
        for mode in config.modes:
            result = results[mode.name]
            entry = {'dataset_id': record_id, 'mode': mode.name}
            if isinstance(result, Exception):
                logger.warning("Record %s, mode %s failed: %s",
                               record_id, mode.name, result)
                entry.update(status='failed', error=str(result))
                report['failed'] += 1
            else:
                path = os.path.join(evidence_dir,
                                    f'{record_id}.{_mode_tag(mode)}.json')
                records.dump_json(path, evidence_record(record_id, mode,
                                                        result))
                entry.update(status='ok', converged=result.converged,
                             file=os.path.basename(path))
                report['succeeded'] += 1
                logger.info("Identified record %s, mode %s: f=%.6g Hz",
                            record_id, mode.name, result.theta_hat.f)
            report['records'].append(entry)
    records.dump_json(os.path.join(config.output, 'identify_report.json'),
                      report)
    if report['succeeded'] == 0:
        raise ComputationFailed("no record could be identified")
    return report


def read_evidences(config, mode):
    """`DatasetEvidence` of a mode from the identification output."""
    evidence_dir = os.path.join(config.output, 'evidence')
    suffix = f'.{_mode_tag(mode)}.json'
    names = sorted(name for name in os.listdir(evidence_dir)
                   if name.endswith(suffix)) \
        if os.path.isdir(evidence_dir) else []
    evidences = []
    for name in names:
        content = records.load_json(os.path.join(evidence_dir, name))
        theta = numpy.asarray(content['theta_hat'], dtype=float)
        cov = numpy.asarray(content['covariance'], dtype=float)
        n = theta.size - 4
        evidences.append(hierarchy.DatasetEvidence(
            theta[:n + 2], cov[:n + 2, :n + 2], content['dataset_id'],
            n_shape=n))
    return evidences


def _gaussian_summary(g):
    return {'mean': g.mean, 'std': g.std, 'cov': g.cov}


def _sampling_box(config, mode, layout):
    f_min, f_max = mode.f_bounds()
    return hierarchy.default_prior_box(
        layout, f_max, config.prior.xi_max, config.prior.phi_bound,
        config.prior.variance_max, f_min=f_min)


def fuse_mode(config, mode, evidences):
    """Fusion report of one mode; writes sample and CSV files."""
    tag = _mode_tag(mode)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', hierarchy.ModeMismatchWarning)
        evidences = hierarchy.align_mode_signs(
            evidences, strict=config.align == 'strict')
    mismatches = [str(w.message) for w in caught]

    n_shape = evidences[0].n_shape
    chart = None
    if config.chart:
        chart = hierarchy.eigenbasis_reduce(
            hierarchy.initial_hyper(evidences).cov)
    estimate = hierarchy.map_estimate(evidences, chart=chart)
    laplace = hierarchy.hyper_laplace(estimate, evidences)
    conditionals = hierarchy.conditional_posteriors(evidences, estimate)
    predictive = hierarchy.predictive(estimate.psi)
    names = likelihood.parameter_names(n_shape)[:n_shape + 2]

    report = {
        'mode': mode.name,
        'band': [mode.band.f_lb, mode.band.f_ub],
        'algorithm': config.algorithm,
        'names': names,
        'datasets': [ev.dataset_id for ev in evidences],
        'warnings': mismatches,
        'map': {
            'mean': estimate.psi.mu,
            'cov': estimate.psi.cov,
            'nll': estimate.nll,
            'iterations': estimate.iterations,
            'no_variability': estimate.no_variability,
            'mu_phi_norm': estimate.mu_phi_norm,
            'layout': estimate.layout.kind,
        },
        'hyper_laplace': {
            'names': laplace.names,
            'estimate': laplace.psi_hat,
            'std': laplace.std,
            'indefinite': laplace.indefinite,
        },
        'conditionals': [dict(dataset_id=ev.dataset_id,
                              **_gaussian_summary(g))
                         for (ev, g) in zip(evidences, conditionals)],
        'predictive': _gaussian_summary(predictive),
    }

    if config.algorithm == 'tmcmc':
        layout = (hierarchy.ChartLayout(chart, n_shape) if chart is not None
                  else hierarchy.CorrelationLayout(n_shape + 2, n_shape))
        box = _sampling_box(config, mode, layout)
        options = dict(config.tmcmc.as_kwargs(), threads=config.threads)
        samples = tmcmc.sample_hyper(evidences, box, chart=chart,
                                     n_samples=config.n_samples,
                                     seed=config.seed, **options)
        sample_file = f'samples_{tag}.h5'
        records.save_sample_set(os.path.join(config.output, sample_file),
                                samples)
        mixtures = tmcmc.mixture_conditionals(samples, evidences, box,
                                              **options)
        _, pred_mean, pred_cov = tmcmc.mixture_predictive(samples)
        report['tmcmc'] = {
            'sample_file': sample_file,
            'n_samples': len(samples),
            'seed': config.seed,
            'stage_exponents': samples.stage_exponents,
            'log_evidence': samples.log_evidence,
            'names': layout.names(),
            'hyper_mean': samples.samples.mean(axis=0),
            'hyper_std': samples.samples.std(axis=0),
            'conditionals': [
                {'dataset_id': ev.dataset_id, 'mean': mean, 'cov': cov,
                 'std': numpy.sqrt(numpy.clip(numpy.diag(cov), 0, None))}
                for (ev, (_, mean, cov)) in zip(evidences, mixtures)],
            'predictive': {
                'mean': pred_mean, 'cov': pred_cov,
                'std': numpy.sqrt(numpy.clip(numpy.diag(pred_cov), 0, None))},
        }

    _write_evidence_csv(os.path.join(config.output, f'evidence_{tag}.csv'),
                        names, evidences, conditionals)
    return report


def _write_evidence_csv(path, names, evidences, conditionals):
    header = ['dataset_id']
    for name in names:
        header += [name, f'{name}_sd', f'{name}_fused', f'{name}_fused_sd']
    with open(path, 'w', newline='\n') as f:
        f.write(','.join(header) + '\n')
        for (ev, g) in zip(evidences, conditionals):
            sd = numpy.sqrt(numpy.clip(numpy.diag(ev.cov), 0, None))
            row = [str(ev.dataset_id)]
            for i in range(len(names)):
                row += [f'{v:.17g}' for v in (ev.lambda_hat[i], sd[i],
                                              g.mean[i], g.std[i])]
            f.write(','.join(row) + '\n')


def cmd_fuse(config):
    """Fuse the evidence of every mode; return the reports by mode."""
    if not config.modes:
        raise ConfigError("no [mode ...] sections configured")
    os.makedirs(config.output, exist_ok=True)
    reports = {}
    for mode in config.modes:
        evidences = read_evidences(config, mode)
        if len(evidences) < 2:
            logger.error("Mode %s: %d evidence records, at least 2 needed",
                         mode.name, len(evidences))
            continue
        try:
            report = fuse_mode(config, mode, evidences)
        except (hierarchy.ModeMismatchError, hierarchy.ConvergenceError,
                tmcmc.DegenerateStageError, ValueError,
                numpy.linalg.LinAlgError) as exc:
            logger.error("Fusion of mode %s failed: %s", mode.name, exc)
            continue
        records.dump_json(os.path.join(
            config.output, f'fusion_{_mode_tag(mode)}.json'), report)
        reports[mode.name] = report
        logger.info("Fused %d records of mode %s", len(evidences),
                    mode.name)
    if not reports:
        raise ComputationFailed("no mode could be fused")
    return reports


def cmd_predict(config):
    """`cmd_fuse()` plus one predictive file per mode."""
    reports = cmd_fuse(config)
    for mode in config.modes:
        if mode.name not in reports:
            continue
        report = reports[mode.name]
        content = {'mode': mode.name, 'names': report['names'],
                   'predictive': report['predictive']}
        if 'tmcmc' in report:
            content['tmcmc_predictive'] = report['tmcmc']['predictive']
        records.dump_json(os.path.join(
            config.output, f'predictive_{_mode_tag(mode)}.json'), content)
    return reports


def cmd_synth(config):
    """Write synthetic records and the ground truth; return the truth."""
    scenario = config.synth
    if scenario is None:
        raise ConfigError("no [synth] section configured")
    record_dir = os.path.join(config.output, 'records')
    try:
        os.makedirs(record_dir, exist_ok=True)
    except OSError as exc:
        raise ComputationFailed(f"cannot create {record_dir}: {exc}") \
            from exc
    truths = []
    for s in range(scenario.N_D):
        theta = synth.draw_dataset_params(scenario, s)
        th = synth.generate_time_history(theta, scenario, s)
        records.write_record_csv(os.path.join(record_dir, f'{th.name}.csv'),
                                 th)
        truths.append({'dataset_id': th.name, 'names': theta.names(),
                       'theta': theta.vector()})
    truth = {
        'hyper': {'mean': scenario.true_hyper.mu,
                  'cov': scenario.true_hyper.cov},
        'scenario': {'channels': scenario.n, 'samples': scenario.N,
                     'dt': scenario.dt, 'datasets': scenario.N_D,
                     'response_order': scenario.q, 'seed': scenario.seed,
                     'S_range': scenario.S_range,
                     'Se_range': scenario.Se_range},
        'datasets': truths,
    }
    records.dump_json(os.path.join(config.output, 'truth.json'), truth)
    logger.info("Wrote %d synthetic records to %s", scenario.N_D, record_dir)
    return truth


COMMANDS = {
    'spectrum': cmd_spectrum,
    'identify': cmd_identify,
    'fuse': cmd_fuse,
    'predict': cmd_predict,
    'synth': cmd_synth,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog='hbfft',
        description="Hierarchical Bayesian FFT modal identification",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument('command', choices=sorted(COMMANDS),
                        help="pipeline step to run")
    parser.add_argument('--config', required=True,
                        help="project file")
    parser.add_argument('--out', help="output directory (overrides the "
                        "project file)")
    parser.add_argument('--threads', type=int,
                        help="worker threads")
    parser.add_argument('--seed', type=int, help="random seed")
    parser.add_argument('--algorithm', choices=ALGORITHMS,
                        help="hyper-parameter uncertainty algorithm")
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help="more logging (repeat for debug output)")
    return parser


def _log_level(verbose):
    if verbose >= 2:
        return logging.DEBUG
    if verbose == 1:
        return logging.INFO
    level = os.environ.get('HBFFT_LOG_LEVEL', 'WARNING').upper()
    return getattr(logging, level, logging.WARNING)


def apply_overrides(config, args):
    """Project configuration with the command-line overrides applied."""
    changes = {}
    if args.out is not None:
        changes['output'] = args.out
    for name in ('threads', 'seed', 'algorithm'):
        if getattr(args, name) is not None:
            changes[name] = getattr(args, name)
    if 'seed' in changes and config.synth is not None:
        changes['synth'] = dataclasses.replace(config.synth,
                                               seed=changes['seed'])
    return dataclasses.replace(config, **changes)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=_log_level(args.verbose),
                        format='%(levelname)s %(name)s: %(message)s')
    logging.captureWarnings(True)
    try:
        config = apply_overrides(load_config(args.config), args)
        COMMANDS[args.command](config)
    except (ConfigError, RecordError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except ComputationFailed as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
