"""Command-line pipeline runs on small synthetic projects."""

import os
import shutil
import tempfile

import numpy

from hbfft import cli, records
from hbfft.tests.common import TestCase


PROJECT = """\
[project]
datasets = out/records/*.csv
algorithm = {algorithm}
n_samples = 100
seed = 3

[mode one]
band = 3.2 5.2

[synth]
channels = 2
samples = 4000
dt = 0.01
datasets = 3
seed = 5
mean = 4.2 0.02 0.6 0.8
std = 0.03 0.002 0.02 0.02
S_range = 1e-2 2e-2
Se_range = 1e-4 2e-4
"""


class CliTestCase(TestCase):
    algorithm = 'laplace'

    def setUp(self):
        self.dir = tempfile.mkdtemp(prefix='hbfft-')
        self.addCleanup(shutil.rmtree, self.dir)
        self.config = self.write_config(PROJECT.format(
            algorithm=self.algorithm))
        self.out = os.path.join(self.dir, 'out')

    def write_config(self, text, name='project.ini'):
        path = os.path.join(self.dir, name)
        with open(path, 'w') as f:
            f.write(text)
        return path

    def run_cli(self, *args, config=None):
        return cli.main(list(args) + ['--config', config or self.config])

    def read(self, *parts):
        with open(os.path.join(self.out, *parts), 'rb') as f:
            return f.read()


class SynthCommandTestCase(CliTestCase):
    def test_records_and_truth(self):
        self.assertEqual(self.run_cli('synth'), cli.EXIT_OK)
        names = sorted(os.listdir(os.path.join(self.out, 'records')))
        self.assertEqual(names, ['record000.csv', 'record001.csv',
                                 'record002.csv'])
        truth = records.load_json(os.path.join(self.out, 'truth.json'))
        self.assertEqual(len(truth['datasets']), 3)
        self.assertEqual(truth['scenario']['seed'], 5)
        self.assertArrayClose(truth['hyper']['mean'], [4.2, 0.02, 0.6, 0.8])

    def test_reproducible(self):
        self.run_cli('synth')
        first = [self.read('records', 'record001.csv'),
                 self.read('truth.json')]
        self.run_cli('synth')
        second = [self.read('records', 'record001.csv'),
                  self.read('truth.json')]
        self.assertEqual(first, second)

    def test_seed_override(self):
        self.run_cli('synth')
        first = self.read('records', 'record000.csv')
        self.run_cli('synth', '--seed', '6')
        self.assertNotEqual(self.read('records', 'record000.csv'), first)
        truth = records.load_json(os.path.join(self.out, 'truth.json'))
        self.assertEqual(truth['scenario']['seed'], 6)


class SpectrumCommandTestCase(CliTestCase):
    def test_spectrum(self):
        self.run_cli('synth')
        self.assertEqual(self.run_cli('spectrum'), cli.EXIT_OK)
        path = os.path.join(self.out, 'spectrum.csv')
        with open(path) as f:
            self.assertEqual(f.readline().strip(), 'freq_hz,sv_1,sv_2')
        table = numpy.loadtxt(path, delimiter=',', skiprows=1)
        self.assertEqual(table.shape, (1999, 3))
        peak = table[numpy.argmax(table[:, 1]), 0]
        self.assertLess(abs(peak - 4.2), 0.3)

    def test_unreadable_record(self):
        self.run_cli('synth')
        with open(os.path.join(self.out, 'records', 'broken.csv'), 'w') as f:
            f.write('not a record\n')
        self.assertEqual(self.run_cli('spectrum'), cli.EXIT_USAGE)


class ErrorsTestCase(CliTestCase):
    def test_missing_config(self):
        self.assertEqual(
            self.run_cli('identify',
                         config=os.path.join(self.dir, 'missing.ini')),
            cli.EXIT_USAGE)

    def test_unknown_command(self):
        self.assertEqual(self.run_cli('calibrate'), cli.EXIT_USAGE)

    def test_no_datasets(self):
        config = self.write_config("[mode one]\nband = 3.2 5.2\n",
                                   'empty.ini')
        self.assertEqual(self.run_cli('identify', config=config),
                         cli.EXIT_USAGE)

    def test_no_modes(self):
        config = self.write_config("[project]\ndatasets = x.csv\n",
                                   'nomode.ini')
        self.assertEqual(self.run_cli('identify', config=config),
                         cli.EXIT_USAGE)

    def test_all_records_fail(self):
        os.makedirs(os.path.join(self.out, 'records'))
        with open(os.path.join(self.out, 'records', 'bad.csv'), 'w') as f:
            f.write('# dt=0.01 q=0 channels=1\n1.0\nabc\n')
        self.assertEqual(self.run_cli('identify'), cli.EXIT_FAILURE)

    def test_nothing_to_fuse(self):
        self.assertEqual(self.run_cli('fuse'), cli.EXIT_FAILURE)


class IdentifyCommandTestCase(CliTestCase):
    def test_bad_record_isolated(self):
        self.run_cli('synth')
        with open(os.path.join(self.out, 'records', 'bad.csv'), 'w') as f:
            f.write('# dt=0.01 q=0 channels=2\n1.0,2.0\n')
        self.assertEqual(self.run_cli('identify'), cli.EXIT_OK)
        report = records.load_json(os.path.join(self.out,
                                                'identify_report.json'))
        self.assertEqual((report['succeeded'], report['failed']), (3, 1))
        failed = [r for r in report['records'] if r['status'] == 'failed']
        self.assertEqual(failed[0]['dataset_id'], 'bad')
        names = sorted(os.listdir(os.path.join(self.out, 'evidence')))
        self.assertEqual(names, [f'record00{s}.one.json' for s in range(3)])
        evidence = records.load_json(os.path.join(self.out, 'evidence',
                                                  names[0]))
        self.assertEqual(len(evidence['theta_hat']), 6)
        self.assertEqual(numpy.shape(evidence['covariance']), (6, 6))

    def run_pipeline(self):
        self.run_cli('synth')
        self.assertEqual(self.run_cli('identify'), cli.EXIT_OK)
        self.assertEqual(self.run_cli('predict'), cli.EXIT_OK)
        fusion = records.load_json(os.path.join(self.out, 'fusion_one.json'))
        self.assertEqual(fusion['names'], ['f', 'xi', 'phi1', 'phi2'])
        self.assertEqual(len(fusion['conditionals']), 3)
        self.assertLess(abs(fusion['map']['mean'][0] - 4.2), 0.15)
        predictive = records.load_json(os.path.join(self.out,
                                                    'predictive_one.json'))
        self.assertEqual(len(predictive['predictive']['mean']), 4)
        with open(os.path.join(self.out, 'evidence_one.csv')) as f:
            lines = f.read().splitlines()
        self.assertEqual(len(lines), 4)
        self.assertTrue(lines[0].startswith('dataset_id,f,f_sd,f_fused,'))
        return fusion

    def test_end_to_end(self):
        self.run_pipeline()


class TmcmcPipelineTestCase(IdentifyCommandTestCase):
    algorithm = 'tmcmc'

    def test_end_to_end(self):
        fusion = self.run_pipeline()
        self.assertEqual(fusion['tmcmc']['n_samples'], 100)
        self.assertEqual(len(fusion['tmcmc']['conditionals']), 3)
        self.assertTrue(os.path.exists(os.path.join(self.out,
                                                    'samples_one.h5')))
        samples = records.load_sample_set(os.path.join(self.out,
                                                       'samples_one.h5'))
        self.assertEqual(samples.samples.shape, (100, 8))
        self.assertEqual(samples.rng_seed, 3)


class FuseCommandTestCase(CliTestCase):
    def write_evidence(self, name, theta, cov):
        evidence_dir = os.path.join(self.out, 'evidence')
        os.makedirs(evidence_dir, exist_ok=True)
        records.dump_json(os.path.join(evidence_dir, f'{name}.one.json'),
                          {'dataset_id': name, 'theta_hat': theta,
                           'covariance': cov})

    def test_identical_records(self):
        """No across-record variability: point-mass predictive"""
        theta = [4.2, 0.02, 0.6, 0.8, 1e-2, 1e-4]
        cov = numpy.diag([1e-4, 1e-6, 1e-4, 1e-4, 1e-6, 1e-10])
        for name in ('a', 'b'):
            self.write_evidence(name, theta, cov)
        self.assertEqual(self.run_cli('fuse'), cli.EXIT_OK)
        fusion = records.load_json(os.path.join(self.out, 'fusion_one.json'))
        self.assertTrue(fusion['map']['no_variability'])
        self.assertTrue(fusion['hyper_laplace']['indefinite'])
        self.assertArrayClose(fusion['predictive']['std'], 0.0, atol=1e-8)
        self.assertArrayClose(fusion['predictive']['mean'],
                              [4.2, 0.02, 0.6, 0.8], rtol=1e-8)

    def test_single_record(self):
        self.write_evidence('a', [4.2, 0.02, 1.0, 1e-2, 1e-4],
                            numpy.eye(5) * 1e-6)
        self.assertEqual(self.run_cli('fuse'), cli.EXIT_FAILURE)

    def test_mode_mismatch(self):
        self.write_evidence('a', [4.2, 0.02, 1.0, 0.0, 1e-2, 1e-4],
                            numpy.eye(6) * 1e-6)
        self.write_evidence('b', [4.2, 0.02, 0.0, 1.0, 1e-2, 1e-4],
                            numpy.eye(6) * 1e-6)
        self.assertEqual(self.run_cli('fuse'), cli.EXIT_FAILURE)
