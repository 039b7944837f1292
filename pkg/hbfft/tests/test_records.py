"""Record archives, CSV records, sample files and reports.

Direct Blosc2 chunk reading is checked against the HDF5 filter pipeline.
"""

import json
import os

import h5py
import numpy as np

from h5py.tests.common import TestCase

from hbfft import records
from hbfft.hierarchy import (ChartLayout, CorrelationLayout,
                             eigenbasis_reduce)
from hbfft.records import RecordError
from hbfft.spectral import TimeHistory
from hbfft.tmcmc import HyperSampleSet
from hbfft.tests.common import DirectReadNotUsedError, checking_direct_read


class DirectReadTestCase(TestCase):
    """Blosc2 direct chunk reading of record datasets"""

    force_filter = False

    def setUp(self):
        TestCase.setUp(self)

        self.chunks = (1000, 3)
        self.arr = np.arange(3500 * 3, dtype='f8').reshape(3500, 3) / 7
        self.f.create_dataset('x', data=self.arr, chunks=self.chunks,
                              **records.blosc2_compression())

        # Reopen read-only so that nothing is served from HDF5 caches.
        fn = self.f.filename
        self.f.close()
        self.f = h5py.File(fn, 'r')
        self.dset = self.f['x']

        self.filter_env = os.environ.get('HBFFT_BLOSC2_FILTER', '0')
        os.environ['HBFFT_BLOSC2_FILTER'] = '1' if self.force_filter else '0'

    def tearDown(self):
        os.environ['HBFFT_BLOSC2_FILTER'] = self.filter_env
        super().tearDown()

    def read(self, start=0, stop=None):
        if self.force_filter:
            return records.read_rows(self.dset, start, stop)
        with checking_direct_read():
            return records.read_rows(self.dset, start, stop)

    def test_detects_filter_use(self):
        """Non-use detection working"""
        if self.force_filter:
            return
        with checking_direct_read():
            with self.assertRaises(DirectReadNotUsedError):
                records._filter_read(self.dset, 0, 1)

    def test_direct_read_ok(self):
        self.assertTrue(records.direct_read_ok(self.dset))
        self.assertEqual(records.direct_read_enabled(), not self.force_filter)

    def test_whole_dataset(self):
        self.assertArrayEqual(self.read(), self.arr)

    def test_cross_chunk(self):
        """Reading rows crossing a chunk boundary"""
        start, stop = self.chunks[0] - 5, self.chunks[0] + 5
        self.assertArrayEqual(self.read(start, stop), self.arr[start:stop])

    def test_last_chunk(self):
        """Reading rows going past the last (partial) chunk"""
        start = self.arr.shape[0] - 5
        self.assertArrayEqual(self.read(start, start + 10), self.arr[start:])

    def test_negative_bounds(self):
        self.assertArrayEqual(self.read(-10, -2), self.arr[-10:-2])

    def test_empty(self):
        out = self.read(20, 10)
        self.assertEqual(out.shape, (0, 3))


class FilterReadTestCase(DirectReadTestCase):
    """HDF5 filter pipeline forced by environment variable"""

    force_filter = True


class UncompressedReadTestCase(TestCase):
    def test_plain_dataset(self):
        arr = np.arange(40.0).reshape(20, 2)
        dset = self.f.create_dataset('x', data=arr)
        self.assertFalse(records.direct_read_ok(dset))
        self.assertArrayEqual(records.read_rows(dset, 3, 7), arr[3:7])


class ArchiveTestCase(TestCase):
    def setUp(self):
        TestCase.setUp(self)
        rng = np.random.default_rng(71)
        self.records = [
            TimeHistory(rng.standard_normal((3, 5000)), 0.005, name='b'),
            TimeHistory(rng.standard_normal((3, 800)), 0.01, 1, name='a')]
        self.path = self.mktemp()

    def test_round_trip(self):
        records.write_archive(self.path, self.records, chunk_rows=1024)
        read = records.read_archive(self.path)
        self.assertEqual([th.name for th in read], ['a', 'b'])
        for (th, orig) in zip(read, self.records[::-1]):
            self.assertArrayEqual(th.samples, orig.samples)
            self.assertEqual(th.dt, orig.dt)
            self.assertEqual(th.response_order, orig.response_order)

    def test_direct_read_used(self):
        records.write_archive(self.path, self.records, chunk_rows=1024)
        with checking_direct_read():
            read = records.read_archive(self.path, names=['b'])
        self.assertArrayEqual(read[0].samples, self.records[0].samples)

    def test_missing_file(self):
        with self.assertRaises(RecordError):
            records.read_archive(self.path + '.missing')

    def test_missing_attributes(self):
        with h5py.File(self.path, 'w') as f:
            f.create_dataset('x', data=np.zeros((10, 2)))
        with self.assertRaises(RecordError):
            records.read_archive(self.path)


class CsvTestCase(TestCase):
    def setUp(self):
        TestCase.setUp(self)
        self.path = self.mktemp(suffix='.csv')

    def test_round_trip(self):
        rng = np.random.default_rng(72)
        th = TimeHistory(rng.standard_normal((2, 50)), 0.005, 2)
        records.write_record_csv(self.path, th)
        with open(self.path) as f:
            self.assertEqual(f.readline(), '# dt=0.005 q=2 channels=2\n')
        read = records.read_record_csv(self.path, name='r1')
        self.assertArrayEqual(read.samples, th.samples)
        self.assertEqual((read.dt, read.response_order, read.name),
                         (0.005, 2, 'r1'))

    def test_default_name(self):
        records.write_record_csv(self.path,
                                 TimeHistory(np.ones((1, 4)), 0.1))
        stem = os.path.splitext(os.path.basename(self.path))[0]
        self.assertEqual(records.read_record_csv(self.path).name, stem)

    def check_invalid(self, text):
        with open(self.path, 'w') as f:
            f.write(text)
        with self.assertRaises(RecordError):
            records.read_record_csv(self.path)

    def test_missing_header(self):
        self.check_invalid('1.0,2.0\n3.0,4.0\n')

    def test_column_mismatch(self):
        self.check_invalid('# dt=0.1 q=0 channels=3\n1.0,2.0\n3.0,4.0\n')

    def test_garbage(self):
        self.check_invalid('# dt=0.1 q=0 channels=2\n1.0,abc\n')

    def test_non_finite(self):
        self.check_invalid('# dt=0.1 q=0 channels=1\n1.0\nnan\n')

    def test_invalid_interval(self):
        self.check_invalid('# dt=-0.1 q=0 channels=1\n1.0\n2.0\n')

    def test_missing_file(self):
        with self.assertRaises(RecordError):
            records.read_record_csv(self.path + '.missing')


class SampleSetFileTestCase(TestCase):
    def check_round_trip(self, layout, seed):
        rng = np.random.default_rng(73)
        sample_set = HyperSampleSet(
            rng.standard_normal((150, layout.size)),
            rng.standard_normal(150), [0.0, 0.3, 1.0], seed, layout,
            -12.5)
        path = self.mktemp()
        records.save_sample_set(path, sample_set)
        with checking_direct_read():
            read = records.load_sample_set(path)
        self.assertArrayEqual(read.samples, sample_set.samples)
        self.assertArrayEqual(read.log_target_values,
                              sample_set.log_target_values)
        self.assertArrayEqual(read.stage_exponents, [0.0, 0.3, 1.0])
        self.assertEqual(read.rng_seed, seed)
        self.assertEqual(read.log_evidence, -12.5)
        self.assertEqual(read.layout.kind, layout.kind)
        self.assertEqual(read.layout.names(), layout.names())
        return read

    def test_chart_layout(self):
        rng = np.random.default_rng(74)
        a = rng.standard_normal((4, 4))
        chart = eigenbasis_reduce(a @ a.T)
        read = self.check_round_trip(ChartLayout(chart, n_shape=2), 3)
        self.assertArrayEqual(read.layout.chart.basis, chart.basis)
        self.assertEqual(read.layout.n_shape, 2)

    def test_correlation_layout(self):
        read = self.check_round_trip(CorrelationLayout(3), (1, 2))
        self.assertIsNone(read.layout.n_shape)


class JsonTestCase(TestCase):
    def test_canonical(self):
        obj = {'b': np.arange(2), 'a': {'y': np.float64(0.5), 'x': True},
               'c': (np.int64(3), np.bool_(False))}
        text = records.dumps_json(obj)
        self.assertEqual(text, json.dumps(
            {'a': {'x': True, 'y': 0.5}, 'b': [0, 1], 'c': [3, False]},
            sort_keys=True, indent=2) + '\n')

    def test_rejects_nan(self):
        with self.assertRaises(ValueError):
            records.dumps_json({'x': float('nan')})

    def test_file_round_trip(self):
        path = self.mktemp(suffix='.json')
        records.dump_json(path, {'k': [1.5, 2]})
        self.assertEqual(records.load_json(path), {'k': [1.5, 2]})
        with open(path, 'w') as f:
            f.write('{')
        with self.assertRaises(RecordError):
            records.load_json(path)
