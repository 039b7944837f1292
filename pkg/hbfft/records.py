"""Record, sample and report files.

Records are stored either as CSV text (`read_record_csv()`,
`write_record_csv()`) or in a Blosc2-compressed HDF5 archive with one
``time x channels`` dataset per record (`write_archive()`,
`read_archive()`).  Archive rows are read with `read_rows()`, which
decompresses the Blosc2 chunks directly instead of going through the HDF5
filter pipeline whenever the dataset allows it.

TMCMC samples go to HDF5 files too (`save_sample_set()`,
`load_sample_set()`); reports are canonical JSON (`dump_json()`).

**Note:** Setting ``HBFFT_BLOSC2_FILTER=1`` in the environment forces the
use of the HDF5 filter pipeline for reading.
"""

import json
import logging
import os
import platform
import re

import h5py
import hdf5plugin
import numpy

from blosc2.schunk import open as b2schunk_open

from .hierarchy import (ChartLayout, CorrelationLayout, EigenbasisChart,
                        TriangleLayout)
from .spectral import TimeHistory
from .tmcmc import HyperSampleSet


logger = logging.getLogger(__name__)

_header_re = re.compile(
    r'^#\s*dt=(?P<dt>\S+)\s+q=(?P<q>\S+)\s+channels=(?P<channels>\S+)\s*$')


class RecordError(ValueError):
    """A record file is missing, malformed or inconsistent."""
    pass


def blosc2_compression():
    """Keyword arguments of ``create_dataset`` for Blosc2 compression."""
    return dict(hdf5plugin.Blosc2(cname='zstd', clevel=5,
                                  filters=hdf5plugin.Blosc2.SHUFFLE))


# CSV records.

def write_record_csv(path, th):
    """Write a `TimeHistory` as CSV (one row per time step)."""
    header = f"dt={th.dt!r} q={th.response_order} channels={th.channels}"
    with open(path, 'w', newline='\n') as f:
        numpy.savetxt(f, th.samples.T, fmt='%.17g', delimiter=',',
                      header=header, comments='# ')


def read_record_csv(path, name=None):
    """Read a CSV record written by `write_record_csv()`."""
    try:
        with open(path) as f:
            first = f.readline()
            match = _header_re.match(first.strip())
            if match is None:
                raise RecordError(f"{path}: invalid header line {first!r}")
            dt = float(match['dt'])
            q = int(match['q'])
            channels = int(match['channels'])
            data = numpy.loadtxt(f, delimiter=',', ndmin=2)
    except OSError as exc:
        raise RecordError(f"{path}: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, RecordError):
            raise
        raise RecordError(f"{path}: {exc}") from exc
    if data.shape[1] != channels:
        raise RecordError(f"{path}: {data.shape[1]} columns for "
                          f"{channels} channels")
    try:
        return TimeHistory(data.T, dt, q, name=name or _stem(path))
    except ValueError as exc:
        raise RecordError(f"{path}: {exc}") from exc


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


# Blosc2 direct chunk reading.

def direct_read_enabled():
    """Is direct Blosc2 reading not disabled via the environment?

    This returns false if the ``HBFFT_BLOSC2_FILTER`` environment variable is
    set to a non-zero integer.
    """
    try:
        force_filter = int(os.environ.get('HBFFT_BLOSC2_FILTER', '0'), 10)
    except ValueError:
        force_filter = 0
    return force_filter == 0


def direct_read_ok(dataset):
    """Can chunks of the 2-D dataset be decompressed directly with Blosc2?"""
    return (
        dataset.ndim == 2
        and dataset.chunks is not None
        # '.compression' does not report filter plugins.
        and '32026' in dataset._filters  # Blosc2's ID
        and dataset.dtype.isnative
        and (dataset.file.mode == 'r'
             or platform.system().lower() != 'windows')
    )


# Replaced by tests to detect unwanted use of the filter pipeline.
def _filter_read(dataset, start, stop):
    return dataset[start:stop, :]


def _read_chunk_rows(path, offset, slice_, dtype):
    schunk = b2schunk_open(path, mode='r', offset=offset)
    s = schunk[slice_]
    if s.dtype.kind != 'V':
        return s
    # The filter stores an opaque dtype; view it without copying.
    return numpy.ndarray(s.shape, dtype=dtype, buffer=s.data)


def read_rows(dataset, start=0, stop=None):
    """Read rows ``start:stop`` of a 2-D dataset.

    Blosc2-compressed datasets are read chunk by chunk with Blosc2 when
    `direct_read_ok()` and `direct_read_enabled()`; other datasets use
    ordinary h5py slicing.  Both give the same array.
    """
    rows, cols = dataset.shape
    start, stop, _ = slice(start, stop).indices(rows)
    stop = max(start, stop)
    if not (direct_read_enabled() and direct_read_ok(dataset)):
        return _filter_read(dataset, start, stop)

    out = numpy.empty((stop - start, cols), dtype=dataset.dtype)
    if stop == start or cols == 0:
        return out
    get_chunk_info = dataset.id.get_chunk_info_by_coord
    path = dataset.file.filename
    for chunk_slice in dataset.iter_chunks((slice(start, stop),
                                            slice(0, cols))):
        if any(s.stop <= s.start for s in chunk_slice):
            continue  # bogus iter_chunks item, see h5py#2341
        in_chunk = tuple(slice(s.start % c, s.start % c + s.stop - s.start)
                         for (s, c) in zip(chunk_slice, dataset.chunks))
        chunk_start = tuple(s.start - s.start % c
                            for (s, c) in zip(chunk_slice, dataset.chunks))
        info = get_chunk_info(chunk_start)
        part = _read_chunk_rows(path, info.byte_offset, in_chunk,
                                dataset.dtype)
        expected = tuple(s.stop - s.start for s in chunk_slice)
        if part.dtype != dataset.dtype or part.shape != expected:
            raise RecordError(
                f"invalid chunk at {chunk_start} (offset "
                f"{info.byte_offset}): expected {expected}/{dataset.dtype}, "
                f"got {part.shape}/{part.dtype}")
        out[chunk_slice[0].start - start:chunk_slice[0].stop - start,
            chunk_slice[1]] = part
    return out


# HDF5 record archives.

def write_archive(path, records, chunk_rows=4096):
    """Store `TimeHistory` records in a Blosc2-compressed HDF5 file."""
    with h5py.File(path, 'w') as f:
        for (i, th) in enumerate(records):
            name = th.name or f'record{i:03d}'
            chunks = (min(chunk_rows, th.length), th.channels)
            dset = f.create_dataset(name, data=th.samples.T, chunks=chunks,
                                    **blosc2_compression())
            dset.attrs['dt'] = th.dt
            dset.attrs['q'] = th.response_order


def read_archive(path, names=None):
    """Read records written by `write_archive()`, sorted by name."""
    try:
        f = h5py.File(path, 'r')
    except OSError as exc:
        raise RecordError(f"{path}: {exc}") from exc
    with f:
        records = []
        for name in (names or sorted(f)):
            dset = f[name]
            try:
                dt, q = float(dset.attrs['dt']), int(dset.attrs['q'])
            except KeyError as exc:
                raise RecordError(f"{path}/{name}: missing attribute "
                                  f"{exc}") from exc
            records.append(TimeHistory(read_rows(dset).T, dt, q, name=name))
    logger.debug("Read %d records from %s", len(records), path)
    return records


# TMCMC sample files.

def save_sample_set(path, sample_set):
    """Store a `HyperSampleSet` in an HDF5 file."""
    layout = sample_set.layout
    with h5py.File(path, 'w') as f:
        comp = blosc2_compression()
        f.create_dataset('samples', data=sample_set.samples, **comp)
        f.create_dataset('log_target_values',
                         data=sample_set.log_target_values, **comp)
        f.create_dataset('stage_exponents', data=sample_set.stage_exponents)
        f.attrs['seed'] = numpy.atleast_1d(sample_set.rng_seed)
        f.attrs['layout'] = layout.kind
        f.attrs['dim'] = layout.dim
        f.attrs['n_shape'] = -1 if layout.n_shape is None else layout.n_shape
        f.attrs['log_evidence'] = sample_set.log_evidence
        f.attrs['names'] = layout.names()
        if layout.kind == 'chart':
            f.create_dataset('chart_basis', data=layout.chart.basis)
            f.create_dataset('chart_eigenvalues',
                             data=layout.chart.eigenvalues)


def load_sample_set(path):
    """Read a `HyperSampleSet` written by `save_sample_set()`."""
    with h5py.File(path, 'r') as f:
        kind = f.attrs['layout']
        dim = int(f.attrs['dim'])
        n_shape = int(f.attrs['n_shape'])
        n_shape = None if n_shape < 0 else n_shape
        if kind == 'chart':
            layout = ChartLayout(EigenbasisChart(f['chart_basis'][()],
                                                 f['chart_eigenvalues'][()]),
                                 n_shape)
        elif kind == 'correlation':
            layout = CorrelationLayout(dim, n_shape)
        elif kind == 'triangle':
            layout = TriangleLayout(dim, n_shape)
        else:
            raise RecordError(f"{path}: unknown layout {kind!r}")
        seed = [int(s) for s in f.attrs['seed']]
        return HyperSampleSet(
            read_rows(f['samples']),
            f['log_target_values'][()],
            f['stage_exponents'][()],
            seed[0] if len(seed) == 1 else tuple(seed),
            layout,
            float(f.attrs['log_evidence']))


# Reports.

def to_jsonable(obj):
    """Convert arrays and NumPy scalars to plain Python values."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for (k, v) in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, numpy.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, numpy.bool_):
        return bool(obj)
    if isinstance(obj, numpy.integer):
        return int(obj)
    if isinstance(obj, numpy.floating):
        return float(obj)
    return obj


def dumps_json(obj):
    """Canonical JSON text: sorted keys, two-space indent, final newline."""
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=2,
                      allow_nan=False) + '\n'


def dump_json(path, obj):
    with open(path, 'w', newline='\n') as f:
        f.write(dumps_json(obj))


def load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, ValueError) as exc:
        raise RecordError(f"{path}: {exc}") from exc
