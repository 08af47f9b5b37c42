#!/usr/bin/env python
"""
Flat tensor archive: a directory holding one little-endian row-major payload per
entry and a MANIFEST.json listing name, dtype, shape and content hash of each.
"""
import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

from anonydiff import __version__, tools
from anonydiff.errors import DatasetIOError, HashMismatchError, MissingFileError

MANIFEST = 'MANIFEST.json'
ARCHIVE_FORMAT = 'anonydiff-tensors v1'
DTYPES = {'fp32': '<f4', 'fp64': '<f8'}


def _dtype_tag(array):
    if array.dtype == np.float32:
        return 'fp32'
    if array.dtype == np.float64:
        return 'fp64'
    raise DatasetIOError(f'unsupported archive dtype {array.dtype}')


def _file_name(name):
    return name.replace('/', '_') + '.bin'


def save_archive(path, tensors, config_hash='', meta=None):
    """
    Writes a name -> tensor mapping to an archive directory. The manifest is written last.

    :param path: archive directory (created if missing)
    :param tensors: dict of torch tensors or numpy arrays (fp32/fp64)
    :param config_hash: hash of the RunConfig that produced the tensors
    :param meta: optional JSON-serializable metadata stored in the manifest
    :return: archive path
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        entries = []
        for name in sorted(tensors):
            array = tensors[name]
            if isinstance(array, torch.Tensor):
                array = array.detach().cpu().numpy()
            array = np.asarray(array)
            tag = _dtype_tag(array)
            payload = np.ascontiguousarray(array, dtype=DTYPES[tag]).tobytes()
            file_name = _file_name(name)
            with open(path / file_name, 'wb') as outfile:
                outfile.write(payload)
            entries.append({'name': name,
                            'dtype': tag,
                            'shape': list(array.shape),
                            'file': file_name,
                            'sha256': hashlib.sha256(payload).hexdigest()})

        manifest = {'format': ARCHIVE_FORMAT,
                    'creator': f'anonydiff {__version__}',
                    'config_hash': config_hash,
                    'entries': entries,
                    'meta': meta or {}}
        with open(path / MANIFEST, 'w') as outfile:
            json.dump(manifest, outfile, indent=2, sort_keys=True)
    except OSError as err:
        raise DatasetIOError(f'cannot write archive {path}: {err}') from err

    return path


def read_manifest(path):
    manifest_path = Path(path, MANIFEST)
    manifest = tools.read_json(manifest_path)
    if not isinstance(manifest, dict) or not isinstance(manifest.get('entries'), list):
        raise DatasetIOError(f'{manifest_path} has no entry list')
    return manifest


def load_archive(path):
    """
    Loads an archive, verifying every entry against the manifest hash

    :param path: archive directory
    :return: (dict of name -> torch tensor, manifest dict)
    """
    manifest = read_manifest(path)
    try:
        entries = [(entry['name'], Path(path, entry['file']), entry['sha256'], DTYPES[entry['dtype']],
                    tuple(int(n) for n in entry['shape'])) for entry in manifest['entries']]
    except (KeyError, TypeError, ValueError) as err:
        raise DatasetIOError(f'{Path(path, MANIFEST)} has a malformed entry: {err!r}') from None

    tensors = {}
    for name, entry_path, sha256, dtype, shape in entries:
        if not os.path.isfile(entry_path):
            raise MissingFileError(f'{entry_path} listed in manifest does not exist')
        with open(entry_path, 'rb') as infile:
            payload = infile.read()
        if hashlib.sha256(payload).hexdigest() != sha256:
            raise HashMismatchError(f'{entry_path} does not match its manifest hash')
        try:
            array = np.frombuffer(payload, dtype=dtype).reshape(shape)
        except ValueError as err:
            raise DatasetIOError(f'{entry_path} does not hold shape {shape}: {err}') from None
        tensors[name] = torch.from_numpy(array.astype(array.dtype.newbyteorder('='), copy=True))

    return tensors, manifest
