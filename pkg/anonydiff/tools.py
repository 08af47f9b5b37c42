#!/usr/bin/env python
import hashlib
import json
import os
import platform
from datetime import datetime
from pathlib import Path

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt
import matplotlib.ticker as mtick
import numpy as np
import torch
from PIL import Image as PILImage

from anonydiff import __version__
from anonydiff.errors import DatasetIOError, MissingFileError, ShapeMismatchError

IMG_MAGIC = 'IMG v1'


def get_sha256(filename):
    # SHA-256 of the whole file contents
    with open(filename, 'rb') as file_to_check:
        data = file_to_check.read()
        sha_returned = hashlib.sha256(data).hexdigest()

    return sha_returned


def read_json(path):
    """
    Parsed JSON document. A missing file raises MissingFileError; an unreadable or
    corrupt one raises DatasetIOError.
    """
    if not os.path.isfile(path):
        raise MissingFileError(f'{path} does not exist')
    try:
        with open(path, 'r') as infile:
            return json.load(infile)
    except (OSError, ValueError) as err:
        raise DatasetIOError(f'cannot read {path}: {err}') from None


def array_sha256(array):
    """
    Hash of an array's dtype, shape and little-endian row-major payload
    """
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.ascontiguousarray(array)
    array = array.astype(array.dtype.newbyteorder('<'), copy=False)
    digest = hashlib.sha256()
    digest.update(f'{array.dtype.str}{array.shape}'.encode())
    digest.update(array.tobytes())
    return digest.hexdigest()


def state_hash(tensors):
    """
    Hash of a name -> tensor mapping (a module's state_dict or any parameter subset).
    Names are visited in sorted order so the result does not depend on insertion order.

    :param tensors: torch.nn.Module or dict of tensors
    :return: hex digest
    """
    if isinstance(tensors, torch.nn.Module):
        tensors = tensors.state_dict()
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode())
        digest.update(array_sha256(tensors[name]).encode())
    return digest.hexdigest()


def write_image(path, image):
    """
    Writes an H x W x C image as a flat little-endian float32 binary with an IMG v1 header line
    """
    image = np.asarray(image, dtype='<f4')
    if image.ndim != 3:
        raise ShapeMismatchError(f'expected an H x W x C image, got shape {image.shape}')
    height, width, channels = image.shape
    try:
        with open(path, 'wb') as outfile:
            outfile.write(f'{IMG_MAGIC} {height} {width} {channels}\n'.encode('ascii'))
            outfile.write(np.ascontiguousarray(image).tobytes())
    except OSError as err:
        raise DatasetIOError(f'cannot write image {path}: {err}') from err
    return Path(path)


def read_image(path):
    """
    Reads an IMG v1 binary back into a float32 H x W x C array
    """
    if not os.path.isfile(path):
        raise MissingFileError(f'{path} does not exist')
    with open(path, 'rb') as infile:
        header = infile.readline().decode('ascii').split()
        payload = infile.read()
    if len(header) != 5 or ' '.join(header[:2]) != IMG_MAGIC:
        raise DatasetIOError(f'{path} is not an {IMG_MAGIC} image')
    shape = tuple(int(x) for x in header[2:])
    image = np.frombuffer(payload, dtype='<f4')
    if image.size != int(np.prod(shape)):
        raise DatasetIOError(f'{path} payload does not match header shape {shape}')
    return image.reshape(shape).astype(np.float32)


def save_png(path, image):
    """
    Presentation copy of an image: [-1, 1] mapped to [0, 255] with round-half-even
    """
    image = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    pixels = np.rint((image + 1.0) * 127.5).astype(np.uint8)
    PILImage.fromarray(pixels).save(path)
    return Path(path)


def load_png(path):
    if not os.path.isfile(path):
        raise MissingFileError(f'{path} does not exist')
    pixels = np.asarray(PILImage.open(path).convert('RGB'), dtype=np.float32)
    return pixels / 127.5 - 1.0


def load_any_image(path):
    """
    Loads either an IMG v1 binary or a PNG depending on the file suffix
    """
    if str(path).lower().endswith('.png'):
        return load_png(path)
    return read_image(path)


def to_tensor(image, dtype=torch.float32):
    """
    H x W x C numpy image -> C x H x W tensor. Tensors are passed through unchanged apart from dtype.
    """
    if isinstance(image, torch.Tensor):
        return image.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(np.transpose(image, (2, 0, 1)))).to(dtype)


def to_image(tensor):
    """
    C x H x W tensor -> H x W x C float32 numpy image
    """
    if isinstance(tensor, np.ndarray):
        return tensor.astype(np.float32)
    return tensor.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32)


def max_threads(requested=0):
    """
    Worker count: the requested number if positive, capped by ANONYDIFF_THREADS when set
    """
    threads = requested if requested and requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get('ANONYDIFF_THREADS')
    if cap:
        threads = min(threads, max(1, int(cap)))
    return threads


def configure_threads(requested=0):
    threads = max_threads(requested)
    torch.set_num_threads(threads)
    return threads


def versions():
    return {'anonydiff': __version__,
            'python': platform.python_version(),
            'numpy': np.__version__,
            'torch': torch.__version__}


def write_run_manifest(out_dir, command, config, seed, inputs=(), outputs=(), extra=None):
    """
    Writes run_manifest.json describing how the outputs of a command were produced

    :param out_dir: command output directory
    :param command: subcommand name
    :param config: RunConfig used for the run
    :param seed: seed the command ran with
    :param inputs: paths of files read by the command
    :param outputs: paths of files written by the command
    :param extra: additional JSON-serializable fields
    :return: path of the manifest
    """
    # wall-clock facts live under 'meta'; everything else is identical across reruns
    manifest = {'command': command,
                'meta': {'created': datetime.now().strftime('%d-%b-%Y_%H-%M-%S')},
                'config_hash': config.config_hash(),
                'seed': seed,
                'versions': versions(),
                'inputs': {str(p): get_sha256(p) for p in inputs if os.path.isfile(p)},
                'outputs': {str(p): get_sha256(p) for p in outputs if os.path.isfile(p)}}
    if extra:
        manifest.update(extra)
    path = Path(out_dir, 'run_manifest.json')
    with open(path, 'w') as outfile:
        json.dump(manifest, outfile, indent=2, sort_keys=True)
    return path


def make_plot(df, x, y, plot_name, y_label, percent=False):
    """
    Line plot of one summary column against another, written as a PDF.
    Input: pandas DataFrame, column names, plot name (without extension)
    Output: PDF of plot
    """
    fig = plt.figure()
    ax = fig.add_subplot(111)
    ax.plot(df[x], df[y], marker='o', color='navy')

    ax.set_xlabel(x, labelpad=10, fontsize=12)
    ax.set_ylabel(y_label, labelpad=10, fontsize=12)
    if percent:
        ax.yaxis.set_major_formatter(mtick.PercentFormatter(1.0))
        ax.set_ylim(0, 1.05)
    ax.grid(True, color='grey', alpha=0.3)

    fig.tight_layout()
    fig.savefig(f'{plot_name}.pdf')
    plt.close(fig)
