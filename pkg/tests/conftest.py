import os

import pytest

from anonydiff import embedding, synthetic_faces
from anonydiff.condnet import DenoiserConfig, init_networks

TINY_SIZE = 8

slow = pytest.mark.skipif(os.environ.get('ANONYDIFF_SLOW') != '1',
                          reason='long-running acceptance check, set ANONYDIFF_SLOW=1')


def tiny_denoiser_config(dtype='float32', embed_dim=8, token_dim=8):
    return DenoiserConfig(widths=(8, 16, 16), attention_levels=(1, 2), heads=2, embed_dim=embed_dim,
                          time_dim=16, token_dim=token_dim, token_grid=TINY_SIZE // 4, image_size=TINY_SIZE,
                          groups=4, dtype=dtype)


@pytest.fixture(scope='session')
def tiny_recognizer():
    images, labels = embedding.render_identity_set([0, 1, 2], 4, seed=0, size=TINY_SIZE)
    config = embedding.RecognizerConfig(widths=(4, 8, 8), embed_dim=8, image_size=TINY_SIZE, epochs=1,
                                        batch_size=8, seed=3)
    return embedding.train_recognizer(images, labels, config, verbose=False)


@pytest.fixture
def tiny_config():
    return tiny_denoiser_config()


@pytest.fixture
def tiny_networks(tiny_config):
    return init_networks(tiny_config, seed=0)


@pytest.fixture(scope='session')
def tiny_dataset_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp('faces') / 'dataset'
    dataset_dir, _ = synthetic_faces.make_dataset(5, 2, seed=0, out_dir=out_dir, heldout_fraction=0.4,
                                                  size=TINY_SIZE, threads=1)
    return dataset_dir


@pytest.fixture
def tiny_dataset(tiny_dataset_dir):
    return synthetic_faces.load_dataset(tiny_dataset_dir)
