import numpy as np
import pytest
import torch

from anonydiff import embedding, synthetic_faces, tools
from anonydiff.errors import InsufficientDataError, NonUnitNormError, ShapeMismatchError

from conftest import TINY_SIZE, slow


def _render(identity_id, seed=0):
    rng = np.random.default_rng(seed)
    factors = synthetic_faces.sample_identity(0, identity_id).with_attributes(
        **synthetic_faces.sample_attributes(rng))
    return synthetic_faces.render(factors, TINY_SIZE)


def test_embed_is_unit_norm_and_deterministic(tiny_recognizer):
    image = _render(1)
    z = embedding.embed(tiny_recognizer, image)
    assert z.shape == (8,)
    assert float(z.norm()) == pytest.approx(1.0, abs=1e-5)
    assert torch.equal(z, embedding.embed(tiny_recognizer, image))

    batch = torch.stack([tools.to_tensor(_render(i)) for i in range(3)])
    assert embedding.embed(tiny_recognizer, batch).shape == (3, 8)


def test_spatial_features_shape(tiny_recognizer):
    tokens = embedding.spatial_features(tiny_recognizer, _render(0))
    assert tokens.shape == (tiny_recognizer.token_grid ** 2, tiny_recognizer.feature_dim)
    assert tokens.shape == (4, 8)


def test_wrong_image_size_is_rejected(tiny_recognizer):
    with pytest.raises(ShapeMismatchError):
        embedding.embed(tiny_recognizer, np.zeros((16, 16, 3), dtype=np.float32))


def test_identity_distance():
    z = np.array([0.6, 0.8])
    assert embedding.identity_distance(z, z) == pytest.approx(0.0, abs=1e-12)
    assert embedding.identity_distance(z, -z) == pytest.approx(2.0)
    assert embedding.identity_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)
    with pytest.raises(NonUnitNormError):
        embedding.identity_distance([2.0, 0.0], [1.0, 0.0])
    with pytest.raises(ShapeMismatchError):
        embedding.identity_distance([1.0, 0.0], [1.0, 0.0, 0.0])


def test_training_is_seed_deterministic(tiny_recognizer):
    images, labels = embedding.render_identity_set([0, 1, 2], 4, seed=0, size=TINY_SIZE)
    again = embedding.train_recognizer(images, labels, tiny_recognizer.config, verbose=False)
    assert again.parameter_hash() == tiny_recognizer.parameter_hash()
    assert 0.0 <= again.accuracy <= 1.0


def test_training_needs_two_identities():
    images, labels = embedding.render_identity_set([0], 4, seed=0, size=TINY_SIZE)
    config = embedding.RecognizerConfig(widths=(4, 8, 8), embed_dim=8, image_size=TINY_SIZE, epochs=1)
    with pytest.raises(InsufficientDataError):
        embedding.train_recognizer(images, labels, config, verbose=False)


def test_recognizer_is_frozen(tiny_recognizer):
    assert not any(p.requires_grad for p in tiny_recognizer.net.parameters())


def test_save_and_load(tiny_recognizer, tmp_path):
    embedding.save_recognizer(tiny_recognizer, tmp_path / 'encoder', config_hash='abc')
    loaded = embedding.load_recognizer(tmp_path / 'encoder')
    assert loaded.parameter_hash() == tiny_recognizer.parameter_hash()
    assert loaded.n_classes == 3
    image = _render(2)
    assert torch.equal(embedding.embed(loaded, image), embedding.embed(tiny_recognizer, image))


def test_recognizer_training_set_uses_train_identities(tiny_dataset):
    images, labels = embedding.recognizer_training_set(tiny_dataset, 2, seed=0)
    n_train = len(tiny_dataset.split('train').identities)
    assert images.shape == (2 * n_train, 3, TINY_SIZE, TINY_SIZE)
    assert sorted(set(labels.tolist())) == list(range(n_train))


def _untrained(image_size=synthetic_faces.IMAGE_SIZE):
    config = embedding.RecognizerConfig(widths=(4, 8, 8), embed_dim=8, image_size=image_size, seed=0)
    with torch.random.fork_rng():
        torch.manual_seed(0)
        net = embedding.RecognizerNet(config.widths, config.embed_dim, 2)
    return embedding.Recognizer(net, config, 2)


def test_full_size_token_grid():
    recognizer = _untrained()
    rng = np.random.default_rng(0)
    image = rng.uniform(-1.0, 1.0, (32, 32, 3)).astype(np.float32)
    assert embedding.spatial_features(recognizer, image).shape == (64, 8)

    zeros = np.zeros((32, 32, 3), dtype=np.float32)
    assert torch.isfinite(embedding.spatial_features(recognizer, zeros)).all()
    assert torch.isfinite(embedding.embed(recognizer, zeros)).all()


@pytest.mark.parametrize('pixel', [(0, 0, 0), (4, 5, 1), (7, 7, 2)])
def test_embed_is_stable_under_tiny_perturbation(tiny_recognizer, pixel):
    image = _render(1)
    nudged = image.copy()
    nudged[pixel] += 1e-6
    change = embedding.embed(tiny_recognizer, nudged) - embedding.embed(tiny_recognizer, image)
    assert float(change.norm()) < 1e-2


@pytest.fixture(scope='module')
def twenty_identity_recognizer():
    images, labels = embedding.render_identity_set(range(20), 20, seed=3)
    return embedding.train_recognizer(images, labels, embedding.RecognizerConfig(seed=3), verbose=False)


@slow
def test_recognizer_separates_twenty_identities(twenty_identity_recognizer):
    assert twenty_identity_recognizer.accuracy >= 0.95


@slow
def test_embeddings_cluster_by_identity(twenty_identity_recognizer):
    images, labels = embedding.render_identity_set(range(20), 6, seed=99)
    z = embedding.embed(twenty_identity_recognizer, images).double()
    distance = 1.0 - z @ z.T
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~torch.eye(len(labels), dtype=torch.bool)
    within = distance[same & off_diagonal].mean()
    across = distance[~same].mean()
    assert within < across

    # full-size recognizer is also stable to a single-pixel nudge
    image = images[0].clone()
    nudged = image.clone()
    nudged[1, 16, 16] += 1e-6
    change = embedding.embed(twenty_identity_recognizer, nudged) - embedding.embed(twenty_identity_recognizer, image)
    assert float(change.norm()) < 1e-2
