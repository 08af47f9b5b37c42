#!/usr/bin/env python
"""
Small convolutional identity recognizer trained on synthetic faces. Once trained it is
frozen and provides the pooled image embedding (Z_img) and the intermediate token map
fed to the ReferenceNets. A second instance with its own seed and widths serves as the
evaluator for identity metrics.
"""
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from tqdm import tqdm

from anonydiff import archive, synthetic_faces, tools
from anonydiff.errors import DatasetIOError, InsufficientDataError, NonUnitNormError, ShapeMismatchError

SIDECAR = 'recognizer.json'
EVALUATOR_ID_OFFSET = 1_000_000


@dataclass
class RecognizerConfig:
    widths: tuple = (32, 64, 64)
    embed_dim: int = 64
    image_size: int = synthetic_faces.IMAGE_SIZE
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    heldout_fraction: float = 0.25
    seed: int = 11


def conv_block(in_width, out_width, stride=1):
    """
    3x3 conv -> GroupNorm -> ReLU
    """
    return nn.Sequential(nn.Conv2d(in_width, out_width, 3, stride=stride, padding=1),
                         nn.GroupNorm(math.gcd(8, out_width), out_width), nn.ReLU())


def reduced_size(image_size):
    # spatial size after the two stride-2 stages
    return ((image_size + 1) // 2 + 1) // 2


class RecognizerNet(nn.Module):
    """
    conv stem -> two stride-2 stages (token tap) -> refine -> mean+max pooled embedding -> classifier
    """

    def __init__(self, widths, embed_dim, n_classes):
        super().__init__()
        w0, w1, w2 = widths
        self.stem = conv_block(3, w0)
        self.down1 = conv_block(w0, w1, stride=2)
        self.down2 = conv_block(w1, w2, stride=2)
        self.refine = conv_block(w2, w2)
        self.embed = nn.Linear(2 * w2, embed_dim)
        self.classifier = nn.Linear(embed_dim, n_classes)

    def features(self, x):
        return self.down2(self.down1(self.stem(x)))

    def embedding(self, x):
        refined = self.refine(self.features(x))
        pooled = torch.cat([refined.mean(dim=(2, 3)), refined.amax(dim=(2, 3))], dim=1)
        return self.embed(pooled)

    def forward(self, x):
        return self.classifier(self.embedding(x))


class Recognizer:
    """
    Frozen recognizer together with the facts recorded in its sidecar
    """

    def __init__(self, net, config, n_classes, accuracy=None):
        self.net = net.eval()
        for param in self.net.parameters():
            param.requires_grad_(False)
        self.config = config
        self.n_classes = n_classes
        self.accuracy = accuracy

    @property
    def embed_dim(self):
        return self.config.embed_dim

    @property
    def feature_dim(self):
        return self.config.widths[2]

    @property
    def token_grid(self):
        return reduced_size(self.config.image_size)

    def parameter_hash(self):
        return tools.state_hash(self.net)


def _as_batch(recognizer, image):
    """
    Accepts H x W x 3 arrays, 3 x H x W tensors or B x 3 x H x W tensors
    """
    if isinstance(image, np.ndarray):
        image = tools.to_tensor(image)
    image = image.to(torch.float32)
    single = image.dim() == 3
    if single:
        image = image.unsqueeze(0)
    size = recognizer.config.image_size
    if image.dim() != 4 or tuple(image.shape[1:]) != (3, size, size):
        raise ShapeMismatchError(f'recognizer expects 3 x {size} x {size} images, got {tuple(image.shape)}')
    return image, single


def embed(recognizer, image):
    """
    Unit-norm identity embedding Z_img of an image (or a batch of images)
    """
    batch, single = _as_batch(recognizer, image)
    with torch.no_grad():
        z = F.normalize(recognizer.net.embedding(batch), dim=-1)
    return z[0] if single else z


def spatial_features(recognizer, image):
    """
    T x C token matrix from the recognizer's intermediate feature map (T = spatial positions)
    """
    batch, single = _as_batch(recognizer, image)
    with torch.no_grad():
        tokens = recognizer.net.features(batch).flatten(2).transpose(1, 2).contiguous()
    return tokens[0] if single else tokens


def identity_distance(z1, z2):
    """
    Cosine distance 1 - <z1, z2> between unit-norm embeddings, in [0, 2]
    """
    z1 = np.asarray(z1, dtype=np.float64).ravel()
    z2 = np.asarray(z2, dtype=np.float64).ravel()
    if z1.shape != z2.shape:
        raise ShapeMismatchError(f'embedding shapes differ: {z1.shape} vs {z2.shape}')
    for z in (z1, z2):
        if abs(np.linalg.norm(z) - 1.0) > 1e-3:
            raise NonUnitNormError(f'embedding norm {np.linalg.norm(z):.6f} is not 1')
    return float(np.clip(1.0 - np.dot(z1, z2), 0.0, 2.0))


def render_identity_set(identity_ids, renders_per_identity, seed, world_seed=0,
                        size=synthetic_faces.IMAGE_SIZE):
    """
    Renders several random attribute samples per identity

    :return: (N x 3 x H x W float32 tensor, N labels as class indices)
    """
    rng = np.random.default_rng([int(seed), len(identity_ids), renders_per_identity])
    images, labels = [], []
    for label, identity_id in enumerate(identity_ids):
        identity = synthetic_faces.sample_identity(world_seed, identity_id)
        for _ in range(renders_per_identity):
            factors = identity.with_attributes(**synthetic_faces.sample_attributes(rng))
            images.append(tools.to_tensor(synthetic_faces.render(factors, size)))
            labels.append(label)
    return torch.stack(images), torch.tensor(labels, dtype=torch.long)


def recognizer_training_set(dataset, renders_per_identity, seed):
    """
    Render set over the train-split identities of a dataset
    """
    identity_ids = dataset.split('train').identities
    return render_identity_set(identity_ids, renders_per_identity, seed, world_seed=dataset.seed,
                               size=dataset.image_size)


def _holdout_split(labels, fraction, generator):
    train_idx, heldout_idx = [], []
    for label in torch.unique(labels).tolist():
        members = torch.nonzero(labels == label).flatten()
        members = members[torch.randperm(len(members), generator=generator)]
        n_heldout = min(len(members) - 1, max(1, int(round(len(members) * fraction))))
        heldout_idx.append(members[:n_heldout])
        train_idx.append(members[n_heldout:])
    return torch.cat(train_idx), torch.cat(heldout_idx)


def train_recognizer(images, labels, config, verbose=True):
    """
    Trains the recognizer with cross entropy and AdamW; held-out renders of every identity
    measure its accuracy.

    :param images: N x 3 x H x W tensor in [-1, 1]
    :param labels: N class indices
    :param config: RecognizerConfig
    :return: frozen Recognizer
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    classes, counts = torch.unique(labels, return_counts=True)
    if len(classes) < 2 or int(counts.min()) < 2:
        raise InsufficientDataError('recognizer training needs at least 2 identities with 2 images each')
    if tuple(images.shape[1:]) != (3, config.image_size, config.image_size):
        raise ShapeMismatchError(f'training images have shape {tuple(images.shape[1:])}')

    generator = torch.Generator().manual_seed(int(config.seed))
    train_idx, heldout_idx = _holdout_split(labels, config.heldout_fraction, generator)

    with torch.random.fork_rng():
        torch.manual_seed(int(config.seed))
        net = RecognizerNet(config.widths, config.embed_dim, int(classes.max()) + 1)
    optimizer = torch.optim.AdamW(net.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    steps_per_epoch = -(-len(train_idx) // config.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, config.epochs * steps_per_epoch))

    net.train()
    epochs = tqdm(range(config.epochs), desc='recognizer', disable=not verbose)
    for _ in epochs:
        order = train_idx[torch.randperm(len(train_idx), generator=generator)]
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            # faces are left-right symmetric up to the sign of yaw, so a mirror keeps the identity
            flip = torch.rand(len(batch), generator=generator) < 0.5
            batch_images = images[batch].float()
            batch_images = torch.where(flip[:, None, None, None], batch_images.flip(-1), batch_images)
            loss = F.cross_entropy(net(batch_images), labels[batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
        epochs.set_postfix(loss=f'{loss.item():.4f}')

    net.eval()
    with torch.no_grad():
        predicted = net(images[heldout_idx].float()).argmax(dim=1)
    accuracy = float((predicted == labels[heldout_idx]).float().mean())
    if verbose:
        print(f'recognizer held-out accuracy: {accuracy:.4f}')

    return Recognizer(net, config, int(classes.max()) + 1, accuracy)


def save_recognizer(recognizer, path, config_hash=''):
    archive.save_archive(path, recognizer.net.state_dict(), config_hash=config_hash,
                         meta={'kind': 'recognizer'})
    sidecar = {'input_hw': [recognizer.config.image_size] * 2,
               'D': recognizer.embed_dim,
               'class_count': recognizer.n_classes,
               'seed': recognizer.config.seed,
               'accuracy': recognizer.accuracy,
               'config': asdict(recognizer.config)}
    with open(Path(path, SIDECAR), 'w') as outfile:
        json.dump(sidecar, outfile, indent=2, sort_keys=True)
    return Path(path)


def load_recognizer(path):
    sidecar_path = Path(path, SIDECAR)
    sidecar = tools.read_json(sidecar_path)
    try:
        settings = dict(sidecar['config'])
        settings['widths'] = tuple(settings['widths'])
        config = RecognizerConfig(**settings)
        n_classes, accuracy = int(sidecar['class_count']), sidecar['accuracy']
    except (KeyError, TypeError, ValueError) as err:
        raise DatasetIOError(f'{sidecar_path} is not a recognizer sidecar: {err!r}') from None
    tensors, _ = archive.load_archive(path)
    net = RecognizerNet(config.widths, config.embed_dim, n_classes)
    net.load_state_dict(tensors)
    return Recognizer(net, config, n_classes, accuracy)
