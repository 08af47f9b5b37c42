#!/usr/bin/env python
"""
Evaluation of anonymized and swapped faces: re-identification rate, identity distance,
pose/gaze angular distances, shape/expression coefficient distances, a face-validity proxy,
d sweeps and the ablation grid.
"""
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn
from scipy.stats import spearmanr
from tqdm import tqdm

from anonydiff import anonymize, archive, embedding, synthetic_faces, tools
from anonydiff.errors import (DatasetIOError, DimensionMismatchError, EmptyInputError, InsufficientDataError,
                              NonUnitNormError, ShapeMismatchError, UntrainedProbeError, ZeroVectorError)

PROBE_SIDECAR = 'attribute_probe.json'
PROBE_ID_OFFSET = 2_000_000
N_SHAPE = 6
# pose (yaw, pitch, roll), gaze (yaw, pitch), shape, expression
OUTPUT_SLICES = {'pose': slice(0, 3), 'gaze': slice(3, 5), 'shape': slice(5, 5 + N_SHAPE),
                 'expression': slice(5 + N_SHAPE, 5 + N_SHAPE + synthetic_faces.EXPRESSION_DIM)}
N_OUTPUTS = 5 + N_SHAPE + synthetic_faces.EXPRESSION_DIM
RECORD_COLUMNS = ['reid_hit', 'id_dist', 'shape_dist', 'pose_dist', 'gaze_dist', 'expr_dist', 'face_valid']
VALIDITY_THRESHOLD = 0.5
VALIDITY_CONTRAST = 0.3


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def to_matrix(self):
        w, x, y, z = self.as_array()
        return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                         [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                         [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def euler_to_quaternion(yaw, pitch, roll):
    """
    Intrinsic yaw (z), pitch (y), roll (x) composition: R = Rz(yaw) Ry(pitch) Rx(roll)
    """
    cy, sy = math.cos(yaw / 2.0), math.sin(yaw / 2.0)
    cp, sp = math.cos(pitch / 2.0), math.sin(pitch / 2.0)
    cr, sr = math.cos(roll / 2.0), math.sin(roll / 2.0)
    return Quaternion(w=cy * cp * cr + sy * sp * sr,
                      x=cy * cp * sr - sy * sp * cr,
                      y=cy * sp * cr + sy * cp * sr,
                      z=sy * cp * cr - cy * sp * sr)


def _unit_quaternion(q):
    q = q.as_array() if isinstance(q, Quaternion) else np.asarray(q, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > 1e-3:
        raise NonUnitNormError(f'quaternion norm {np.linalg.norm(q):.6f} is not 1')
    return q


def quaternion_distance(q1, q2):
    """
    Rotation angle between two orientations, 2 arccos |<q1, q2>|, in [0, pi]
    """
    dot = abs(float(np.dot(_unit_quaternion(q1), _unit_quaternion(q2))))
    return 2.0 * math.acos(min(1.0, dot))


def gaze_direction(yaw, pitch):
    """
    Unit gaze vector of eye-in-head angles; (0, 0) looks along +z
    """
    return np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch), math.cos(yaw) * math.cos(pitch)])


def gaze_distance(g1, g2):
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if g1.shape != g2.shape:
        raise DimensionMismatchError(f'gaze vectors {g1.shape} and {g2.shape} differ')
    n1, n2 = np.linalg.norm(g1), np.linalg.norm(g2)
    if n1 == 0 or n2 == 0:
        raise ZeroVectorError('gaze direction is the zero vector')
    return float(math.acos(float(np.clip(np.dot(g1, g2) / (n1 * n2), -1.0, 1.0))))


def coefficient_distance(c1, c2):
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if c1.shape != c2.shape:
        raise DimensionMismatchError(f'coefficient vectors {c1.shape} and {c2.shape} differ')
    return float(np.linalg.norm(c1 - c2))


@dataclass
class AttributeEstimate:
    pose: Quaternion
    gaze: np.ndarray
    shape: np.ndarray
    expression: np.ndarray


def attribute_distances(a, b):
    return {'pose_dist': quaternion_distance(a.pose, b.pose),
            'gaze_dist': gaze_distance(a.gaze, b.gaze),
            'shape_dist': coefficient_distance(a.shape, b.shape),
            'expr_dist': coefficient_distance(a.expression, b.expression)}


def _estimate_from_vector(pose, gaze, shape, expression):
    return AttributeEstimate(pose=euler_to_quaternion(*[float(x) for x in pose]),
                             gaze=gaze_direction(float(gaze[0]), float(gaze[1])),
                             shape=np.asarray(shape, dtype=np.float64),
                             expression=np.asarray(expression, dtype=np.float64))


def oracle_attributes(factors):
    """
    Attribute estimate read directly from render factors
    """
    return _estimate_from_vector(factors.pose, factors.gaze, synthetic_faces.shape_coefficients(factors),
                                 factors.expression)


@dataclass
class ProbeConfig:
    widths: tuple = (32, 64, 64)
    hidden: int = 64
    image_size: int = synthetic_faces.IMAGE_SIZE
    renders: int = 4000
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    heldout_fraction: float = 0.1
    seed: int = 5


class AttributeNet(nn.Module):
    """
    Recognizer-style conv stages with a flattened head, so the regressor sees where
    features sit in the frame and not only what they are
    """

    def __init__(self, widths, hidden, image_size):
        super().__init__()
        w0, w1, w2 = widths
        grid = embedding.reduced_size(image_size)
        self.stem = embedding.conv_block(3, w0)
        self.down1 = embedding.conv_block(w0, w1, stride=2)
        self.down2 = embedding.conv_block(w1, w2, stride=2)
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(w2 * grid * grid, hidden), nn.ReLU(),
                                  nn.Linear(hidden, N_OUTPUTS))

    def forward(self, x):
        return self.head(self.down2(self.down1(self.stem(x))))


class AttributeProbe:
    """
    Recognizer-shaped regressor predicting pose, gaze, shape and expression. Targets are
    standardized with the statistics of the training renders.
    """

    def __init__(self, config, net=None, target_mean=None, target_std=None, pose_error=None):
        self.config = config
        self.net = net
        self.target_mean = target_mean
        self.target_std = target_std
        self.pose_error = pose_error
        if net is not None:
            self.net.eval()
            for param in self.net.parameters():
                param.requires_grad_(False)

    @property
    def trained(self):
        return self.net is not None


def _target_vector(factors):
    return np.concatenate([factors.pose, factors.gaze, synthetic_faces.shape_coefficients(factors),
                           factors.expression])


def render_attribute_set(n_renders, seed, world_seed=0, size=synthetic_faces.IMAGE_SIZE):
    """
    Random identities and attributes with their target vectors

    :return: (N x 3 x H x W tensor, N x N_OUTPUTS float64 array, list of FaceFactors)
    """
    rng = np.random.default_rng([int(seed), n_renders])
    images, targets, factors_list = [], [], []
    for _ in range(n_renders):
        identity_id = PROBE_ID_OFFSET + int(rng.integers(0, 10 ** 6))
        factors = synthetic_faces.sample_identity(world_seed, identity_id).with_attributes(
            **synthetic_faces.sample_attributes(rng))
        images.append(tools.to_tensor(synthetic_faces.render(factors, size)))
        targets.append(_target_vector(factors))
        factors_list.append(factors)
    return torch.stack(images), np.array(targets), factors_list


def train_attribute_probe(config, world_seed=0, verbose=True):
    """
    Trains the attribute probe on fresh renders and records the median held-out pose error
    """
    if config.renders < 10:
        raise InsufficientDataError(f'attribute probe needs at least 10 renders, got {config.renders}')
    images, targets, factors_list = render_attribute_set(config.renders, config.seed, world_seed,
                                                         config.image_size)
    n_heldout = max(1, int(round(config.renders * config.heldout_fraction)))
    train_images, heldout_images = images[n_heldout:], images[:n_heldout]
    mean = targets[n_heldout:].mean(axis=0)
    std = targets[n_heldout:].std(axis=0) + 1e-6
    scaled = torch.tensor((targets - mean) / std, dtype=torch.float32)

    with torch.random.fork_rng():
        torch.manual_seed(int(config.seed))
        net = AttributeNet(config.widths, config.hidden, config.image_size)
    optimizer = torch.optim.AdamW(net.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    generator = torch.Generator().manual_seed(int(config.seed))
    steps_per_epoch = -(-len(train_images) // config.batch_size)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, config.epochs * steps_per_epoch))

    net.train()
    epochs = tqdm(range(config.epochs), desc='attribute probe', disable=not verbose)
    for _ in epochs:
        order = torch.randperm(len(train_images), generator=generator)
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            loss = F.mse_loss(net(train_images[batch]), scaled[n_heldout:][batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
        epochs.set_postfix(loss=f'{loss.item():.4f}')

    probe = AttributeProbe(config, net, mean, std)
    estimates = estimate_attributes(probe, heldout_images)
    errors = [quaternion_distance(e.pose, oracle_attributes(f).pose)
              for e, f in zip(estimates, factors_list[:n_heldout])]
    probe.pose_error = float(np.median(errors))
    if verbose:
        print(f'attribute probe held-out median pose error: {probe.pose_error:.4f} rad')
    return probe


def estimate_attributes(probe, image):
    """
    Attribute estimate of an image, or a list of estimates for a batch

    :param image: H x W x 3 array, 3 x H x W tensor or B x 3 x H x W tensor
    """
    if probe is None or not probe.trained:
        raise UntrainedProbeError('attribute probe has not been trained; run `anonydiff train-probe`')
    batch = tools.to_tensor(image) if isinstance(image, np.ndarray) else image.to(torch.float32)
    single = batch.dim() == 3
    if single:
        batch = batch.unsqueeze(0)
    size = probe.config.image_size
    if tuple(batch.shape[1:]) != (3, size, size):
        raise ShapeMismatchError(f'attribute probe expects 3 x {size} x {size} images, got {tuple(batch.shape)}')
    with torch.no_grad():
        outputs = probe.net(batch).double().numpy() * probe.target_std + probe.target_mean
    estimates = [_estimate_from_vector(*(row[OUTPUT_SLICES[k]] for k in ('pose', 'gaze', 'shape', 'expression')))
                 for row in outputs]
    return estimates[0] if single else estimates


def save_attribute_probe(probe, path, config_hash=''):
    archive.save_archive(path, probe.net.state_dict(), config_hash=config_hash, meta={'kind': 'attribute_probe'})
    sidecar = {'config': asdict(probe.config),
               'target_mean': probe.target_mean.tolist(),
               'target_std': probe.target_std.tolist(),
               'pose_error': probe.pose_error}
    with open(Path(path, PROBE_SIDECAR), 'w') as outfile:
        json.dump(sidecar, outfile, indent=2, sort_keys=True)
    return Path(path)


def load_attribute_probe(path):
    sidecar_path = Path(path, PROBE_SIDECAR)
    sidecar = tools.read_json(sidecar_path)
    try:
        settings = dict(sidecar['config'])
        settings['widths'] = tuple(settings['widths'])
        config = ProbeConfig(**settings)
        mean = np.array(sidecar['target_mean'], dtype=np.float64)
        std = np.array(sidecar['target_std'], dtype=np.float64)
        pose_error = sidecar['pose_error']
    except (KeyError, TypeError, ValueError) as err:
        raise DatasetIOError(f'{sidecar_path} is not an attribute estimator sidecar: {err!r}') from None
    tensors, _ = archive.load_archive(path)
    net = AttributeNet(config.widths, config.hidden, config.image_size)
    net.load_state_dict(tensors)
    return AttributeProbe(config, net, mean, std, pose_error)


def _unit_rows(vectors):
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim == 1:
        vectors = vectors[None, :]
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroVectorError('embedding is the zero vector')
    return vectors / norms


def nearest_originals(generated, originals, k=1):
    """
    Indices of the k most cosine-similar originals per generated embedding, ties resolved
    toward the lowest index

    :return: (N x k index array, boolean array flagging rows whose best match was tied)
    """
    generated = _unit_rows(generated)
    originals = _unit_rows(originals)
    if generated.shape[1] != originals.shape[1]:
        raise DimensionMismatchError(f'embedding dimensions {generated.shape[1]} and {originals.shape[1]} differ')
    similarity = generated @ originals.T
    order = np.argsort(-similarity, axis=1, kind='stable')[:, :k]
    best = similarity.max(axis=1, keepdims=True)
    ties = (similarity == best).sum(axis=1) > 1
    return order, ties


def reid_rate(generated, originals, origin_of, k=1):
    """
    Fraction of generated embeddings whose nearest original (top-k) is the one they came from

    :param generated: N x D embeddings
    :param originals: M x D embeddings
    :param origin_of: N indices into originals
    """
    if len(generated) == 0 or len(originals) == 0:
        raise EmptyInputError('re-identification needs generated and original embeddings')
    origin_of = np.asarray(origin_of)
    if len(origin_of) != len(generated):
        raise DimensionMismatchError(f'{len(origin_of)} origins for {len(generated)} generated embeddings')
    nearest, ties = nearest_originals(generated, originals, k)
    if ties.any():
        warnings.warn(f'{int(ties.sum())} nearest-original ties resolved toward the lowest index')
    hits = (nearest == origin_of[:, None]).any(axis=1)
    return float(hits.mean())


def _validity_templates(size):
    x, y = synthetic_faces.pixel_grid(size)
    templates = []
    for cx in np.linspace(-0.2, 0.2, 5):
        for cy in np.linspace(-0.16, 0.16, 5):
            for rx in (0.42, 0.5, 0.58):
                for ry in (0.56, 0.64, 0.72):
                    templates.append(synthetic_faces.soft_ellipse(x, y, cx, cy, rx, ry, 1.0 / size).ravel())
    templates = np.array(templates)
    centred = templates - templates.mean(axis=1, keepdims=True)
    return templates > 0.5, centred / np.linalg.norm(centred, axis=1, keepdims=True)


_TEMPLATE_CACHE = {}


def face_validity(image):
    """
    True when the red channel correlates with a face-ellipse template above VALIDITY_THRESHOLD
    and the face is brighter than its surroundings by at least VALIDITY_CONTRAST

    :param image: H x W x 3 array or 3 x H x W tensor in [-1, 1]
    """
    if isinstance(image, torch.Tensor):
        image = tools.to_image(image)
    image = np.asarray(image, dtype=np.float64)
    size = image.shape[0]
    if size not in _TEMPLATE_CACHE:
        _TEMPLATE_CACHE[size] = _validity_templates(size)
    inside, templates = _TEMPLATE_CACHE[size]

    red = image[..., 0].ravel()
    centred = red - red.mean()
    norm = np.linalg.norm(centred)
    if norm < 1e-8:
        return False
    scores = templates @ (centred / norm)
    best = int(np.argmax(scores))
    contrast = red[inside[best]].mean() - red[~inside[best]].mean()
    return bool(scores[best] > VALIDITY_THRESHOLD and contrast > VALIDITY_CONTRAST)


@dataclass
class EvalReport:
    records: pd.DataFrame
    means: dict
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records, config=None, extra=None):
        records = pd.DataFrame(records)
        means = {column: float(records[column].astype(float).mean())
                 for column in RECORD_COLUMNS + ['closer_to_source'] if column in records}
        return cls(records=records, means=means, config=dict(config or {}), extra=dict(extra or {}))

    def write(self, out_dir, name, config_hash=''):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f'{name}.csv'
        self.records.to_csv(csv_path, index=False)
        summary = {'means': self.means, 'config': self.config, 'config_hash': config_hash}
        summary.update(self.extra)
        json_path = out_dir / f'{name}_summary.json'
        with open(json_path, 'w') as outfile:
            json.dump(summary, outfile, indent=2, sort_keys=True)
        return csv_path, json_path


@dataclass
class EvalBundle:
    """
    Everything the evaluation needs: generator, conditioning encoder, evaluator and probe
    """
    networks: object
    recognizer: object
    evaluator: object
    probe: object
    schedule: object
    sampler: object = None


def _heldout_by_identity(heldout):
    by_identity = {}
    for position in range(len(heldout)):
        by_identity.setdefault(heldout.factors(position, 'source').identity_id, []).append(position)
    return by_identity


def _test_images(dataset, n_images):
    """
    Held-out positions taken round-robin over source identities, so that a short test set
    still covers as many identities as it can
    """
    heldout = dataset.split('heldout')
    if len(heldout) == 0:
        raise InsufficientDataError('dataset has no held-out triplets to evaluate on')
    queues = [positions for _, positions in sorted(_heldout_by_identity(heldout).items())]
    order = [queue[rank] for rank in range(max(len(q) for q in queues)) for queue in queues if rank < len(queue)]
    if n_images > len(order):
        warnings.warn(f'only {len(order)} held-out images are available, {n_images} were requested')
    return heldout, order[:n_images]


def _score(generated, originals, targets, bundle, reid_k, attribute_targets=None):
    """
    Per-image records for generated images against the original they came from
    """
    gen_z = embedding.embed(bundle.evaluator, generated).double().numpy()
    orig_z = embedding.embed(bundle.evaluator, originals).double().numpy()
    nearest, _ = nearest_originals(gen_z, orig_z, reid_k)
    gen_attributes = estimate_attributes(bundle.probe, generated)
    reference = attribute_targets if attribute_targets is not None else originals
    ref_attributes = estimate_attributes(bundle.probe, reference)
    records = []
    for i, target in enumerate(targets):
        record = {'reid_hit': bool(target in nearest[i]),
                  'id_dist': embedding.identity_distance(gen_z[i], orig_z[target]),
                  'face_valid': face_validity(generated[i])}
        record.update(attribute_distances(gen_attributes[i], ref_attributes[i]))
        records.append(record)
    return records


def evaluate(bundle, dataset, d=anonymize.DEFAULT_D, seeds=(0,), n_images=50, reid_k=1, mode='anonymize',
             batch_size=16, ablation='full', config=None):
    """
    Anonymizes (or swaps) held-out images and scores the outputs.

    In anonymize mode the test set is the held-out source images; a hit means the evaluator
    finds the very image an output was generated from. In swap mode the test set is the source
    images and attribute distances are measured against the driving image.

    :return: EvalReport
    """
    heldout, positions = _test_images(dataset, n_images)
    sources = torch.stack([tools.to_tensor(heldout.image(p, 'source')) for p in positions])
    drivings = torch.stack([tools.to_tensor(heldout.image(p, 'driving')) for p in positions])
    targets = list(range(len(positions)))
    records = []
    for seed in seeds:
        item_seeds = [int(seed)] * len(positions)
        if mode == 'swap':
            generated = anonymize.swap_many(sources, drivings, bundle.networks, bundle.recognizer,
                                            bundle.schedule, seeds=item_seeds, sampler=bundle.sampler,
                                            batch_size=batch_size)
            rows = _score(generated, sources, targets, bundle, reid_k, attribute_targets=drivings)
            drv_z = embedding.embed(bundle.evaluator, drivings).double().numpy()
            gen_z = embedding.embed(bundle.evaluator, generated).double().numpy()
            src_z = embedding.embed(bundle.evaluator, sources).double().numpy()
            for i, row in enumerate(rows):
                row['closer_to_source'] = bool(embedding.identity_distance(gen_z[i], src_z[i]) <
                                               embedding.identity_distance(gen_z[i], drv_z[i]))
        else:
            generated = anonymize.anonymize_many(sources, bundle.networks, bundle.recognizer, bundle.schedule,
                                                 d=d, seeds=item_seeds, ablation=ablation,
                                                 sampler=bundle.sampler, batch_size=batch_size)
            rows = _score(generated, sources, targets, bundle, reid_k)
        for position, row in zip(positions, rows):
            row.update({'mode': mode, 'd': 0.0 if mode == 'swap' else d, 'seed': int(seed),
                        'index': heldout.records[position]['index'],
                        'identity': heldout.factors(position, 'source').identity_id})
        records.extend(rows)
    return EvalReport.from_records(records, config=config, extra={'mode': mode, 'reid_k': reid_k})


def _monotonicity(d_values, mean_distances):
    if len(d_values) < 2:
        return None
    rho = spearmanr(d_values, mean_distances).correlation
    return None if rho is None or np.isnan(rho) else float(rho)


def sweep_report(bundle, dataset, d_values, n_identities, seeds, out_dir=None, batch_size=16,
                 config_hash='', verbose=True):
    """
    Anonymizes one held-out image per identity at every d and seed.

    :return: (per-image DataFrame, per-d summary DataFrame, summary dict with spearman_rho)
    """
    heldout = dataset.split('heldout')
    first_position = {identity: positions[0] for identity, positions in _heldout_by_identity(heldout).items()}
    if n_identities > len(first_position):
        warnings.warn(f'only {len(first_position)} held-out identities are available, {n_identities} were requested')
    identities = sorted(first_position)[:n_identities]
    if not identities:
        raise InsufficientDataError('no held-out identities to sweep over')
    originals = torch.stack([tools.to_tensor(heldout.image(first_position[i], 'source')) for i in identities])
    orig_z = embedding.embed(bundle.evaluator, originals).double().numpy()
    orig_attributes = estimate_attributes(bundle.probe, originals)

    rows = []
    grid = [(d, seed) for d in d_values for seed in seeds]
    for d, seed in tqdm(grid, desc='sweep', disable=not verbose):
        generated = anonymize.anonymize_many(originals, bundle.networks, bundle.recognizer, bundle.schedule,
                                             d=d, seeds=[int(seed)] * len(identities), sampler=bundle.sampler,
                                             batch_size=batch_size)
        gen_z = embedding.embed(bundle.evaluator, generated).double().numpy()
        gen_attributes = estimate_attributes(bundle.probe, generated)
        for i, identity in enumerate(identities):
            row = {'d': float(d), 'identity': identity, 'seed': int(seed),
                   'id_dist': embedding.identity_distance(gen_z[i], orig_z[i]),
                   'face_valid': face_validity(generated[i])}
            row.update(attribute_distances(gen_attributes[i], orig_attributes[i]))
            rows.append(row)

    records = pd.DataFrame(rows, columns=['d', 'identity', 'seed', 'id_dist', 'shape_dist', 'pose_dist',
                                          'gaze_dist', 'expr_dist', 'face_valid'])
    per_d = records.groupby('d', sort=False).agg(id_dist=('id_dist', 'mean'), shape_dist=('shape_dist', 'mean'),
                                                 pose_dist=('pose_dist', 'mean'), gaze_dist=('gaze_dist', 'mean'),
                                                 expr_dist=('expr_dist', 'mean'),
                                                 validity_rate=('face_valid', 'mean')).reset_index()
    summary = {'d_values': [float(d) for d in d_values],
               'mean_id_dist': per_d['id_dist'].tolist(),
               'validity_rate': per_d['validity_rate'].tolist(),
               'spearman_rho': _monotonicity(list(per_d['d']), list(per_d['id_dist'])),
               'identities': identities,
               'seeds': [int(s) for s in seeds],
               'config_hash': config_hash}

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        records.to_csv(out_dir / 'sweep.csv', index=False)
        per_d.to_csv(out_dir / 'sweep_by_d.csv', index=False)
        with open(out_dir / 'sweep_summary.json', 'w') as outfile:
            json.dump(summary, outfile, indent=2, sort_keys=True)
        if len(per_d) > 1:
            tools.make_plot(per_d, 'd', 'id_dist', str(out_dir / 'identity_distance_vs_d'), 'Identity distance')
            tools.make_plot(per_d, 'd', 'validity_rate', str(out_dir / 'validity_rate_vs_d'), 'Face validity rate',
                            percent=True)
    return records, per_d, summary


def ablation_grid(bundle, dataset, d=1.4, seeds=(0,), n_images=50, reid_k=1, batch_size=16):
    """
    One row per ablation mode with its re-identification rate and mean distances
    """
    rows = []
    for ablation in anonymize.ABLATIONS:
        report = evaluate(bundle, dataset, d=d, seeds=seeds, n_images=n_images, reid_k=reid_k,
                          batch_size=batch_size, ablation=ablation)
        row = {'ablation': ablation, 'd': d, 'reid_rate': report.means['reid_hit']}
        row.update({k: v for k, v in report.means.items() if k != 'reid_hit'})
        row['validity_rate'] = row.pop('face_valid')
        rows.append(row)
    return pd.DataFrame(rows, columns=['ablation', 'd', 'reid_rate', 'id_dist', 'shape_dist', 'pose_dist',
                                       'gaze_dist', 'expr_dist', 'validity_rate'])
