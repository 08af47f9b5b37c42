#!/usr/bin/env python
"""
Procedural face-like images with fully known identity, pose, gaze, expression and
background factors, and the (source, driving, ground truth) triplets built from them.
"""
import json
import math
import os
from dataclasses import dataclass, replace
from multiprocessing import Pool
from pathlib import Path

import numpy as np
import pandas as pd

from anonydiff import tools
from anonydiff.errors import (DatasetIOError, ExhaustedDatasetError, IdenticalIdentitiesError,
                              InsufficientDataError, InvalidFactorsError, MissingFileError)

IMAGE_SIZE = 32
IDENTITY_DIM = 8
EXPRESSION_DIM = 4
POSE_LIMIT = 0.5
GAZE_LIMIT = 0.4
DATASET_FORMAT = 'anonydiff-faces v1'
ROLES = ('source', 'driving', 'ground_truth')

SCLERA = np.array([0.95, 0.95, 0.93])
PUPIL = np.array([0.08, 0.06, 0.05])
BROW = np.array([0.22, 0.13, 0.08])
LIPS = np.array([0.55, 0.12, 0.15])


@dataclass(frozen=True)
class FaceFactors:
    identity_id: int
    identity_vec: tuple
    pose: tuple = (0.0, 0.0, 0.0)
    gaze: tuple = (0.0, 0.0)
    expression: tuple = (0.0,) * EXPRESSION_DIM
    background_seed: int = 0

    def validate(self):
        """
        Raises InvalidFactorsError when any field is outside its range
        """
        if self.identity_id < 0:
            raise InvalidFactorsError(f'identity_id must be non-negative, got {self.identity_id}')
        vec = np.asarray(self.identity_vec, dtype=np.float64)
        if vec.shape != (IDENTITY_DIM,) or not np.all(np.isfinite(vec)):
            raise InvalidFactorsError(f'identity_vec must be {IDENTITY_DIM} finite values')
        if abs(np.linalg.norm(vec) - 1.0) > 1e-6:
            raise InvalidFactorsError(f'identity_vec norm {np.linalg.norm(vec)} is not 1')
        checks = [('pose', self.pose, 3, POSE_LIMIT),
                  ('gaze', self.gaze, 2, GAZE_LIMIT),
                  ('expression', self.expression, EXPRESSION_DIM, 1.0)]
        for name, values, length, limit in checks:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (length,) or not np.all(np.isfinite(values)):
                raise InvalidFactorsError(f'{name} must be {length} finite values')
            if np.any(np.abs(values) > limit):
                raise InvalidFactorsError(f'{name} {tuple(values)} outside [-{limit}, {limit}]')
        return self

    def with_attributes(self, pose, gaze, expression, background_seed):
        return replace(self, pose=tuple(pose), gaze=tuple(gaze), expression=tuple(expression),
                       background_seed=int(background_seed))

    def attributes(self):
        return {'pose': self.pose, 'gaze': self.gaze, 'expression': self.expression,
                'background_seed': self.background_seed}

    def to_record(self):
        return {'identity_id': int(self.identity_id),
                'identity_vec': [float(x) for x in self.identity_vec],
                'pose': [float(x) for x in self.pose],
                'gaze': [float(x) for x in self.gaze],
                'expression': [float(x) for x in self.expression],
                'background_seed': int(self.background_seed)}

    @classmethod
    def from_record(cls, record):
        return cls(identity_id=int(record['identity_id']),
                   identity_vec=tuple(float(x) for x in record['identity_vec']),
                   pose=tuple(float(x) for x in record['pose']),
                   gaze=tuple(float(x) for x in record['gaze']),
                   expression=tuple(float(x) for x in record['expression']),
                   background_seed=int(record['background_seed']))


@dataclass(frozen=True)
class Triplet:
    source: np.ndarray
    driving: np.ndarray
    ground_truth: np.ndarray
    source_factors: FaceFactors
    driving_factors: FaceFactors
    gt_factors: FaceFactors


def sample_identity(seed, identity_id):
    """
    Factors of one identity with a neutral pose, gaze and expression.
    The identity vector depends only on (seed, identity_id).

    :param seed: world seed
    :param identity_id: non-negative identity number
    :return: FaceFactors
    """
    if identity_id < 0:
        raise InvalidFactorsError(f'identity_id must be non-negative, got {identity_id}')
    rng = np.random.default_rng([int(seed), int(identity_id)])
    vec = rng.standard_normal(IDENTITY_DIM)
    vec = vec / np.linalg.norm(vec)
    background_seed = int(rng.integers(0, 2 ** 63))
    return FaceFactors(identity_id=int(identity_id),
                       identity_vec=tuple(float(x) for x in vec),
                       background_seed=background_seed)


def sample_attributes(rng):
    """
    Draws pose, gaze, expression and background uniformly within the factor ranges
    """
    return {'pose': tuple(float(x) for x in rng.uniform(-POSE_LIMIT, POSE_LIMIT, 3)),
            'gaze': tuple(float(x) for x in rng.uniform(-GAZE_LIMIT, GAZE_LIMIT, 2)),
            'expression': tuple(float(x) for x in rng.uniform(-1.0, 1.0, EXPRESSION_DIM)),
            'background_seed': int(rng.integers(0, 2 ** 63))}


def face_geometry(identity_vec):
    """
    Identity-driven face geometry and skin colour, all affine in the identity vector.
    Lengths are in normalized image units where the frame spans [-1, 1].
    """
    v = np.asarray(identity_vec, dtype=np.float64)
    return {'face_rx': 0.50 + 0.08 * v[0],
            'face_ry': 0.64 + 0.08 * v[1],
            'eye_spacing': 0.30 + 0.06 * v[5],
            'eye_height': -0.16 + 0.06 * v[6],
            'mouth_width': 0.26 + 0.07 * v[7],
            'nose_length': 0.16 + 0.05 * v[4],
            'skin': np.array([0.76 + 0.16 * v[2], 0.52 + 0.16 * v[3], 0.40 + 0.16 * v[4]])}


def shape_coefficients(factors):
    """
    Geometry part of a face used as its "shape" coefficients by the metrics
    """
    geometry = face_geometry(factors.identity_vec)
    return np.array([geometry[k] for k in ('face_rx', 'face_ry', 'eye_spacing', 'eye_height',
                                            'mouth_width', 'nose_length')])


def soft_ellipse(x, y, cx, cy, rx, ry, edge):
    # approximate signed distance scaled by the shorter axis, smoothed over about one pixel
    r = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    distance = (1.0 - r) * min(rx, ry)
    return 0.5 * (1.0 + np.tanh(distance / edge))


def _blend(image, color, alpha):
    return image * (1.0 - alpha[..., None]) + np.asarray(color) * alpha[..., None]


def pixel_grid(size):
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(coords, coords)


def _face_frame(factors, size):
    x, y = pixel_grid(size)
    yaw, pitch, roll = factors.pose
    cx = 0.36 * math.sin(yaw)
    cy = 0.30 * math.sin(pitch)
    dx, dy = x - cx, y - cy
    c, s = math.cos(roll), math.sin(roll)
    return x, y, c * dx + s * dy, -s * dx + c * dy


def face_mask(factors, size=IMAGE_SIZE):
    """
    Soft mask of the face ellipse of a render
    """
    factors.validate()
    geometry = face_geometry(factors.identity_vec)
    _, _, lx, ly = _face_frame(factors, size)
    return soft_ellipse(lx, ly, 0.0, 0.0, geometry['face_rx'], geometry['face_ry'], 1.0 / size)


def _background(background_seed, x, y):
    rng = np.random.default_rng(int(background_seed))
    low = np.array([0.02, 0.10, 0.30])
    high = np.array([0.25, 0.45, 0.75])
    top = rng.uniform(low, high)
    bottom = rng.uniform(low, high)
    t = ((y + 1.0) / 2.0)[..., None]
    return top * (1.0 - t) + bottom * t - 0.05 * (x ** 2)[..., None]


def render(factors, size=IMAGE_SIZE):
    """
    Deterministic raster of a set of face factors

    :param factors: FaceFactors
    :param size: image height and width in pixels
    :return: size x size x 3 float32 image in [-1, 1]
    """
    factors.validate()
    geometry = face_geometry(factors.identity_vec)
    edge = 1.0 / size
    x, y, lx, ly = _face_frame(factors, size)
    yaw, pitch, _ = factors.pose
    gaze_yaw, gaze_pitch = factors.gaze
    smile, mouth_open, brow_raise, eye_open = factors.expression

    # features slide across the face with yaw/pitch and compress horizontally with yaw
    fx = 0.22 * math.sin(yaw)
    fy = 0.18 * math.sin(pitch)
    squeeze = math.cos(yaw)

    image = _background(factors.background_seed, x, y)
    face = soft_ellipse(lx, ly, 0.0, 0.0, geometry['face_rx'], geometry['face_ry'], edge)
    skin = geometry['skin']
    image = _blend(image, skin, face)

    eye_y = geometry['eye_height'] + fy
    eye_ry = 0.075 * (1.0 + 0.45 * eye_open)
    for side in (-1.0, 1.0):
        eye_x = fx + side * geometry['eye_spacing'] * squeeze
        sclera = soft_ellipse(lx, ly, eye_x, eye_y, 0.11 * squeeze, eye_ry, edge) * face
        image = _blend(image, SCLERA, sclera)

        pupil_x = eye_x + 0.055 * gaze_yaw / GAZE_LIMIT
        pupil_y = eye_y - 0.035 * gaze_pitch / GAZE_LIMIT
        pupil = soft_ellipse(lx, ly, pupil_x, pupil_y, 0.045, 0.045, edge) * sclera
        image = _blend(image, PUPIL, pupil)

        brow_y = eye_y - 0.14 - 0.06 * brow_raise
        brow = soft_ellipse(lx, ly, eye_x, brow_y, 0.12 * squeeze, 0.028, edge) * face
        image = _blend(image, BROW, brow)

    nose = soft_ellipse(lx, ly, fx, 0.04 + fy, 0.045 * squeeze, geometry['nose_length'] / 2.0, edge)
    image = _blend(image, 0.82 * skin, nose * face)

    # mouth: a band around a parabola whose curvature follows the smile component
    mouth_y = 0.32 + fy
    half_width = geometry['mouth_width'] / 2.0 * squeeze
    mx = lx - fx
    curve = ly - mouth_y + 0.9 * smile * (mx ** 2 - half_width ** 2 / 3.0)
    thickness = 0.035 + 0.035 * (mouth_open + 1.0)
    along = 0.5 * (1.0 + np.tanh((half_width - np.abs(mx)) / edge))
    across = 0.5 * (1.0 + np.tanh((thickness / 2.0 - np.abs(curve)) / edge))
    image = _blend(image, LIPS, along * across * face)

    image = np.clip(image * 2.0 - 1.0, -1.0, 1.0)
    return image.astype(np.float32)


def make_triplet(id_a, id_c, rng, seed=0, size=IMAGE_SIZE):
    """
    Source and ground truth show identity A under two attribute samples; driving is the
    ground truth with its identity replaced by C.

    :param id_a: identity of source and ground truth
    :param id_c: identity swapped into the driving image
    :param rng: numpy Generator drawing the attribute samples
    :param seed: world seed fixing the identity vectors
    :return: Triplet
    """
    if id_a == id_c:
        raise IdenticalIdentitiesError(f'source and driving identities are both {id_a}')
    identity_a = sample_identity(seed, id_a)
    identity_c = sample_identity(seed, id_c)
    first = sample_attributes(rng)
    second = sample_attributes(rng)

    source_factors = identity_a.with_attributes(**first)
    gt_factors = identity_a.with_attributes(**second)
    driving_factors = identity_c.with_attributes(**second)

    return Triplet(source=render(source_factors, size),
                   driving=render(driving_factors, size),
                   ground_truth=render(gt_factors, size),
                   source_factors=source_factors,
                   driving_factors=driving_factors,
                   gt_factors=gt_factors)


def split_identities(n_identities, heldout_fraction, seed):
    """
    Partitions identity numbers into train and held-out sets
    """
    rng = np.random.default_rng([int(seed), n_identities])
    order = rng.permutation(n_identities)
    n_heldout = min(n_identities - 1, max(1, int(round(n_identities * heldout_fraction))))
    return {'train': sorted(int(x) for x in order[n_heldout:]),
            'heldout': sorted(int(x) for x in order[:n_heldout])}


def _plan_triplets(splits, n_identities, triplets_per_identity, seed):
    rng = np.random.default_rng([int(seed), n_identities, triplets_per_identity])
    plan = []
    for donor_slot, split in enumerate(('train', 'heldout')):
        members = splits[split]
        # a split with a single identity borrows a donor identity that belongs to it alone
        donors = members if len(members) >= 2 else [n_identities + donor_slot]
        for id_a in members:
            candidates = [c for c in donors if c != id_a]
            for _ in range(triplets_per_identity):
                id_c = candidates[int(rng.integers(len(candidates)))]
                plan.append((split, id_a, id_c))
    return plan


def _write_triplet(task):
    out_dir, index, split, id_a, id_c, seed, child_seed, size = task
    triplet = make_triplet(id_a, id_c, np.random.default_rng(child_seed), seed=seed, size=size)
    record = {'index': index, 'split': split}
    for role, image, factors in zip(ROLES,
                                    (triplet.source, triplet.driving, triplet.ground_truth),
                                    (triplet.source_factors, triplet.driving_factors, triplet.gt_factors)):
        rel_path = f'images/{index:06d}_{role}.img'
        tools.write_image(os.path.join(out_dir, rel_path), image)
        record[role] = {'path': rel_path, 'factors': factors.to_record()}
    return record


def make_dataset(n_identities, triplets_per_identity, seed, out_dir, heldout_fraction=0.4,
                 size=IMAGE_SIZE, threads=1):
    """
    Renders a triplet dataset to disk. Held-out identities never appear in the train split.
    manifest.json is written last and marks the dataset as complete.

    :return: (dataset directory, manifest dict)
    """
    if n_identities < 2:
        raise InsufficientDataError(f'need at least 2 identities, got {n_identities}')
    if triplets_per_identity < 1:
        raise InsufficientDataError(f'need at least 1 triplet per identity, got {triplets_per_identity}')

    try:
        os.makedirs(os.path.join(out_dir, 'images'), exist_ok=True)
    except OSError as err:
        raise DatasetIOError(f'cannot create {out_dir}: {err}') from err

    splits = split_identities(n_identities, heldout_fraction, seed)
    plan = _plan_triplets(splits, n_identities, triplets_per_identity, seed)
    child_seeds = np.random.SeedSequence(int(seed)).spawn(len(plan))
    tasks = [(str(out_dir), i, split, id_a, id_c, seed, child_seeds[i], size)
             for i, (split, id_a, id_c) in enumerate(plan)]

    threads = tools.max_threads(threads)
    if threads > 1:
        with Pool(processes=threads) as pool:
            records = pool.map(_write_triplet, tasks)
    else:
        records = [_write_triplet(task) for task in tasks]

    manifest = {'format': DATASET_FORMAT,
                'seed': int(seed),
                'n_identities': n_identities,
                'triplets_per_identity': triplets_per_identity,
                'heldout_fraction': heldout_fraction,
                'image_size': size,
                'splits': splits,
                'triplets': records}
    manifest_path = Path(out_dir, 'manifest.json')
    try:
        with open(manifest_path, 'w') as outfile:
            json.dump(manifest, outfile, indent=1, sort_keys=True)
    except OSError as err:
        raise DatasetIOError(f'cannot write {manifest_path}: {err}') from err

    return Path(out_dir), manifest


class FaceDataset:
    """
    Triplet records of a dataset directory (or of in-memory triplets) with lazily loaded images.
    `table` summarises the records as a pandas DataFrame.
    """

    def __init__(self, records, root=None, seed=0, image_size=IMAGE_SIZE, images=None):
        self.records = list(records)
        self.root = root
        self.seed = seed
        self.image_size = image_size
        self._images = dict(images or {})
        self.table = pd.DataFrame([{'index': r['index'],
                                    'split': r['split'],
                                    'source_id': r['source']['factors']['identity_id'],
                                    'driving_id': r['driving']['factors']['identity_id'],
                                    'gt_id': r['ground_truth']['factors']['identity_id']}
                                   for r in self.records],
                                  columns=['index', 'split', 'source_id', 'driving_id', 'gt_id'])

    @classmethod
    def from_triplets(cls, triplets, split='train', seed=0):
        records, images = [], {}
        for i, triplet in enumerate(triplets):
            record = {'index': i, 'split': split}
            for role, image, factors in zip(ROLES,
                                            (triplet.source, triplet.driving, triplet.ground_truth),
                                            (triplet.source_factors, triplet.driving_factors,
                                             triplet.gt_factors)):
                record[role] = {'path': None, 'factors': factors.to_record()}
                images[(i, role)] = image
            records.append(record)
        size = triplets[0].source.shape[0] if triplets else IMAGE_SIZE
        return cls(records, seed=seed, image_size=size, images=images)

    def __len__(self):
        return len(self.records)

    def split(self, name):
        records = [r for r in self.records if r['split'] == name]
        kept = {r['index'] for r in records}
        images = {k: v for k, v in self._images.items() if k[0] in kept}
        return FaceDataset(records, root=self.root, seed=self.seed, image_size=self.image_size,
                           images=images)

    @property
    def identities(self):
        return sorted(set(self.table['source_id']))

    def factors(self, position, role):
        return FaceFactors.from_record(self.records[position][role]['factors'])

    def image(self, position, role):
        record = self.records[position]
        key = (record['index'], role)
        if key not in self._images:
            path = record[role]['path']
            if path is None:
                self._images[key] = render(self.factors(position, role), self.image_size)
            else:
                self._images[key] = tools.read_image(os.path.join(self.root, path))
        return self._images[key]

    def triplet(self, position):
        if not self.records:
            raise ExhaustedDatasetError('dataset holds no triplets')
        return Triplet(source=self.image(position, 'source'),
                       driving=self.image(position, 'driving'),
                       ground_truth=self.image(position, 'ground_truth'),
                       source_factors=self.factors(position, 'source'),
                       driving_factors=self.factors(position, 'driving'),
                       gt_factors=self.factors(position, 'ground_truth'))


def load_dataset(path):
    """
    Reads a dataset directory written by make_dataset
    """
    manifest_path = Path(path, 'manifest.json')
    if not os.path.isfile(manifest_path):
        raise MissingFileError(f'{manifest_path} does not exist (incomplete or missing dataset)')
    manifest = tools.read_json(manifest_path)
    if not isinstance(manifest, dict) or manifest.get('format') != DATASET_FORMAT:
        raise DatasetIOError(f'{manifest_path} is not an {DATASET_FORMAT} manifest')
    try:
        return FaceDataset(manifest['triplets'], root=str(path), seed=int(manifest['seed']),
                           image_size=int(manifest['image_size']))
    except (KeyError, TypeError, ValueError) as err:
        raise DatasetIOError(f'{manifest_path} has a malformed triplet list: {err!r}') from None
