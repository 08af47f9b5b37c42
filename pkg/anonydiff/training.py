#!/usr/bin/env python
"""
Single-loss training of the UNet and the ReferenceNet attention modules.

Every step draws triplets from the curriculum, noises the ground truth at a uniform timestep
and regresses the injected noise with mean squared error. A random share of examples replaces
the source-side conditioning with the unconditional branch so that classifier-free guidance is
available at sampling time.
"""
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from anonydiff import archive, embedding, synthetic_faces, tools
from anonydiff.condnet import AttentionBlock, load_networks, refnet_forward, save_networks, unet_forward
from anonydiff.diffusion_core import forward_diffuse
from anonydiff.errors import (DatasetIOError, DivergedTrainingError, ExhaustedDatasetError, InvalidConfigError,
                              InvalidRangeError, ShapeMismatchError)

CONDITIONAL = 'conditional'
UNCONDITIONAL = 'unconditional'
LOSS_LOG = 'loss_log.csv'
CHECKPOINT_META = 'checkpoint.json'


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 10000
    batch_size: int = 8
    accumulation_steps: int = 1
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    uncond_prob: float = 0.1
    phase1_fraction: float = 0.5
    swap_prob: float = 0.5
    checkpoint_every: int = 1000
    seed: int = 0

    def validate(self):
        if self.steps <= 0 or self.batch_size <= 0 or self.accumulation_steps <= 0:
            raise InvalidConfigError('steps, batch_size and accumulation_steps must be positive')
        if self.learning_rate <= 0:
            raise InvalidConfigError(f'learning rate must be positive, got {self.learning_rate}')
        if self.weight_decay < 0:
            raise InvalidConfigError(f'weight decay must be non-negative, got {self.weight_decay}')
        for name in ('uncond_prob', 'phase1_fraction', 'swap_prob'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfigError(f'{name} must be in [0, 1], got {getattr(self, name)}')
        if self.checkpoint_every < 0:
            raise InvalidConfigError('checkpoint_every must be non-negative')
        return self


PRESETS = {
    'desk': TrainConfig(),
    'large': TrainConfig(steps=435000, batch_size=1, accumulation_steps=8, learning_rate=1e-5),
}


@dataclass
class TrainingExample:
    source: np.ndarray
    driving: np.ndarray
    ground_truth: np.ndarray
    mode: str
    phase: int
    swapped: bool


@dataclass
class TrainResult:
    loss_log: pd.DataFrame
    checkpoints: list
    steps: int


def reconstruction_loss(eps_hat, eps):
    if eps_hat.shape != eps.shape:
        raise ShapeMismatchError(f'prediction {tuple(eps_hat.shape)} and target {tuple(eps.shape)} differ')
    return F.mse_loss(eps_hat, eps)


# the only term in the objective
LOSS_TERMS = {'reconstruction': reconstruction_loss}


def training_objective():
    return dict(LOSS_TERMS)


def conditioning_dropout(rng, uncond_prob):
    if not 0.0 <= uncond_prob <= 1.0:
        raise InvalidRangeError(f'uncond_prob must be in [0, 1], got {uncond_prob}')
    return UNCONDITIONAL if rng.random() < uncond_prob else CONDITIONAL


def _reference_attention_parameters(networks):
    for prefix in ('refsrc', 'refdrv'):
        refnet = getattr(networks, prefix)
        for module_name, module in refnet.named_modules():
            if isinstance(module, AttentionBlock):
                for name, param in module.named_parameters():
                    yield f'{prefix}.{module_name}.{name}', param


def trainable_parameters(networks):
    """
    Whole UNet, attention modules of both ReferenceNets and the null embedding

    :return: dict of name -> parameter in a fixed order
    """
    params = {f'unet.{name}': param for name, param in networks.unet.named_parameters()}
    params.update(_reference_attention_parameters(networks))
    params['null_embedding'] = networks.null_embedding
    return params


def frozen_parameters(networks):
    trainable = trainable_parameters(networks)
    return {name: param for name, param in networks.named_parameters() if name not in trainable}


def freeze(networks):
    """
    Disables gradients outside the trainable subset
    """
    trainable = trainable_parameters(networks)
    for name, param in networks.named_parameters():
        param.requires_grad_(name in trainable)
    return list(trainable.values())


def _driving_identity_render(dataset, position, rng):
    identity_id = dataset.factors(position, 'driving').identity_id
    factors = synthetic_faces.sample_identity(dataset.seed, identity_id).with_attributes(
        **synthetic_faces.sample_attributes(rng))
    return synthetic_faces.render(factors, dataset.image_size)


def curriculum_batch(dataset, step, config, rng):
    """
    One training example. During the first phase_fraction of the steps, with probability
    swap_prob the roles are swapped: the real ground truth drives, the synthesized driving
    image becomes the target and the source shows the driving identity.

    :param dataset: synthetic_faces.FaceDataset
    :param step: optimizer step
    :param config: TrainConfig
    :param rng: numpy Generator
    :return: TrainingExample
    """
    if len(dataset) == 0:
        raise ExhaustedDatasetError('training dataset holds no triplets')
    position = int(rng.integers(len(dataset)))
    phase = 1 if step < config.phase1_fraction * config.steps else 2
    swapped = phase == 1 and rng.random() < config.swap_prob
    mode = conditioning_dropout(rng, config.uncond_prob)

    triplet = dataset.triplet(position)
    if swapped:
        return TrainingExample(source=_driving_identity_render(dataset, position, rng),
                               driving=triplet.ground_truth,
                               ground_truth=triplet.driving,
                               mode=mode, phase=phase, swapped=True)
    return TrainingExample(source=triplet.source, driving=triplet.driving,
                           ground_truth=triplet.ground_truth, mode=mode, phase=phase, swapped=False)


def _stack(images, dtype):
    return torch.stack([tools.to_tensor(image, dtype) for image in images])


def example_loss(networks, recognizer, schedule, examples, timesteps, noise):
    """
    Mean reconstruction loss over a list of examples with their timesteps and noise
    """
    dtype = networks.dtype
    source = _stack([e.source for e in examples], torch.float32)
    driving = _stack([e.driving for e in examples], torch.float32)
    ground_truth = _stack([e.ground_truth for e in examples], dtype)
    unconditional = torch.tensor([e.mode == UNCONDITIONAL for e in examples])

    z_src = embedding.embed(recognizer, source).to(dtype)
    tokens_src = embedding.spatial_features(recognizer, source).to(dtype)
    z_drv = embedding.embed(recognizer, driving).to(dtype)
    tokens_drv = embedding.spatial_features(recognizer, driving).to(dtype)

    z_src = torch.where(unconditional[:, None], networks.null_embedding[None, :], z_src)
    tokens_src = torch.where(unconditional[:, None, None], torch.zeros_like(tokens_src), tokens_src)

    S_src = refnet_forward(networks.refsrc, tokens_src, z_src)
    S_drv = refnet_forward(networks.refdrv, tokens_drv, z_drv)
    t = torch.tensor(timesteps, dtype=torch.long)
    x_t = forward_diffuse(ground_truth, t, noise, schedule)
    eps_hat = unet_forward(networks.unet, x_t, t, z_src, z_drv, S_src, S_drv)

    (name, loss_fn), = training_objective().items()
    return loss_fn(eps_hat, noise)


def _optimizer(params, config):
    return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)


def _batch_mode(examples):
    modes = {e.mode for e in examples}
    return modes.pop() if len(modes) == 1 else 'mixed'


def save_checkpoint(path, networks, optimizer, rng, generator, step, config, loss_rows, config_hash=''):
    """
    Self-contained checkpoint: parameters, AdamW moments, rng states and the loss log so far
    """
    path = Path(path)
    save_networks(networks, path / 'networks', config_hash=config_hash)
    names = {id(param): name for name, param in trainable_parameters(networks).items()}
    moments = {}
    for param, state in optimizer.state.items():
        name = names[id(param)]
        moments[f'{name}.exp_avg'] = state['exp_avg']
        moments[f'{name}.exp_avg_sq'] = state['exp_avg_sq']
        moments[f'{name}.step'] = torch.as_tensor(state['step'], dtype=torch.float64).reshape(())
    archive.save_archive(path / 'optimizer', moments, config_hash=config_hash, meta={'kind': 'adamw'})
    pd.DataFrame(loss_rows, columns=['step', 'loss', 'mode', 'phase']).to_csv(path / LOSS_LOG, index=False)
    meta = {'step': step,
            'train_config': asdict(config),
            'numpy_rng': rng.bit_generator.state,
            'torch_rng': generator.get_state().tolist()}
    with open(path / CHECKPOINT_META, 'w') as outfile:
        json.dump(meta, outfile)
    return path


def load_checkpoint(path):
    """
    :return: (networks, optimizer moments dict, checkpoint meta, loss rows)
    """
    meta_path = Path(path, CHECKPOINT_META)
    meta = tools.read_json(meta_path)
    if not isinstance(meta, dict) or not {'step', 'numpy_rng', 'torch_rng'} <= set(meta):
        raise DatasetIOError(f'{meta_path} is not a checkpoint description')
    networks = load_networks(Path(path, 'networks'))
    moments, _ = archive.load_archive(Path(path, 'optimizer'))
    try:
        rows = pd.read_csv(Path(path, LOSS_LOG)).to_dict('records')
    except (OSError, ValueError) as err:
        raise DatasetIOError(f'cannot read {Path(path, LOSS_LOG)}: {err}') from None
    return networks, moments, meta, rows


def _restore_optimizer(optimizer, networks, moments):
    for name, param in trainable_parameters(networks).items():
        if f'{name}.exp_avg' not in moments:
            continue
        optimizer.state[param] = {
            'step': moments[f'{name}.step'].to(torch.float32),
            'exp_avg': moments[f'{name}.exp_avg'].to(param.dtype).clone(),
            'exp_avg_sq': moments[f'{name}.exp_avg_sq'].to(param.dtype).clone()}


def train(dataset, networks, recognizer, schedule, config, out_dir=None, resume_from=None,
          config_hash='', verbose=True):
    """
    Trains the networks in place.

    :param dataset: FaceDataset of training triplets
    :param networks: AnonymizerNetworks (ignored when resume_from is given)
    :param recognizer: frozen embedding.Recognizer
    :param schedule: diffusion_core.NoiseSchedule
    :param config: TrainConfig
    :param out_dir: directory for checkpoints and the loss log (optional)
    :param resume_from: checkpoint directory to continue from
    :return: (networks, TrainResult)
    """
    config.validate()
    if len(dataset) == 0:
        raise ExhaustedDatasetError('training dataset holds no triplets')

    rng = np.random.default_rng(int(config.seed))
    generator = torch.Generator().manual_seed(int(config.seed))
    start, rows, moments = 0, [], None
    if resume_from is not None:
        networks, moments, meta, rows = load_checkpoint(resume_from)
        try:
            start = int(meta['step'])
            rng.bit_generator.state = meta['numpy_rng']
            generator.set_state(torch.tensor(meta['torch_rng'], dtype=torch.uint8))
        except (TypeError, ValueError, RuntimeError) as err:
            raise DatasetIOError(f'{resume_from} holds unusable random states: {err}') from None

    params = freeze(networks)
    optimizer = _optimizer(params, config)
    if moments is not None:
        _restore_optimizer(optimizer, networks, moments)
    networks.train()

    size = dataset.image_size
    checkpoints = []
    last_checkpoint = resume_from
    progress = tqdm(range(start, config.steps), desc='training', disable=not verbose)
    for step in progress:
        optimizer.zero_grad(set_to_none=True)
        step_loss, examples_seen = 0.0, []
        for _ in range(config.accumulation_steps):
            examples, timesteps, noise = [], [], []
            for _ in range(config.batch_size):
                examples.append(curriculum_batch(dataset, step, config, rng))
                timesteps.append(int(rng.integers(0, schedule.T)))
                noise.append(torch.randn((3, size, size), generator=generator, dtype=networks.dtype))
            loss = example_loss(networks, recognizer, schedule, examples, timesteps, torch.stack(noise))
            if not torch.isfinite(loss):
                raise DivergedTrainingError(f'non-finite loss at step {step}', last_checkpoint)
            (loss / config.accumulation_steps).backward()
            step_loss += loss.item() / config.accumulation_steps
            examples_seen.extend(examples)
        optimizer.step()
        networks.trained_steps = step + 1

        rows.append({'step': step, 'loss': step_loss, 'mode': _batch_mode(examples_seen),
                     'phase': examples_seen[0].phase})
        progress.set_postfix(loss=f'{step_loss:.4f}')

        done = step + 1
        if out_dir is not None and (done == config.steps or
                                    (config.checkpoint_every and done % config.checkpoint_every == 0)):
            last_checkpoint = save_checkpoint(Path(out_dir, 'checkpoints', f'step_{done:07d}'), networks,
                                              optimizer, rng, generator, done, config, rows, config_hash)
            checkpoints.append(last_checkpoint)

    networks.eval()
    loss_log = pd.DataFrame(rows, columns=['step', 'loss', 'mode', 'phase'])
    if out_dir is not None:
        loss_log.to_csv(Path(out_dir, LOSS_LOG), index=False)
    if verbose and len(loss_log):
        print(f'trained {networks.trained_steps} steps, final loss {loss_log["loss"].iloc[-1]:.5f}')
    return networks, TrainResult(loss_log=loss_log, checkpoints=checkpoints, steps=networks.trained_steps)


def preset(name, **overrides):
    if name not in PRESETS:
        raise InvalidConfigError(f'unknown training preset {name}; choose from {", ".join(PRESETS)}')
    return replace(PRESETS[name], **overrides)
