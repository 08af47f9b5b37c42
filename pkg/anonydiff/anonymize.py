#!/usr/bin/env python
"""
Identity anonymization and face swapping on top of the conditioning network.

The source-side embedding is scaled by (1 - d) and the source ReferenceNet states are pushed
from their conditional value toward the unconditional one by d. The driving stream is never
modified. Feeding the same image as source and driving anonymizes it; distinct images swap faces.
"""
import warnings
from dataclasses import dataclass, field, replace

import torch

from anonydiff import diffusion_core, embedding, tools
from anonydiff.condnet import ReferenceState, null_conditioning, refnet_forward, unet_forward
from anonydiff.errors import InvalidConfigError, InvalidRangeError, MisalignedStatesError, UntrainedNetworkError

ABLATIONS = ('full', 'no_embeds', 'no_states', 'no_uncond_states')
DEFAULT_D = 1.25
MAX_RECOMMENDED_D = 1.5


@dataclass(frozen=True)
class AnonymizeRequest:
    image: object
    d: float = DEFAULT_D
    seed: int = 0
    ablation: str = 'full'
    sampler: diffusion_core.SamplerConfig = field(default_factory=diffusion_core.SamplerConfig)

    def __post_init__(self):
        check_degree(self.d)
        if self.ablation not in ABLATIONS:
            raise InvalidConfigError(f'ablation must be one of {", ".join(ABLATIONS)}, got {self.ablation}')


@dataclass
class Conditioning:
    """
    Denoiser inputs for one branch: (z_src, S_src, z_drv, S_drv)
    """
    z_src: torch.Tensor
    S_src: ReferenceState
    z_drv: torch.Tensor
    S_drv: ReferenceState


def check_degree(d):
    if not d >= 0:
        raise InvalidRangeError(f'anonymization degree must be >= 0, got {d}')
    if d > MAX_RECOMMENDED_D:
        warnings.warn(f'd = {d} exceeds {MAX_RECOMMENDED_D}; outputs may no longer look like faces')


def adjust_embedding(z, d):
    """
    (1 - d) z, without renormalization
    """
    return (1.0 - d) * z


def blend_states(S_cond, S_uncond, d):
    """
    Per-layer (1 - d) S_cond + d S_uncond. d > 1 extrapolates past S_uncond.
    """
    if len(S_cond) != len(S_uncond):
        raise MisalignedStatesError(f'{len(S_cond)} conditional layers vs {len(S_uncond)} unconditional')
    layers = []
    for i, (cond, uncond) in enumerate(zip(S_cond.layers, S_uncond.layers)):
        if cond.shape != uncond.shape:
            raise MisalignedStatesError(f'layer {i}: {tuple(cond.shape)} vs {tuple(uncond.shape)}')
        layers.append(torch.lerp(cond, uncond, float(d)))
    return ReferenceState(layers=layers)


def _scale_states(state, factor):
    return ReferenceState(layers=[factor * layer for layer in state.layers])


def _image_batch(images, dtype):
    if isinstance(images, (list, tuple)):
        return torch.stack([tools.to_tensor(image, dtype) for image in images])
    images = tools.to_tensor(images, dtype)
    return images.unsqueeze(0) if images.dim() == 3 else images


def build_conditioning(networks, recognizer, source, driving, d=0.0, ablation='full'):
    """
    Conditional and unconditional branches for a batch of source/driving pairs

    :param source: B x 3 x H x W tensor (or list of images)
    :param driving: same shape as source
    :param d: anonymization degree
    :param ablation: one of ABLATIONS
    :return: diffusion_core.Guidance over two Conditioning instances
    """
    if ablation not in ABLATIONS:
        raise InvalidConfigError(f'unknown ablation {ablation}')
    dtype = networks.dtype
    source = _image_batch(source, torch.float32)
    driving = _image_batch(driving, torch.float32)

    with torch.no_grad():
        z_src = embedding.embed(recognizer, source).to(dtype)
        tokens_src = embedding.spatial_features(recognizer, source).to(dtype)
        z_drv = embedding.embed(recognizer, driving).to(dtype)
        tokens_drv = embedding.spatial_features(recognizer, driving).to(dtype)

        z_adjusted = z_src if ablation == 'no_embeds' else adjust_embedding(z_src, d)
        S_drv = refnet_forward(networks.refdrv, tokens_drv, z_drv)
        S_cond = refnet_forward(networks.refsrc, tokens_src, z_adjusted)
        z_null, build_uncond = null_conditioning(networks)
        S_uncond = build_uncond(source.shape[0])

        if ablation == 'no_states':
            S_adjusted = S_cond
        elif ablation == 'no_uncond_states':
            S_adjusted = _scale_states(S_cond, 1.0 - d)
        else:
            S_adjusted = blend_states(S_cond, S_uncond, d)

        batch = source.shape[0]
        z_null = z_null.detach().expand(batch, -1)

    return diffusion_core.Guidance(cond=Conditioning(z_adjusted, S_adjusted, z_drv, S_drv),
                                   uncond=Conditioning(z_null, S_uncond, z_drv, S_drv))


def make_denoiser(networks):
    def denoiser(x_t, t, conditioning):
        with torch.no_grad():
            return unet_forward(networks.unet, x_t, t, conditioning.z_src, conditioning.z_drv,
                                conditioning.S_src, conditioning.S_drv)
    return denoiser


def _check_trained(networks, require_trained):
    if require_trained and networks.trained_steps <= 0:
        raise UntrainedNetworkError('networks have not been trained; run `anonydiff train` first')


def _generate(networks, recognizer, schedule, source, driving, d, ablation, sampler, seeds, verbose=False):
    guidance = build_conditioning(networks, recognizer, source, driving, d, ablation)
    size = networks.config.image_size
    return diffusion_core.sample(make_denoiser(networks), guidance, sampler, schedule,
                                 shape=(len(seeds), 3, size, size), seeds=seeds,
                                 dtype=networks.dtype, verbose=verbose)


def anonymize(request, networks, recognizer, schedule, require_trained=True, verbose=False):
    """
    Anonymizes one image by using it as both source and driving input

    :param request: AnonymizeRequest
    :param networks: AnonymizerNetworks
    :param recognizer: frozen embedding.Recognizer
    :param schedule: diffusion_core.NoiseSchedule
    :return: 3 x H x W tensor in [-1, 1]
    """
    _check_trained(networks, require_trained)
    image = _image_batch(request.image, torch.float32)
    sampler = replace(request.sampler, seed=request.seed, d=request.d)
    return _generate(networks, recognizer, schedule, image, image, request.d, request.ablation,
                     sampler, [int(request.seed)], verbose)[0]


def anonymize_many(images, networks, recognizer, schedule, d=DEFAULT_D, seeds=None, ablation='full',
                   sampler=None, batch_size=16, require_trained=True):
    """
    Anonymizes a batch of images. Every image owns the noise stream of its seed.

    :return: N x 3 x H x W tensor
    """
    _check_trained(networks, require_trained)
    check_degree(d)
    images = _image_batch(images, torch.float32)
    seeds = list(range(len(images))) if seeds is None else [int(s) for s in seeds]
    if len(seeds) != len(images):
        raise InvalidConfigError(f'{len(seeds)} seeds for {len(images)} images')
    sampler = replace(sampler or diffusion_core.SamplerConfig(), d=d)
    outputs = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        outputs.append(_generate(networks, recognizer, schedule, chunk, chunk, d, ablation, sampler,
                                 seeds[start:start + batch_size]))
    return torch.cat(outputs)


def swap(source_image, driving_image, seed, networks, recognizer, schedule, sampler=None,
         require_trained=True, verbose=False):
    """
    Face swap: identity from the source image, everything else from the driving image (d = 0)

    :return: 3 x H x W tensor in [-1, 1]
    """
    _check_trained(networks, require_trained)
    source = _image_batch(source_image, torch.float32)
    driving = _image_batch(driving_image, torch.float32)
    if source.shape != driving.shape:
        raise InvalidConfigError(f'source {tuple(source.shape)} and driving {tuple(driving.shape)} differ')
    sampler = replace(sampler or diffusion_core.SamplerConfig(), seed=int(seed), d=0.0)
    return _generate(networks, recognizer, schedule, source, driving, 0.0, 'full', sampler,
                     [int(seed)], verbose)[0]


def swap_many(sources, drivings, networks, recognizer, schedule, seeds=None, sampler=None,
              batch_size=16, require_trained=True):
    _check_trained(networks, require_trained)
    sources = _image_batch(sources, torch.float32)
    drivings = _image_batch(drivings, torch.float32)
    seeds = list(range(len(sources))) if seeds is None else [int(s) for s in seeds]
    sampler = replace(sampler or diffusion_core.SamplerConfig(), d=0.0)
    outputs = []
    for start in range(0, len(sources), batch_size):
        stop = start + batch_size
        outputs.append(_generate(networks, recognizer, schedule, sources[start:stop], drivings[start:stop],
                                 0.0, 'full', sampler, seeds[start:stop]))
    return torch.cat(outputs)
