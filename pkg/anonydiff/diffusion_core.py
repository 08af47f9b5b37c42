#!/usr/bin/env python
"""
DDPM machinery independent of the conditioning network: linear noise schedule, forward
diffusion, ancestral steps and a classifier-free-guided sampler over an even-stride
timestep subsequence.
"""
from dataclasses import dataclass

import torch
from tqdm import tqdm

from anonydiff.errors import DivergedSamplingError, InvalidConfigError, InvalidRangeError, ShapeMismatchError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self):
        return len(self.betas)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 200
    guidance_scale: float = 4.0
    seed: int = 0
    d: float = 0.0

    def validate(self, schedule=None):
        if self.steps < 1 or (schedule is not None and self.steps > schedule.T):
            raise InvalidConfigError(f'sampler steps must be in [1, T], got {self.steps}')
        if self.guidance_scale < 0:
            raise InvalidConfigError(f'guidance scale must be non-negative, got {self.guidance_scale}')
        return self


@dataclass(frozen=True)
class Guidance:
    """
    Conditional and unconditional inputs handed to the denoiser; `uncond` None disables guidance
    """
    cond: object
    uncond: object = None


def _schedule_from_alpha_bars(alpha_bars):
    previous = torch.cat([torch.ones(1, dtype=alpha_bars.dtype), alpha_bars[:-1]])
    alphas = alpha_bars / previous
    return NoiseSchedule(betas=1.0 - alphas, alphas=alphas, alpha_bars=alpha_bars)


def make_schedule(T=1000, beta_min=1e-4, beta_max=0.02):
    """
    Linear beta schedule held in float64
    """
    if T < 1:
        raise InvalidRangeError(f'T must be positive, got {T}')
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidRangeError(f'need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}')
    betas = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def timestep_subsequence(T, steps):
    """
    Evenly spaced timesteps from 0 to T - 1, ascending
    """
    if steps < 1 or steps > T:
        raise InvalidConfigError(f'sampler steps must be in [1, {T}], got {steps}')
    if steps == 1:
        return torch.tensor([T - 1])
    return torch.linspace(0, T - 1, steps, dtype=torch.float64).round().long()


def respace(schedule, timesteps):
    """
    Schedule over a timestep subsequence so that each strided step is a valid DDPM step
    """
    return _schedule_from_alpha_bars(schedule.alpha_bars[timesteps])


def _check_t(schedule, t):
    if not 0 <= int(t) < schedule.T:
        raise InvalidRangeError(f'timestep {int(t)} outside [0, {schedule.T})')


def _coefficient(values, t, like):
    """
    Schedule entries at t (int or per-item tensor) shaped to broadcast over `like`
    """
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        picked = values[t.long()]
        return picked.view(-1, *([1] * (like.dim() - 1))).to(like.dtype)
    return values[int(t)].to(like.dtype)


def forward_diffuse(x0, t, eps, schedule):
    """
    q(x_t | x_0) sample: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
    """
    if x0.shape != eps.shape:
        raise ShapeMismatchError(f'x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ')
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.min() < 0 or t.max() >= schedule.T:
            raise InvalidRangeError(f'timesteps outside [0, {schedule.T})')
    else:
        _check_t(schedule, t)
    signal = _coefficient(schedule.alpha_bars.sqrt(), t, x0)
    noise = _coefficient((1.0 - schedule.alpha_bars).sqrt(), t, x0)
    return signal * x0 + noise * eps


def cfg_combine(eps_uncond, eps_cond, scale):
    """
    Guided prediction eps_uncond + scale (eps_cond - eps_uncond), written in the affine form
    (1 - scale) eps_uncond + scale eps_cond so that scale 0 and 1 return a branch exactly
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeMismatchError(f'branch shapes differ: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}')
    return (1.0 - scale) * eps_uncond + scale * eps_cond


def ddpm_mean(x_t, eps_hat, t, schedule):
    """
    Posterior mean (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t)
    """
    if x_t.shape != eps_hat.shape:
        raise ShapeMismatchError(f'x_t {tuple(x_t.shape)} and eps_hat {tuple(eps_hat.shape)} differ')
    _check_t(schedule, t)
    beta = schedule.betas[int(t)]
    scale = beta / (1.0 - schedule.alpha_bars[int(t)]).sqrt()
    return (x_t - scale.to(x_t.dtype) * eps_hat) / schedule.alphas[int(t)].sqrt().to(x_t.dtype)


def ddpm_step(x_t, eps_hat, t, schedule, generator):
    """
    Ancestral step x_t -> x_{t-1} with variance beta_t; no noise at t = 0

    :param generator: torch.Generator (or a list with one generator per batch item)
    """
    mean = ddpm_mean(x_t, eps_hat, t, schedule)
    if int(t) == 0:
        return mean
    noise = _noise(x_t.shape, generator, x_t.dtype)
    return mean + schedule.betas[int(t)].sqrt().to(x_t.dtype) * noise


def _noise(shape, generator, dtype):
    if isinstance(generator, (list, tuple)):
        if len(generator) != shape[0]:
            raise ShapeMismatchError(f'{len(generator)} generators for a batch of {shape[0]}')
        return torch.stack([torch.randn(shape[1:], generator=g, dtype=dtype) for g in generator])
    return torch.randn(shape, generator=generator, dtype=dtype)


def sample(denoiser, conditioning, config, schedule, shape=(1, 3, 32, 32), seeds=None,
           dtype=torch.float32, verbose=False):
    """
    Guided ancestral sampling from seeded Gaussian noise.

    :param denoiser: callable(x_t, t, conditioning) -> eps_hat, t being the original timestep
    :param conditioning: Guidance with the conditional and unconditional denoiser inputs
    :param config: SamplerConfig
    :param schedule: NoiseSchedule
    :param shape: batch shape; every item owns a noise stream
    :param seeds: one seed per batch item, default config.seed + item
    :return: final sample clipped to [-1, 1]
    """
    config.validate(schedule)
    if not isinstance(conditioning, Guidance):
        conditioning = Guidance(cond=conditioning)
    if seeds is None:
        seeds = [int(config.seed) + i for i in range(shape[0])]
    if len(seeds) != shape[0]:
        raise ShapeMismatchError(f'{len(seeds)} seeds for a batch of {shape[0]}')
    generators = [torch.Generator().manual_seed(int(s)) for s in seeds]

    timesteps = timestep_subsequence(schedule.T, config.steps)
    strided = respace(schedule, timesteps)
    x = _noise(shape, generators, dtype)

    steps = list(reversed(range(len(timesteps))))
    for i in tqdm(steps, desc='sampling', disable=not verbose, leave=False):
        t = int(timesteps[i])
        eps_cond = denoiser(x, t, conditioning.cond)
        if conditioning.uncond is None or config.guidance_scale == 1.0:
            eps_hat = eps_cond
        else:
            eps_uncond = denoiser(x, t, conditioning.uncond)
            eps_hat = cfg_combine(eps_uncond, eps_cond, config.guidance_scale)
        x = ddpm_step(x, eps_hat, i, strided, generators)
        if not torch.all(torch.isfinite(x)):
            raise DivergedSamplingError(f'non-finite sampler state at timestep {t}')

    return x.clamp(-1.0, 1.0)
