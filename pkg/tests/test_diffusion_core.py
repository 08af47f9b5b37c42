import numpy as np
import pytest
import torch

from anonydiff import diffusion_core
from anonydiff.diffusion_core import Guidance, SamplerConfig
from anonydiff.errors import DivergedSamplingError, InvalidConfigError, InvalidRangeError, ShapeMismatchError


@pytest.fixture(scope='module')
def schedule():
    return diffusion_core.make_schedule(1000, 1e-4, 0.02)


def test_schedule_invariants(schedule):
    assert schedule.T == 1000
    assert float(schedule.alpha_bars[0]) == 1.0 - 1e-4
    assert torch.all(schedule.alpha_bars[1:] < schedule.alpha_bars[:-1])
    for values in (schedule.betas, schedule.alphas, schedule.alpha_bars):
        assert torch.all((values > 0) & (values < 1))


def test_schedule_matches_cumulative_product(schedule):
    expected = np.prod(1.0 - np.linspace(1e-4, 0.02, 1000))
    assert float(schedule.alpha_bars[999]) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize('beta_min, beta_max', [(0.0, 0.02), (0.03, 0.02), (1e-4, 1.0)])
def test_schedule_rejects_invalid_range(beta_min, beta_max):
    with pytest.raises(InvalidRangeError):
        diffusion_core.make_schedule(10, beta_min, beta_max)


def test_forward_diffuse(schedule):
    g = torch.Generator().manual_seed(0)
    x0 = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(4, 3, 8, 8, generator=g, dtype=torch.float64)
    assert torch.equal(diffusion_core.forward_diffuse(x0, 300, torch.zeros_like(x0), schedule),
                       schedule.alpha_bars[300].sqrt() * x0)
    near = diffusion_core.forward_diffuse(x0, 0, eps, schedule)
    assert float((near - x0).abs().mean()) < 1e-2
    with pytest.raises(ShapeMismatchError):
        diffusion_core.forward_diffuse(x0, 0, eps[:2], schedule)
    with pytest.raises(InvalidRangeError):
        diffusion_core.forward_diffuse(x0, 1000, eps, schedule)


def test_forward_diffuse_preserves_variance(schedule):
    g = torch.Generator().manual_seed(1)
    x0 = torch.randn(10000, generator=g, dtype=torch.float64)
    eps = torch.randn(10000, generator=g, dtype=torch.float64)
    x_t = diffusion_core.forward_diffuse(x0, 500, eps, schedule)
    assert float(x_t.var()) == pytest.approx(1.0, abs=0.05)


def test_forward_diffuse_per_item_timesteps(schedule):
    x0 = torch.ones(3, 2, dtype=torch.float64)
    out = diffusion_core.forward_diffuse(x0, torch.tensor([0, 10, 999]), torch.zeros_like(x0), schedule)
    for i, t in enumerate((0, 10, 999)):
        assert torch.allclose(out[i], schedule.alpha_bars[t].sqrt() * x0[i])


def test_cfg_combine_identities():
    g = torch.Generator().manual_seed(2)
    uncond = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    cond = torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    assert torch.equal(diffusion_core.cfg_combine(uncond, cond, 1.0), cond)
    assert torch.equal(diffusion_core.cfg_combine(uncond, cond, 0.0), uncond)
    assert torch.equal(diffusion_core.cfg_combine(torch.zeros_like(cond), cond, 4.0), 4.0 * cond)
    for s1, s2 in ((0.0, 4.0), (1.5, 2.5), (3.0, 7.0)):
        lhs = diffusion_core.cfg_combine(uncond, cond, s1) + diffusion_core.cfg_combine(uncond, cond, s2)
        rhs = 2.0 * diffusion_core.cfg_combine(uncond, cond, (s1 + s2) / 2.0)
        assert torch.allclose(lhs, rhs, rtol=0, atol=1e-12)
    with pytest.raises(ShapeMismatchError):
        diffusion_core.cfg_combine(uncond, cond[:1], 2.0)


def test_ddpm_step_final_step_is_noise_free(schedule):
    x_t = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    eps_hat = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    step = diffusion_core.ddpm_step(x_t, eps_hat, 0, schedule, torch.Generator().manual_seed(5))
    assert torch.equal(step, diffusion_core.ddpm_mean(x_t, eps_hat, 0, schedule))


def test_ddpm_mean_matches_posterior_oracle(schedule):
    g = torch.Generator().manual_seed(3)
    x0 = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 8, 8, generator=g, dtype=torch.float64)
    for t in (1, 50, 400, 999):
        x_t = diffusion_core.forward_diffuse(x0, t, eps, schedule)
        ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t - 1]
        beta, alpha = schedule.betas[t], schedule.alphas[t]
        posterior = (ab_prev.sqrt() * beta / (1 - ab)) * x0 + (alpha.sqrt() * (1 - ab_prev) / (1 - ab)) * x_t
        mean = diffusion_core.ddpm_mean(x_t, eps, t, schedule)
        assert torch.allclose(mean, posterior, rtol=0, atol=1e-6)


def test_ddpm_step_noise_has_beta_variance(schedule):
    x_t = torch.zeros(10000, dtype=torch.float64)
    step = diffusion_core.ddpm_step(x_t, torch.zeros_like(x_t), 700, schedule, torch.Generator().manual_seed(4))
    assert float(step.var()) == pytest.approx(float(schedule.betas[700]), rel=0.05)


def test_timestep_subsequence_and_respace(schedule):
    timesteps = diffusion_core.timestep_subsequence(1000, 200)
    assert len(timesteps) == 200
    assert int(timesteps[0]) == 0 and int(timesteps[-1]) == 999
    assert torch.all(timesteps[1:] > timesteps[:-1])
    assert diffusion_core.timestep_subsequence(1000, 1).tolist() == [999]
    with pytest.raises(InvalidConfigError):
        diffusion_core.timestep_subsequence(1000, 1001)

    full = diffusion_core.respace(schedule, torch.arange(1000))
    assert torch.allclose(full.betas, schedule.betas, rtol=0, atol=1e-12)
    strided = diffusion_core.respace(schedule, timesteps)
    assert torch.equal(strided.alpha_bars, schedule.alpha_bars[timesteps])


def _shrink(x_t, t, conditioning):
    return 0.1 * x_t + conditioning


def test_sample_is_seed_deterministic(schedule):
    config = SamplerConfig(steps=10, guidance_scale=2.0, seed=7)
    guidance = Guidance(cond=0.5, uncond=-0.5)
    first = diffusion_core.sample(_shrink, guidance, config, schedule, shape=(2, 3, 4, 4))
    second = diffusion_core.sample(_shrink, guidance, config, schedule, shape=(2, 3, 4, 4))
    assert torch.equal(first, second)
    assert first.shape == (2, 3, 4, 4)
    assert first.min() >= -1.0 and first.max() <= 1.0
    other = diffusion_core.sample(_shrink, guidance, SamplerConfig(steps=10, guidance_scale=2.0, seed=8),
                                  schedule, shape=(2, 3, 4, 4))
    assert float((first - other).abs().max()) > 1e-3


def test_sample_items_own_their_noise_stream(schedule):
    config = SamplerConfig(steps=5, guidance_scale=1.0, seed=0)
    batch = diffusion_core.sample(_shrink, Guidance(cond=0.0), config, schedule, shape=(3, 1, 2, 2),
                                  seeds=[4, 5, 6], dtype=torch.float64)
    single = diffusion_core.sample(_shrink, Guidance(cond=0.0), config, schedule, shape=(1, 1, 2, 2),
                                   seeds=[5], dtype=torch.float64)
    assert torch.allclose(batch[1], single[0], rtol=0, atol=1e-12)


def test_guidance_scale_one_skips_unconditional_branch(schedule):
    calls = []

    def denoiser(x_t, t, conditioning):
        calls.append(conditioning)
        return torch.zeros_like(x_t)

    diffusion_core.sample(denoiser, Guidance(cond='cond', uncond='uncond'),
                          SamplerConfig(steps=4, guidance_scale=1.0), schedule, shape=(1, 1, 2, 2))
    assert calls == ['cond'] * 4
    calls.clear()
    diffusion_core.sample(denoiser, Guidance(cond='cond', uncond='uncond'),
                          SamplerConfig(steps=4, guidance_scale=4.0), schedule, shape=(1, 1, 2, 2))
    assert calls.count('uncond') == 4


def test_sample_passes_original_timesteps(schedule):
    seen = []

    def denoiser(x_t, t, conditioning):
        seen.append(t)
        return torch.zeros_like(x_t)

    diffusion_core.sample(denoiser, None, SamplerConfig(steps=5, guidance_scale=1.0), schedule, shape=(1, 1, 2, 2))
    assert seen == sorted(diffusion_core.timestep_subsequence(1000, 5).tolist(), reverse=True)


def test_gaussian_target_oracle(schedule):
    mu = 0.3

    def denoiser(x_t, t, conditioning):
        ab = schedule.alpha_bars[t].to(x_t.dtype)
        return (x_t - ab.sqrt() * mu) / (1 - ab).sqrt()

    samples = diffusion_core.sample(denoiser, None, SamplerConfig(steps=50, guidance_scale=1.0, seed=0),
                                    schedule, shape=(2000, 1, 1, 1), dtype=torch.float64)
    assert abs(float(samples.mean()) - mu) < 0.05


def test_non_finite_state_aborts(schedule):
    def denoiser(x_t, t, conditioning):
        return torch.full_like(x_t, float('nan'))

    with pytest.raises(DivergedSamplingError):
        diffusion_core.sample(denoiser, None, SamplerConfig(steps=3), schedule, shape=(1, 1, 2, 2))


def test_sampler_config_validation(schedule):
    with pytest.raises(InvalidConfigError):
        diffusion_core.sample(_shrink, 0.0, SamplerConfig(steps=2000), schedule, shape=(1, 1, 2, 2))
    with pytest.raises(InvalidConfigError):
        SamplerConfig(guidance_scale=-1.0).validate()
