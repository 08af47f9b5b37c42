import numpy as np
import pandas as pd
import pytest
import torch

from anonydiff import diffusion_core, synthetic_faces, tools, training
from anonydiff.condnet import init_networks
from anonydiff.errors import DivergedTrainingError, ExhaustedDatasetError, InvalidConfigError, ShapeMismatchError
from anonydiff.synthetic_faces import FaceDataset
from anonydiff.training import TrainConfig

from conftest import slow, tiny_denoiser_config


@pytest.fixture(scope='module')
def schedule():
    return diffusion_core.make_schedule(50)


def _networks(recognizer, dtype='float32', seed=0):
    return init_networks(tiny_denoiser_config(dtype=dtype, embed_dim=recognizer.embed_dim,
                                              token_dim=recognizer.feature_dim), seed=seed)


def _train(dataset, recognizer, schedule, config, dtype='float32', **kwargs):
    return training.train(dataset, _networks(recognizer, dtype), recognizer, schedule, config, verbose=False,
                          **kwargs)


def test_reconstruction_loss():
    eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert float(training.reconstruction_loss(eps, eps)) == 0.0
    assert float(training.reconstruction_loss(eps + 1.0, eps)) == pytest.approx(1.0)
    with pytest.raises(ShapeMismatchError):
        training.reconstruction_loss(eps, eps[:1])


def test_reconstruction_loss_gradient():
    eps_hat = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    eps = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x: training.reconstruction_loss(x, eps), (eps_hat,), eps=1e-6,
                                    atol=1e-8, rtol=1e-4)


def test_objective_has_a_single_term():
    assert list(training.training_objective()) == ['reconstruction']


def test_conditioning_dropout():
    rng = np.random.default_rng(0)
    assert {training.conditioning_dropout(rng, 0.0) for _ in range(1000)} == {training.CONDITIONAL}
    assert {training.conditioning_dropout(rng, 1.0) for _ in range(1000)} == {training.UNCONDITIONAL}
    draws = [training.conditioning_dropout(rng, 0.1) for _ in range(10000)]
    assert 0.08 <= draws.count(training.UNCONDITIONAL) / len(draws) <= 0.12


def test_trainable_parameters(tiny_recognizer):
    networks = _networks(tiny_recognizer)
    trainable = training.trainable_parameters(networks)
    assert not any(name.startswith(('refsrc.stem', 'refdrv.stem')) for name in trainable)
    assert not any('.core.down.' in name and name.startswith('ref') for name in trainable)
    assert 'null_embedding' in trainable
    unet_size = sum(p.numel() for p in networks.unet.parameters())
    total = sum(p.numel() for p in networks.parameters())
    subset = sum(p.numel() for p in trainable.values())
    assert unet_size < subset < total


def test_train_config_validation():
    with pytest.raises(InvalidConfigError):
        TrainConfig(uncond_prob=1.5).validate()
    with pytest.raises(InvalidConfigError):
        TrainConfig(learning_rate=0.0).validate()
    large = training.preset('large')
    assert (large.batch_size, large.accumulation_steps, large.learning_rate, large.steps) == (1, 8, 1e-5, 435000)


def test_curriculum_phases(tiny_dataset):
    train_split = tiny_dataset.split('train')
    rng = np.random.default_rng(1)
    standard = TrainConfig(steps=100, phase1_fraction=0.0)
    assert not any(training.curriculum_batch(train_split, s, standard, rng).swapped for s in range(50))

    config = TrainConfig(steps=100, phase1_fraction=0.5)
    boundary = [training.curriculum_batch(train_split, 50, config, rng) for _ in range(50)]
    assert all(e.phase == 2 and not e.swapped for e in boundary)

    draws = [training.curriculum_batch(train_split, 0, config, rng).swapped for _ in range(10000)]
    assert 0.47 <= sum(draws) / len(draws) <= 0.53


def test_swapped_example_roles(tiny_dataset):
    train_split = tiny_dataset.split('train')
    config = TrainConfig(steps=10, phase1_fraction=1.0, swap_prob=1.0, uncond_prob=0.0)
    example = training.curriculum_batch(train_split, 0, config, np.random.default_rng(0))
    assert example.swapped and example.mode == training.CONDITIONAL
    position = int(np.random.default_rng(0).integers(len(train_split)))
    assert np.array_equal(example.driving, train_split.image(position, 'ground_truth'))
    assert np.array_equal(example.ground_truth, train_split.image(position, 'driving'))


def test_empty_dataset_is_exhausted(tiny_recognizer, schedule):
    empty = FaceDataset([])
    with pytest.raises(ExhaustedDatasetError):
        training.curriculum_batch(empty, 0, TrainConfig(), np.random.default_rng(0))
    with pytest.raises(ExhaustedDatasetError):
        _train(empty, tiny_recognizer, schedule, TrainConfig(steps=1, batch_size=1))


def test_training_is_deterministic_and_keeps_frozen_weights(tiny_dataset, tiny_recognizer, schedule):
    config = TrainConfig(steps=3, batch_size=2, checkpoint_every=0, seed=4)
    initial = _networks(tiny_recognizer)
    frozen_before = tools.state_hash(training.frozen_parameters(initial))
    first, result = _train(tiny_dataset.split('train'), tiny_recognizer, schedule, config)
    second, _ = _train(tiny_dataset.split('train'), tiny_recognizer, schedule, config)
    assert tools.state_hash(first) == tools.state_hash(second)
    assert tools.state_hash(first) != tools.state_hash(initial)
    assert tools.state_hash(training.frozen_parameters(first)) == frozen_before
    assert first.trained_steps == 3
    assert list(result.loss_log.columns) == ['step', 'loss', 'mode', 'phase']
    assert result.loss_log['step'].tolist() == [0, 1, 2]
    assert np.isfinite(result.loss_log['loss']).all()


def test_frozen_weights_are_unchanged_after_one_hundred_steps(tiny_dataset, tiny_recognizer, schedule):
    initial = _networks(tiny_recognizer)
    frozen_before = {name: tools.array_sha256(param) for name, param in training.frozen_parameters(initial).items()}
    assert frozen_before
    trainable_before = tools.state_hash(training.trainable_parameters(initial))

    config = TrainConfig(steps=100, batch_size=1, checkpoint_every=0, seed=9)
    trained, result = _train(tiny_dataset.split('train'), tiny_recognizer, schedule, config)
    assert len(result.loss_log) == 100
    frozen_after = {name: tools.array_sha256(param) for name, param in training.frozen_parameters(trained).items()}
    assert frozen_after == frozen_before
    assert tools.state_hash(training.trainable_parameters(trained)) != trainable_before


def test_gradient_accumulation_matches_larger_batch(tiny_dataset, tiny_recognizer, schedule):
    train_split = tiny_dataset.split('train')
    config = TrainConfig(steps=10, uncond_prob=0.5)
    rng = np.random.default_rng(6)
    examples = [training.curriculum_batch(train_split, 0, config, rng) for _ in range(4)]
    timesteps = [int(t) for t in rng.integers(0, schedule.T, size=4)]
    noise = torch.randn((4, 3, 8, 8), generator=torch.Generator().manual_seed(6), dtype=torch.float64)

    def gradients(chunks):
        networks = _networks(tiny_recognizer, dtype='float64')
        params = training.freeze(networks)
        for chunk in chunks:
            loss = training.example_loss(networks, tiny_recognizer, schedule, [examples[i] for i in chunk],
                                         [timesteps[i] for i in chunk], noise[list(chunk)])
            (loss / len(chunks)).backward()
        return [None if p.grad is None else p.grad.clone() for p in params]

    batched = gradients([(0, 1, 2, 3)])
    accumulated = gradients([(0,), (1,), (2,), (3,)])
    for a, b in zip(batched, accumulated):
        assert (a is None) == (b is None)
        if a is not None:
            assert torch.allclose(a, b, rtol=0, atol=1e-5)


def test_unconditional_only_training_runs(tiny_dataset, tiny_recognizer, schedule):
    config = TrainConfig(steps=2, batch_size=2, uncond_prob=1.0, checkpoint_every=0)
    _, result = _train(tiny_dataset.split('train'), tiny_recognizer, schedule, config)
    assert set(result.loss_log['mode']) == {training.UNCONDITIONAL}


def test_checkpoint_resume_matches_continuous_run(tiny_dataset, tiny_recognizer, schedule, tmp_path):
    train_split = tiny_dataset.split('train')
    config = TrainConfig(steps=3, batch_size=2, checkpoint_every=1, uncond_prob=0.5, seed=2)
    continuous, result = _train(train_split, tiny_recognizer, schedule, config, dtype='float64',
                                out_dir=tmp_path / 'continuous')
    assert len(result.checkpoints) == 3
    assert (tmp_path / 'continuous' / training.LOSS_LOG).is_file()

    resumed, resumed_result = training.train(train_split, None, tiny_recognizer, schedule, config,
                                             resume_from=result.checkpoints[1], verbose=False)
    assert tools.state_hash(resumed) == tools.state_hash(continuous)
    assert resumed.trained_steps == 3
    pd.testing.assert_frame_equal(resumed_result.loss_log, result.loss_log)


def test_non_finite_loss_aborts(tiny_dataset, tiny_recognizer, schedule):
    networks = _networks(tiny_recognizer)
    with torch.no_grad():
        networks.unet.head[-1].bias.fill_(float('nan'))
    with pytest.raises(DivergedTrainingError):
        training.train(tiny_dataset.split('train'), networks, tiny_recognizer, schedule,
                       TrainConfig(steps=2, batch_size=1), verbose=False)


@slow
def test_desk_training_lowers_the_loss(tmp_path, tiny_recognizer):
    dataset_dir, _ = synthetic_faces.make_dataset(20, 4, seed=0, out_dir=tmp_path / 'dataset', size=8, threads=1)
    dataset = synthetic_faces.load_dataset(dataset_dir).split('train')
    config = TrainConfig(steps=400, batch_size=4, learning_rate=1e-3, checkpoint_every=0)
    _, result = _train(dataset, tiny_recognizer, diffusion_core.make_schedule(), config)
    losses = result.loss_log['loss']
    assert losses.tail(50).mean() < losses.head(50).mean()
