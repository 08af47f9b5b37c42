#!/usr/bin/env python
import os
import sys
import textwrap
from pathlib import Path

import torch

from anonydiff import anonymize, diffusion_core, embedding, help_formatter, metrics, synthetic_faces, tools, training
from anonydiff.condnet import DenoiserConfig, init_networks, load_networks, save_networks
from anonydiff.config import load_config
from anonydiff.errors import AnonyDiffError, InvalidConfigError, MissingFileError

ENCODER_DIR = 'encoder'
EVALUATOR_DIR = 'evaluator'
ATTRIBUTES_DIR = 'attributes'


def output_dir(args, config):
    """
    -o wins over [run] output_dir, which wins over <command>_out_<date>
    """
    out_dir = args.output or config.get('run', 'output_dir') or args.default_output
    os.makedirs(out_dir, exist_ok=True)
    return Path(out_dir)


def _require(path, what):
    if path is None or not os.path.exists(path):
        raise MissingFileError(f'{what} {path} does not exist')
    return Path(path)


def _float_list(text):
    try:
        return [float(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise InvalidConfigError(f'cannot parse "{text}" as a comma separated list of numbers') from None


def _int_list(text):
    try:
        return [int(x) for x in text.split(',') if x.strip()]
    except ValueError:
        raise InvalidConfigError(f'cannot parse "{text}" as a comma separated list of integers') from None


def recognizer_config(config, encoder=True):
    probe = config.section('probe')
    return embedding.RecognizerConfig(
        widths=tuple(probe['encoder_widths'] if encoder else probe['evaluator_widths']),
        embed_dim=probe['embed_dim'],
        image_size=config.get('data', 'image_size'),
        epochs=probe['epochs'],
        batch_size=probe['batch_size'],
        learning_rate=probe['learning_rate'],
        weight_decay=probe['weight_decay'],
        heldout_fraction=probe['heldout_fraction'],
        seed=probe['encoder_seed'] if encoder else probe['evaluator_seed'])


def denoiser_config(config, recognizer):
    model = config.section('model')
    return DenoiserConfig(widths=tuple(model['widths']),
                          attention_levels=tuple(model['attention_levels']),
                          heads=model['heads'],
                          embed_dim=recognizer.embed_dim,
                          time_dim=model['time_dim'],
                          token_dim=recognizer.feature_dim,
                          token_grid=recognizer.token_grid,
                          image_size=config.get('data', 'image_size'),
                          dtype=model['dtype'])


def make_schedule(config):
    model = config.section('model')
    return diffusion_core.make_schedule(model['timesteps'], model['beta_min'], model['beta_max'])


def sampler_config(config, seed=None, d=None):
    sampler = config.section('sampler')
    return diffusion_core.SamplerConfig(steps=sampler['steps'],
                                        guidance_scale=sampler['guidance_scale'],
                                        seed=sampler['seed'] if seed is None else seed,
                                        d=sampler['d'] if d is None else d)


def train_config(config):
    return training.TrainConfig(**config.section('train')).validate()


def _model_dir(path):
    """
    Accepts a networks archive or a training checkpoint holding one
    """
    path = _require(path, 'model')
    if Path(path, 'networks', 'MANIFEST.json').is_file():
        return Path(path, 'networks')
    return path


def _load_probes(probes_dir, evaluator=False, attributes=False):
    probes_dir = _require(probes_dir, 'probe directory')
    loaded = [embedding.load_recognizer(probes_dir / ENCODER_DIR)]
    if evaluator:
        loaded.append(embedding.load_recognizer(probes_dir / EVALUATOR_DIR))
    if attributes:
        loaded.append(metrics.load_attribute_probe(probes_dir / ATTRIBUTES_DIR))
    return loaded


def _bundle(args, config):
    recognizer, evaluator, probe = _load_probes(args.probes, evaluator=True, attributes=True)
    networks = load_networks(_model_dir(args.checkpoint))
    return metrics.EvalBundle(networks=networks, recognizer=recognizer, evaluator=evaluator, probe=probe,
                              schedule=make_schedule(config), sampler=sampler_config(config))


def cmd_gen_data(args, config):
    out_dir = output_dir(args, config)
    data = config.section('data')
    dataset_dir, manifest = synthetic_faces.make_dataset(data['n_identities'], data['triplets_per_identity'],
                                                         data['seed'], out_dir / 'dataset',
                                                         heldout_fraction=data['heldout_fraction'],
                                                         size=data['image_size'], threads=args.threads)
    print(f'{len(manifest["triplets"])} triplets written to {dataset_dir}')
    tools.write_run_manifest(out_dir, 'gen-data', config, data['seed'],
                             outputs=[dataset_dir / 'manifest.json'])
    return dataset_dir


def cmd_train_probe(args, config):
    out_dir = output_dir(args, config)
    dataset = synthetic_faces.load_dataset(_require(args.dataset, 'dataset'))
    probe = config.section('probe')
    config_hash = config.config_hash()

    print('Training the conditioning encoder')
    encoder_config = recognizer_config(config, encoder=True)
    images, labels = embedding.recognizer_training_set(dataset, probe['renders_per_identity'], encoder_config.seed)
    encoder = embedding.train_recognizer(images, labels, encoder_config)
    embedding.save_recognizer(encoder, out_dir / 'probes' / ENCODER_DIR, config_hash)

    print('Training the evaluator')
    evaluator_config = recognizer_config(config, encoder=False)
    evaluator_ids = [embedding.EVALUATOR_ID_OFFSET + i for i in range(len(dataset.split('train').identities))]
    images, labels = embedding.render_identity_set(evaluator_ids, probe['renders_per_identity'],
                                                   evaluator_config.seed, world_seed=dataset.seed,
                                                   size=dataset.image_size)
    evaluator = embedding.train_recognizer(images, labels, evaluator_config)
    embedding.save_recognizer(evaluator, out_dir / 'probes' / EVALUATOR_DIR, config_hash)

    print('Training the attribute probe')
    attribute_config = metrics.ProbeConfig(image_size=dataset.image_size, renders=probe['attribute_renders'],
                                           epochs=probe['attribute_epochs'], batch_size=probe['batch_size'],
                                           learning_rate=probe['learning_rate'],
                                           weight_decay=probe['weight_decay'], seed=probe['attribute_seed'])
    attribute_probe = metrics.train_attribute_probe(attribute_config, world_seed=dataset.seed)
    metrics.save_attribute_probe(attribute_probe, out_dir / 'probes' / ATTRIBUTES_DIR, config_hash)

    tools.write_run_manifest(out_dir, 'train-probe', config, probe['encoder_seed'],
                             inputs=[Path(args.dataset, 'manifest.json')],
                             outputs=[out_dir / 'probes' / d / 'MANIFEST.json'
                                      for d in (ENCODER_DIR, EVALUATOR_DIR, ATTRIBUTES_DIR)],
                             extra={'encoder_accuracy': encoder.accuracy,
                                    'evaluator_accuracy': evaluator.accuracy,
                                    'attribute_pose_error': attribute_probe.pose_error})
    return out_dir / 'probes'


def cmd_train(args, config):
    out_dir = output_dir(args, config)
    dataset = synthetic_faces.load_dataset(_require(args.dataset, 'dataset')).split('train')
    recognizer, = _load_probes(args.probes)
    settings = train_config(config)
    networks = None
    if args.resume is None:
        networks = init_networks(denoiser_config(config, recognizer), seed=config.get('model', 'seed'))
    else:
        _require(args.resume, 'checkpoint')
    networks, result = training.train(dataset, networks, recognizer, make_schedule(config), settings,
                                      out_dir=out_dir, resume_from=args.resume,
                                      config_hash=config.config_hash())
    model_dir = save_networks(networks, out_dir / 'model', config_hash=config.config_hash())
    tools.write_run_manifest(out_dir, 'train', config, settings.seed,
                             inputs=[Path(args.dataset, 'manifest.json')],
                             outputs=[model_dir / 'MANIFEST.json', out_dir / training.LOSS_LOG],
                             extra={'steps': result.steps,
                                    'parameter_hash': tools.state_hash(networks),
                                    'checkpoints': [str(p) for p in result.checkpoints]})
    return model_dir


def _write_output(out_dir, name, image):
    image = tools.to_image(image)
    img_path = tools.write_image(out_dir / f'{name}.img', image)
    png_path = tools.save_png(out_dir / f'{name}.png', image)
    return img_path, png_path


def _read_input(path, size):
    image = tools.load_any_image(_require(path, 'input image'))
    if image.shape != (size, size, 3):
        raise InvalidConfigError(f'{path} is {image.shape[1]}x{image.shape[0]}, expected {size}x{size}')
    return image


def cmd_anonymize(args, config):
    out_dir = output_dir(args, config)
    recognizer, = _load_probes(args.probes)
    networks = load_networks(_model_dir(args.checkpoint))
    d = config.get('sampler', 'd') if args.d is None else args.d
    seed = config.get('sampler', 'seed') if args.seed is None else args.seed
    image = _read_input(args.input, networks.config.image_size)
    request = anonymize.AnonymizeRequest(image=image, d=d, seed=seed, ablation=args.ablation,
                                         sampler=sampler_config(config, seed=seed, d=d))
    output = anonymize.anonymize(request, networks, recognizer, make_schedule(config), verbose=True)
    img_path, png_path = _write_output(out_dir, 'anonymized', output)
    record = {'input': str(args.input), 'd': d, 'seed': seed, 'ablation': args.ablation,
              'output': str(img_path)}
    tools.write_run_manifest(out_dir, 'anonymize', config, seed, inputs=[args.input],
                             outputs=[img_path, png_path], extra=record)
    print(f'Anonymized image written to {img_path} (d = {d}, seed = {seed})')
    return img_path


def cmd_swap(args, config):
    out_dir = output_dir(args, config)
    recognizer, = _load_probes(args.probes)
    networks = load_networks(_model_dir(args.checkpoint))
    seed = config.get('sampler', 'seed') if args.seed is None else args.seed
    source = _read_input(args.source, networks.config.image_size)
    driving = _read_input(args.driving, networks.config.image_size)
    output = anonymize.swap(source, driving, seed, networks, recognizer, make_schedule(config),
                            sampler=sampler_config(config, seed=seed, d=0.0), verbose=True)
    img_path, png_path = _write_output(out_dir, 'swapped', output)
    tools.write_run_manifest(out_dir, 'swap', config, seed, inputs=[args.source, args.driving],
                             outputs=[img_path, png_path],
                             extra={'source': str(args.source), 'driving': str(args.driving), 'seed': seed})
    print(f'Swapped image written to {img_path}')
    return img_path


def cmd_eval(args, config):
    out_dir = output_dir(args, config)
    bundle = _bundle(args, config)
    dataset = synthetic_faces.load_dataset(_require(args.dataset, 'dataset'))
    settings = config.section('eval')
    mode = 'swap' if args.swap else 'anonymize'
    report = metrics.evaluate(bundle, dataset, d=settings['d'], seeds=settings['seeds'],
                              n_images=settings['n_images'], reid_k=settings['reid_k'], mode=mode,
                              batch_size=settings['batch_size'], config=settings)
    csv_path, json_path = report.write(out_dir, f'eval_{mode}', config.config_hash())
    for key, value in report.means.items():
        print(f'{key}: {value:.4f}')
    tools.write_run_manifest(out_dir, 'eval', config, settings['seeds'][0],
                             inputs=[Path(_model_dir(args.checkpoint), 'MANIFEST.json')],
                             outputs=[csv_path, json_path], extra={'mode': mode})
    return report


def cmd_sweep(args, config):
    out_dir = output_dir(args, config)
    bundle = _bundle(args, config)
    dataset = synthetic_faces.load_dataset(_require(args.dataset, 'dataset'))
    settings = config.section('eval')
    d_values = settings['d_values'] if args.d_list is None else _float_list(args.d_list)
    seeds = settings['seeds'] if args.seeds is None else _int_list(args.seeds)
    for d in d_values:
        anonymize.check_degree(d)
    _, per_d, summary = metrics.sweep_report(bundle, dataset, d_values, settings['n_identities'], seeds,
                                             out_dir=out_dir, batch_size=settings['batch_size'],
                                             config_hash=config.config_hash())
    print(per_d.to_string(index=False))
    print(f'Spearman rho of identity distance vs d: {summary["spearman_rho"]}')
    tools.write_run_manifest(out_dir, 'sweep', config, seeds[0],
                             inputs=[Path(_model_dir(args.checkpoint), 'MANIFEST.json')],
                             outputs=[out_dir / 'sweep.csv', out_dir / 'sweep_summary.json'],
                             extra={'d_values': list(d_values), 'seeds': list(seeds)})
    return summary


def cmd_ablate(args, config):
    out_dir = output_dir(args, config)
    bundle = _bundle(args, config)
    dataset = synthetic_faces.load_dataset(_require(args.dataset, 'dataset'))
    settings = config.section('eval')
    grid = metrics.ablation_grid(bundle, dataset, d=settings['ablation_d'], seeds=settings['seeds'],
                                 n_images=settings['n_images'], reid_k=settings['reid_k'],
                                 batch_size=settings['batch_size'])
    grid_path = out_dir / 'ablation.csv'
    grid.to_csv(grid_path, index=False)
    print(grid.to_string(index=False))
    tools.write_run_manifest(out_dir, 'ablate', config, settings['seeds'][0],
                             inputs=[Path(_model_dir(args.checkpoint), 'MANIFEST.json')],
                             outputs=[grid_path])
    return grid


def _add_dataset(group):
    group.add_argument('--dataset', required=True, metavar='<dataset_dir>',
                       help=textwrap.dedent("""\
                       Dataset directory written by gen-data.
                       """))


def _add_probes(group):
    group.add_argument('--probes', required=True, metavar='<probes_dir>',
                       help=textwrap.dedent("""\
                       Probe directory written by train-probe.
                       """))


def _add_checkpoint(group):
    group.add_argument('--checkpoint', required=True, metavar='<model_dir>',
                       help=textwrap.dedent("""\
                       Trained model (train output model/ or a checkpoint directory).
                       """))


def _add_seed(group):
    group.add_argument('--seed', type=int, metavar='N', default=None,
                       help=textwrap.dedent("""\
                       Sampling seed.
                       Default: [sampler] seed"""))


def build_parser():
    description = 'Diffusion-based face anonymization and face swapping on synthetic faces.'
    parser, subparsers = help_formatter.initialize_argparse(name='anonydiff', desc=description,
                                                            usage='anonydiff <command> [OPTIONS]')

    sub, optional, required = help_formatter.add_command(subparsers, 'gen-data', 'Render a triplet dataset.',
                                                         'anonydiff gen-data [OPTIONS]')
    sub.set_defaults(func=cmd_gen_data)

    sub, optional, required = help_formatter.add_command(subparsers, 'train-probe',
                                                         'Train the encoder, evaluator and attribute probe.',
                                                         'anonydiff train-probe --dataset <dir> [OPTIONS]')
    _add_dataset(required)
    sub.set_defaults(func=cmd_train_probe)

    sub, optional, required = help_formatter.add_command(subparsers, 'train', 'Train the anonymizer.',
                                                         'anonydiff train --dataset <dir> --probes <dir> '
                                                         '[OPTIONS]')
    _add_dataset(required)
    _add_probes(required)
    optional.add_argument('--resume', metavar='<checkpoint_dir>', default=None,
                          help=textwrap.dedent("""\
                          Continue training from a checkpoint directory.
                          """))
    sub.set_defaults(func=cmd_train)

    sub, optional, required = help_formatter.add_command(subparsers, 'anonymize', 'Anonymize one image.',
                                                         'anonydiff anonymize --input <image> --checkpoint <dir> '
                                                         '--probes <dir> [OPTIONS]')
    required.add_argument('--input', required=True, metavar='<image>',
                          help=textwrap.dedent("""\
                          Input image (.img or .png).
                          """))
    _add_checkpoint(required)
    _add_probes(required)
    optional.add_argument('--d', type=float, metavar='<degree>', default=None,
                          help=textwrap.dedent("""\
                          Degree of anonymization.
                          Default: [sampler] d (1.25)"""))
    _add_seed(optional)
    optional.add_argument('--ablation', default='full', choices=anonymize.ABLATIONS, metavar='<mode>',
                          help=textwrap.dedent(f"""\
                          Ablation mode.
                          Options: {', '.join(anonymize.ABLATIONS)}
                          Default: full"""))
    sub.set_defaults(func=cmd_anonymize)

    sub, optional, required = help_formatter.add_command(subparsers, 'swap', 'Swap a source face into a '
                                                                             'driving image.',
                                                         'anonydiff swap --source <image> --driving <image> '
                                                         '--checkpoint <dir> --probes <dir> [OPTIONS]')
    required.add_argument('--source', required=True, metavar='<image>',
                          help='Image providing the identity.')
    required.add_argument('--driving', required=True, metavar='<image>',
                          help='Image providing pose, gaze, expression and background.')
    _add_checkpoint(required)
    _add_probes(required)
    _add_seed(optional)
    sub.set_defaults(func=cmd_swap)

    for name, desc, func in (('eval', 'Evaluate on held-out identities.', cmd_eval),
                             ('sweep', 'Sweep the degree of anonymization.', cmd_sweep),
                             ('ablate', 'Compare the ablation modes.', cmd_ablate)):
        sub, optional, required = help_formatter.add_command(subparsers, name, desc,
                                                             f'anonydiff {name} --checkpoint <dir> --probes <dir> '
                                                             f'--dataset <dir> [OPTIONS]')
        _add_checkpoint(required)
        _add_probes(required)
        _add_dataset(required)
        if name == 'eval':
            optional.add_argument('--swap', action='store_true',
                                  help=textwrap.dedent("""\
                                  Evaluate face swapping instead of anonymization.
                                  """))
        if name == 'sweep':
            optional.add_argument('--d-list', metavar='<d,d,...>', default=None,
                                  help=textwrap.dedent("""\
                                  Comma separated degrees of anonymization.
                                  Default: [eval] d_values"""))
            optional.add_argument('--seeds', metavar='<s,s,...>', default=None,
                                  help=textwrap.dedent("""\
                                  Comma separated seeds.
                                  Default: [eval] seeds"""))
        sub.set_defaults(func=func)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        tools.configure_threads(args.threads or config.get('run', 'threads'))
        torch.manual_seed(config.get('run', 'seed'))
        args.func(args, config)
    except AnonyDiffError as err:
        message = ' '.join(str(err).split())
        sys.exit(f'ERROR: {err.code}: {message}')
    return 0


if __name__ == '__main__':
    main()
