import json
import textwrap

import pandas as pd
import pytest

from anonydiff import anonymize, cli, tools

from conftest import slow

TINY_CONFIG = textwrap.dedent("""\
    [run]
    threads = 1

    [data]
    n_identities = 5
    triplets_per_identity = 2
    heldout_fraction = 0.4
    image_size = 8

    [probe]
    renders_per_identity = 4
    epochs = 1
    batch_size = 8
    embed_dim = 8
    encoder_widths = 4, 8, 8
    evaluator_widths = 4, 8, 8
    attribute_renders = 20
    attribute_epochs = 1

    [model]
    widths = 8, 16, 16
    heads = 2
    time_dim = 16
    timesteps = 10

    [train]
    steps = 2
    batch_size = 1
    checkpoint_every = 1

    [sampler]
    steps = 2

    [eval]
    d_values = 0.5, 1.0
    seeds = 0
    n_identities = 2
    n_images = 2
    batch_size = 2
    """)


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / 'tiny.ini'
    path.write_text(TINY_CONFIG)
    return str(path)


def test_unknown_config_key_exits_with_error_code(tmp_path):
    path = tmp_path / 'bad.ini'
    path.write_text('[data]\nbogus = 1\n')
    with pytest.raises(SystemExit) as err:
        cli.main(['gen-data', '-c', str(path), '-o', str(tmp_path / 'out')])
    assert str(err.value.code).startswith('ERROR: malformed-config')
    assert 'bogus' in str(err.value.code)


def test_missing_inputs_exit_with_error_code(tmp_path, config_path):
    with pytest.raises(SystemExit) as err:
        cli.main(['train-probe', '-c', config_path, '--dataset', str(tmp_path / 'absent'),
                  '-o', str(tmp_path / 'out')])
    assert str(err.value.code).startswith('ERROR: missing-file')


def test_gen_data(tmp_path, config_path):
    out_dir = tmp_path / 'data'
    assert cli.main(['gen-data', '-c', config_path, '-o', str(out_dir), '-t', '1']) == 0
    with open(out_dir / 'dataset' / 'manifest.json') as infile:
        manifest = json.load(infile)
    assert len(manifest['triplets']) == 10
    with open(out_dir / 'run_manifest.json') as infile:
        run = json.load(infile)
    assert run['command'] == 'gen-data'
    assert run['config_hash'] == cli.load_config(config_path).config_hash()


def test_tiny_pipeline(tmp_path, config_path):
    def run(*argv):
        assert cli.main(list(argv) + ['-c', config_path, '-t', '1']) == 0

    run('gen-data', '-o', str(tmp_path / 'data'))
    dataset = str(tmp_path / 'data' / 'dataset')
    run('train-probe', '--dataset', dataset, '-o', str(tmp_path / 'probe'))
    probes = str(tmp_path / 'probe' / 'probes')
    run('train', '--dataset', dataset, '--probes', probes, '-o', str(tmp_path / 'train'))
    model = str(tmp_path / 'train' / 'model')
    loss_log = pd.read_csv(tmp_path / 'train' / 'loss_log.csv')
    assert loss_log['step'].tolist() == [0, 1]

    source = str(tmp_path / 'data' / 'dataset' / 'images' / '000000_source.img')
    driving = str(tmp_path / 'data' / 'dataset' / 'images' / '000000_driving.img')
    run('anonymize', '--input', source, '--checkpoint', model, '--probes', probes, '--d', '1.0', '--seed', '3',
        '-o', str(tmp_path / 'anon'))
    output = tools.read_image(tmp_path / 'anon' / 'anonymized.img')
    assert output.shape == (8, 8, 3)
    assert (tmp_path / 'anon' / 'anonymized.png').is_file()

    run('anonymize', '--input', source, '--checkpoint', model, '--probes', probes, '--d', '1.0', '--seed', '3',
        '-o', str(tmp_path / 'anon_again'))
    assert (tools.read_image(tmp_path / 'anon_again' / 'anonymized.img') == output).all()

    run('anonymize', '--input', source, '--checkpoint', model, '--probes', probes, '-o', str(tmp_path / 'anon_default'))
    with open(tmp_path / 'anon_default' / 'run_manifest.json') as infile:
        assert json.load(infile)['d'] == 1.25

    run('swap', '--source', source, '--driving', driving, '--checkpoint', model, '--probes', probes,
        '-o', str(tmp_path / 'swap'))
    assert (tmp_path / 'swap' / 'swapped.img').is_file()

    checkpoint = str(tmp_path / 'train' / 'checkpoints' / 'step_0000002')
    run('eval', '--checkpoint', checkpoint, '--probes', probes, '--dataset', dataset, '-o', str(tmp_path / 'eval'))
    records = pd.read_csv(tmp_path / 'eval' / 'eval_anonymize.csv')
    assert len(records) == 2

    run('sweep', '--checkpoint', model, '--probes', probes, '--dataset', dataset, '--d-list', '0.0,1.0',
        '-o', str(tmp_path / 'sweep'))
    assert len(pd.read_csv(tmp_path / 'sweep' / 'sweep_by_d.csv')) == 2

    run('ablate', '--checkpoint', model, '--probes', probes, '--dataset', dataset, '-o', str(tmp_path / 'ablate'))
    grid = pd.read_csv(tmp_path / 'ablate' / 'ablation.csv')
    assert grid['ablation'].tolist() == list(anonymize.ABLATIONS)
    assert grid['reid_rate'].between(0.0, 1.0).all()
    with open(tmp_path / 'ablate' / 'run_manifest.json') as infile:
        manifest = json.load(infile)
    assert manifest['command'] == 'ablate'
    assert manifest['outputs'][str(tmp_path / 'ablate' / 'ablation.csv')] == \
        tools.get_sha256(tmp_path / 'ablate' / 'ablation.csv')


def test_resume_from_cli_checkpoint(tmp_path, config_path):
    def run(*argv):
        assert cli.main(list(argv) + ['-c', config_path, '-t', '1']) == 0

    run('gen-data', '-o', str(tmp_path / 'data'))
    dataset = str(tmp_path / 'data' / 'dataset')
    run('train-probe', '--dataset', dataset, '-o', str(tmp_path / 'probe'))
    probes = str(tmp_path / 'probe' / 'probes')
    run('train', '--dataset', dataset, '--probes', probes, '-o', str(tmp_path / 'train'))
    run('train', '--dataset', dataset, '--probes', probes, '-o', str(tmp_path / 'resumed'),
        '--resume', str(tmp_path / 'train' / 'checkpoints' / 'step_0000001'))
    with open(tmp_path / 'train' / 'run_manifest.json') as infile:
        first = json.load(infile)
    with open(tmp_path / 'resumed' / 'run_manifest.json') as infile:
        resumed = json.load(infile)
    assert resumed['steps'] == 2
    assert resumed['parameter_hash'] == first['parameter_hash']


@pytest.mark.parametrize('corruption', ['{"format": ', '[]', '{"format": "anonydiff-faces v1"}'])
def test_corrupt_dataset_manifest_exits_with_io_error(tmp_path, config_path, corruption):
    assert cli.main(['gen-data', '-c', config_path, '-o', str(tmp_path / 'data'), '-t', '1']) == 0
    dataset = tmp_path / 'data' / 'dataset'
    (dataset / 'manifest.json').write_text(corruption)
    with pytest.raises(SystemExit) as err:
        cli.main(['train-probe', '-c', config_path, '--dataset', str(dataset), '-o', str(tmp_path / 'probe')])
    assert str(err.value.code).startswith('ERROR: io: ')
    assert '\n' not in str(err.value.code)


def test_corrupt_recognizer_sidecar_exits_with_io_error(tmp_path, config_path):
    def run(*argv):
        assert cli.main(list(argv) + ['-c', config_path, '-t', '1']) == 0

    run('gen-data', '-o', str(tmp_path / 'data'))
    dataset = str(tmp_path / 'data' / 'dataset')
    run('train-probe', '--dataset', dataset, '-o', str(tmp_path / 'probe'))
    probes = tmp_path / 'probe' / 'probes'
    sidecar = probes / 'encoder' / 'recognizer.json'
    sidecar.write_text('{"config": {}}')
    with pytest.raises(SystemExit) as err:
        cli.main(['train', '-c', config_path, '--dataset', dataset, '--probes', str(probes),
                  '-o', str(tmp_path / 'train')])
    assert str(err.value.code).startswith('ERROR: io: ')


@pytest.fixture(scope='module')
def desk_run(tmp_path_factory):
    """
    Desk preset end to end: 50 identities, 32 x 32 renders, default training length
    """
    root = tmp_path_factory.mktemp('desk')
    assert cli.main(['gen-data', '-o', str(root / 'data')]) == 0
    dataset = str(root / 'data' / 'dataset')
    assert cli.main(['train-probe', '--dataset', dataset, '-o', str(root / 'probe')]) == 0
    probes = str(root / 'probe' / 'probes')
    assert cli.main(['train', '--dataset', dataset, '--probes', probes, '-o', str(root / 'train')]) == 0
    return root, dataset, probes, str(root / 'train' / 'model')


@slow
def test_desk_swap_keeps_the_source_identity(desk_run):
    root, dataset, probes, model = desk_run
    assert cli.main(['eval', '--swap', '--checkpoint', model, '--probes', probes, '--dataset', dataset,
                     '-o', str(root / 'eval_swap')]) == 0
    records = pd.read_csv(root / 'eval_swap' / 'eval_swap.csv')
    assert records['index'].nunique() == 50
    assert records['closer_to_source'].mean() >= 0.8


@slow
def test_desk_identity_distance_grows_with_d(desk_run):
    root, dataset, probes, model = desk_run
    assert cli.main(['sweep', '--checkpoint', model, '--probes', probes, '--dataset', dataset,
                     '--d-list', '0.3,0.6,0.9,1.2', '--seeds', '0,1,2,3,4', '-o', str(root / 'sweep')]) == 0
    with open(root / 'sweep' / 'sweep_summary.json') as infile:
        summary = json.load(infile)
    assert len(summary['identities']) >= 20
    assert summary['spearman_rho'] >= 0.9


@slow
def test_desk_ablation_ordering(desk_run):
    root, dataset, probes, model = desk_run
    assert cli.main(['ablate', '--checkpoint', model, '--probes', probes, '--dataset', dataset,
                     '-o', str(root / 'ablate')]) == 0
    grid = pd.read_csv(root / 'ablate' / 'ablation.csv').set_index('ablation')
    others = grid.drop(index='full')
    assert grid.loc['full', 'reid_rate'] <= others['reid_rate'].min()
    assert grid.loc['full', 'shape_dist'] >= others['shape_dist'].max()
    assert grid['reid_rate'].max() > grid.loc['full', 'reid_rate']
