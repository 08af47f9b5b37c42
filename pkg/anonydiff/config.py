#!/usr/bin/env python
"""
Run configuration: a strict INI document read and written with configparser, or the
same sections as a JSON object. Unknown sections or keys are rejected and, once parsed,
every field is explicit.
"""
import argparse
import configparser
import hashlib
import json
import textwrap
from pathlib import Path

from anonydiff import help_formatter
from anonydiff.errors import MalformedConfigError, MissingFileError


def _int_list(value):
    return tuple(int(x) for x in value.split(',') if x.strip())


def _float_list(value):
    return tuple(float(x) for x in value.split(',') if x.strip())


def _format(value):
    if isinstance(value, tuple):
        return ', '.join(_format(x) for x in value)
    return str(value)


def _from_json_value(section, key, value):
    # JSON numbers and arrays arrive typed; they go through the same parsers as INI text
    if isinstance(value, (bool, dict, type(None))):
        raise MalformedConfigError(f'[{section}] {key}: cannot parse value "{value}"')
    if isinstance(value, list):
        return ', '.join(str(x) for x in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA = {
    'run': {
        'seed': (int, 0),
        'output_dir': (str, ''),
        'threads': (int, 0),
    },
    'data': {
        'n_identities': (int, 50),
        'triplets_per_identity': (int, 10),
        'heldout_fraction': (float, 0.4),
        'image_size': (int, 32),
        'seed': (int, 0),
    },
    'probe': {
        'renders_per_identity': (int, 20),
        'heldout_fraction': (float, 0.25),
        'epochs': (int, 60),
        'batch_size': (int, 32),
        'learning_rate': (float, 1e-3),
        'weight_decay': (float, 1e-4),
        'embed_dim': (int, 64),
        'encoder_widths': (_int_list, (32, 64, 64)),
        'encoder_seed': (int, 11),
        'evaluator_widths': (_int_list, (24, 48, 96)),
        'evaluator_seed': (int, 29),
        'attribute_renders': (int, 4000),
        'attribute_epochs': (int, 60),
        'attribute_seed': (int, 5),
    },
    'model': {
        'widths': (_int_list, (32, 64, 128)),
        'attention_levels': (_int_list, (1, 2)),
        'heads': (int, 4),
        'time_dim': (int, 128),
        'timesteps': (int, 1000),
        'beta_min': (float, 1e-4),
        'beta_max': (float, 0.02),
        'dtype': (str, 'float32'),
        'seed': (int, 0),
    },
    'train': {
        'steps': (int, 10000),
        'batch_size': (int, 8),
        'accumulation_steps': (int, 1),
        'learning_rate': (float, 1e-4),
        'weight_decay': (float, 1e-2),
        'uncond_prob': (float, 0.1),
        'phase1_fraction': (float, 0.5),
        'swap_prob': (float, 0.5),
        'checkpoint_every': (int, 1000),
        'seed': (int, 0),
    },
    'sampler': {
        'steps': (int, 200),
        'guidance_scale': (float, 4.0),
        'seed': (int, 0),
        'd': (float, 1.25),
    },
    'eval': {
        'd': (float, 1.25),
        'd_values': (_float_list, (0.3, 0.6, 0.9, 1.2, 1.4, 1.5)),
        'seeds': (_int_list, (0, 1, 2, 3, 4)),
        'n_identities': (int, 20),
        'n_images': (int, 50),
        'ablation_d': (float, 1.4),
        'batch_size': (int, 16),
        'reid_k': (int, 1),
    },
}

PRESETS = {
    'desk': {},
    'large': {
        'train': {'steps': 435000, 'batch_size': 1, 'accumulation_steps': 8, 'learning_rate': 1e-5},
        'sampler': {'steps': 200, 'guidance_scale': 4.0},
    },
}


class RunConfig:
    """
    Typed view over a run configuration document
    """

    def __init__(self, values=None):
        self.values = {section: {key: default for key, (_, default) in keys.items()}
                       for section, keys in SCHEMA.items()}
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)

    def set(self, section, key, value):
        if section not in SCHEMA:
            raise MalformedConfigError(f'unknown section [{section}]')
        if key not in SCHEMA[section]:
            raise MalformedConfigError(f'unknown key "{key}" in section [{section}]')
        parser, _ = SCHEMA[section][key]
        if isinstance(value, str) and parser is not str:
            try:
                value = parser(value)
            except ValueError:
                raise MalformedConfigError(f'[{section}] {key}: cannot parse value "{value}"') from None
        elif parser in (_int_list, _float_list):
            value = tuple(value)
        self.values[section][key] = value

    def get(self, section, key):
        return self.values[section][key]

    def section(self, name):
        return dict(self.values[name])

    @classmethod
    def preset(cls, name):
        if name not in PRESETS:
            raise MalformedConfigError(f'unknown preset "{name}"')
        return cls(PRESETS[name])

    @classmethod
    def from_string(cls, text):
        parser = configparser.ConfigParser(interpolation=None, strict=True)
        try:
            parser.read_string(text)
        except configparser.Error as err:
            message = ' '.join(str(err).split())
            raise MalformedConfigError(message) from None

        if parser.defaults():
            key = next(iter(parser.defaults()))
            raise MalformedConfigError(f'unknown key "{key}" in section [{parser.default_section}]')

        config = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                config.set(section, key, value)
        return config

    @classmethod
    def from_json(cls, text):
        """
        Same schema as the INI form: {"section": {"key": value}}. List values may be
        JSON arrays or comma-separated strings.
        """
        try:
            document = json.loads(text)
        except json.JSONDecodeError as err:
            raise MalformedConfigError(f'invalid JSON at line {err.lineno} column {err.colno}: {err.msg}') from None
        if not isinstance(document, dict):
            raise MalformedConfigError('JSON config must be an object of sections')

        config = cls()
        for section, keys in document.items():
            if section not in SCHEMA:
                raise MalformedConfigError(f'unknown section [{section}]')
            if not isinstance(keys, dict):
                raise MalformedConfigError(f'section [{section}] must be an object')
            for key, value in keys.items():
                config.set(section, key, _from_json_value(section, key, value))
        return config

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, 'r') as infile:
                text = infile.read()
        except FileNotFoundError:
            raise MissingFileError(f'{path} does not exist') from None
        if Path(path).suffix.lower() == '.json':
            return cls.from_json(text)
        return cls.from_string(text)

    def to_ini(self):
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f'[{section}]')
            for key in keys:
                lines.append(f'{key} = {_format(self.values[section][key])}')
            lines.append('')
        return '\n'.join(lines)

    def write(self, path):
        with open(path, 'w') as outfile:
            outfile.write(self.to_ini())

    def config_hash(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def load_config(path=None):
    """
    Loads a config file (JSON when it ends in .json, INI otherwise), or the desk preset
    when no path is given
    """
    if path is None:
        return RunConfig()
    return RunConfig.from_file(path)


if __name__ == '__main__':
    description = 'Writes a complete run configuration for anonydiff.'
    parser = argparse.ArgumentParser(prog='config.py',
                                     description=description,
                                     usage='config.py [OPTIONS]',
                                     formatter_class=help_formatter.formatter,
                                     epilog=help_formatter.epilog())
    parser.add_argument('--preset', metavar='<name>', default='desk', choices=sorted(PRESETS),
                        help=textwrap.dedent("""\
                        Preset to start from.
                        Options: desk, large
                        Default: desk"""))
    parser.add_argument('-o', '--output', metavar='<config.ini>', default='config.ini',
                        help=textwrap.dedent("""\
                        Path of the configuration file to write.
                        Default: config.ini"""))
    args = parser.parse_args()

    RunConfig.preset(args.preset).write(args.output)
