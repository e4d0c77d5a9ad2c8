"""Pipeline configuration: packaged TOML template, optional user overlay, then overrides."""
from pathlib import Path

import toml
from easydict import EasyDict as edict

from taint_grammar import utils
from taint_grammar.generator import GenConfig

logger = utils.set_logger(utils.get_module_name(__file__))

TEMPLATE_PATH = Path(__file__).parent.joinpath('resources', 'config_template.toml')

# keys that must be >= 1
POSITIVE_KEYS = [('pipeline', 'max_period'),
                 ('generator', 'max_array_count'), ('generator', 'max_varlen_size'),
                 ('generator', 'max_relayout'), ('generator', 'attempts'), ('generator', 'match_budget'),
                 ('vm', 'step_budget')]


def _merge(base, overlay, path=''):
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value, f'{path}{key}.')
        else:
            if key not in base:
                logger.warning(f'unknown configuration key {path}{key}')
            base[key] = value
    return base


def validate(config):
    for section, key in POSITIVE_KEYS:
        value = config[section][key]
        if not isinstance(value, int) or value < 1:
            raise ValueError(f'{section}.{key} must be an integer >= 1, got {value!r}')
    if config.generator.samples < 0:
        raise ValueError(f'generator.samples must be >= 0, got {config.generator.samples!r}')
    if not isinstance(config.generator.reparse, bool):
        raise ValueError(f'generator.reparse must be true or false, got {config.generator.reparse!r}')
    return config


def load_config(path=None, overrides=None):
    """PipelineConfig as an EasyDict: template, then the TOML file at ``path``, then ``overrides``.

    ``overrides`` is a nested dict (``{'generator': {'seed': 3}}``); None values are skipped.
    """
    config = toml.load(str(TEMPLATE_PATH))
    if path is not None:
        _merge(config, toml.load(str(path)))
    if overrides:
        _merge(config, {section: {key: value for key, value in values.items() if value is not None}
                        for section, values in overrides.items()})
    return validate(edict(config))


def gen_config(config, **changes):
    """GenConfig from the ``[generator]`` section."""
    section = dict(config.generator)
    section.update(changes)
    return GenConfig(**{key: section[key] for key in GenConfig.__dataclass_fields__ if key in section})
