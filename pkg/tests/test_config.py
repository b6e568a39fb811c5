#!/usr/bin/env python

"""Tests for the experiment config."""
import os
import json

import pytest

from pyflowalign.config import ExperimentConfig, FinetuneSection, PretrainConfig, parse_config
from pyflowalign.align import FinetuneConfig
from pyflowalign.baselines import BaselineConfig
from pyflowalign.data import GaussianMixture
from pyflowalign.rewards import Ring
from pyflowalign.errors import ConfigError, ShapeError


@pytest.fixture
def minimal():
    return {'experiment': 'ring', 'seed': 3}


def _write(tmp_path, data) -> str:
    path = os.path.join(str(tmp_path), 'config.json')
    with open(path, mode='w') as file:
        if isinstance(data, str):
            file.write(data)
        else:
            json.dump(data, file)
    return path


def test_minimal_config_is_filled_with_defaults(minimal):
    config = ExperimentConfig(minimal)
    assert config.name == 'ring'
    assert config.seed == 3
    assert isinstance(config.data, GaussianMixture)
    assert isinstance(config.reward, Ring)
    assert config.dim == 2

    options = config.finetune.options
    assert isinstance(options, FinetuneConfig)
    assert options.bins == 5
    assert options.alpha == 1e4
    assert options.clip_percentile == 80.0
    assert options.eta == 'quadratic'
    assert config.output_dir == os.path.join('runs', 'ring')


@pytest.mark.parametrize('key', ['experiment', 'seed'])
def test_missing_required_keys_are_named(minimal, key):
    del minimal[key]
    with pytest.raises(ConfigError) as error:
        ExperimentConfig(minimal)
    assert error.value.key == key


def test_unknown_keys_are_named(minimal):
    with pytest.raises(ConfigError) as error:
        ExperimentConfig({**minimal, 'foo': 1})
    assert error.value.key == 'foo'

    with pytest.raises(ConfigError) as error:
        ExperimentConfig({**minimal, 'eval': {'n_sample': 10}})
    assert error.value.key == 'n_sample'


def test_seed_validation(minimal):
    with pytest.raises(ConfigError) as error:
        ExperimentConfig({**minimal, 'seed': True})
    assert error.value.key == 'seed'
    with pytest.raises(ConfigError):
        ExperimentConfig({**minimal, 'seed': -1})
    with pytest.raises(ConfigError):
        ExperimentConfig({**minimal, 'seed': '3'})
    assert ExperimentConfig({**minimal, 'seed': 2 ** 64 - 1}).seed == 2 ** 64 - 1


def test_reward_has_to_fit_the_data(minimal):
    data = {'kind': 'point_mass', 'location': [0.0, 0.0, 0.0]}
    reward = {'kind': 'quadratic', 'H': [[1.0, 0.0], [0.0, 1.0]], 'h': [0.0, 0.0]}
    with pytest.raises(ShapeError):
        ExperimentConfig({**minimal, 'data': data, 'reward': reward})


def test_finetune_section_selects_the_method_options():
    section = FinetuneSection.from_dict({'method': 'draft', 'K': 2, 'refl_range': [10, 20]})
    assert isinstance(section.options, BaselineConfig)
    assert section.options.kind == 'draft'
    assert section.options.K == 2

    with pytest.raises(ConfigError) as error:
        FinetuneSection.from_dict({'method': 'ppo'})
    assert error.value.key == 'method'


def test_pretrain_section_validation():
    assert PretrainConfig().network_spec(2).hidden == [64, 64]
    with pytest.raises(ConfigError):
        PretrainConfig(batch=0)
    with pytest.raises(ConfigError):
        PretrainConfig(network={'hidden': [8], 'activation': 'gelu'})


def test_resolved_config_reproduces_itself(minimal):
    config = ExperimentConfig({**minimal, 'finetune': {'method': 'lean_adjoint', 'n_rounds': 7}})
    resolved = config.to_dict()
    assert resolved['finetune']['method'] == 'lean_adjoint'
    assert resolved['finetune']['n_rounds'] == 7
    assert ExperimentConfig.from_dict(json.loads(json.dumps(resolved))).to_dict() == resolved


def test_parse_config_overrides(tmp_path, minimal):
    path = _write(tmp_path, minimal)
    config = parse_config(path, seed=11, output_dir='elsewhere')
    assert config.seed == 11
    assert config.output_dir == 'elsewhere'


def test_parse_config_errors(tmp_path):
    with pytest.raises(ConfigError) as error:
        parse_config(os.path.join(str(tmp_path), 'missing.json'))
    assert error.value.key == 'config'

    with pytest.raises(ConfigError):
        parse_config(_write(tmp_path, '{"experiment": '))
    with pytest.raises(ConfigError):
        parse_config(_write(tmp_path, [1, 2, 3]))


@pytest.mark.parametrize('section, key, value', [
    ('finetune', 'n_rounds', 2.5),
    ('finetune', 'bins', True),
    ('finetune', 'K', 5.0),
    ('pretrain', 'steps', '100'),
    ('eval', 'n_samples', 64.0),
    ('oracle', 'beta_sweep_rounds', False),
])
def test_integer_settings_reject_other_types(minimal, section, key, value):
    minimal[section] = {key: value}
    with pytest.raises(ConfigError) as error:
        ExperimentConfig.from_dict(minimal)
    assert error.value.key == key


def test_standalone_method_configs_reject_non_integer_rounds():
    with pytest.raises(ConfigError) as error:
        FinetuneConfig(trajectories=8.0)
    assert error.value.key == 'trajectories'
    with pytest.raises(ConfigError) as error:
        BaselineConfig(kind='draft', K=True)
    assert error.value.key == 'K'


def test_consistency_modes_in_the_experiment_config(minimal):
    minimal['finetune'] = {'consistency_mode': 'paper_c1'}
    config = ExperimentConfig.from_dict(minimal)
    assert config.finetune.options.consistency_mode == 'paper_c1'
    assert config.to_dict()['finetune']['consistency_mode'] == 'paper_c1'

    minimal['finetune'] = {'consistency_mode': 'displaced'}
    assert ExperimentConfig.from_dict(minimal).finetune.options.consistency_mode == 'paper_c1'


def test_options_for_every_method_share_the_section_settings():
    section = FinetuneSection.from_dict({'n_rounds': 7, 'K': 3})
    assert section.options_for('vgg_flow').n_rounds == 7
    draft = section.options_for('draft')
    assert (draft.kind, draft.K, draft.n_rounds) == ('draft', 3, 7)
    with pytest.raises(ConfigError) as error:
        section.options_for('unknown')
    assert error.value.key == 'method'
