#!/usr/bin/env python

"""Tests for the command line interface."""
import os
import csv
import json

import pytest
from click.testing import CliRunner

from pyflowalign import cli


@pytest.fixture
def config_path(tmp_path):
    config = {
        'experiment':   'tiny',
        'seed':         5,
        'pretrain':     {'network': {'time_embed_dim': 4, 'hidden': [16]}, 'steps': 20, 'batch': 32,
                         'log_every': 0},
        'finetune':     {'n_rounds': 3, 'trajectories': 8, 'residual_hidden': [8], 'value_hidden': [8],
                         'sampler': {'n_steps': 10, 'integrator': 'euler'}, 'eval_every': 2, 'log_every': 0,
                         'refl_range': [5, 10]},
        'eval':         {'n_samples': 32, 'n_steps': 10, 'bound_samples': 16, 'workers': 2, 'compare_seeds': 1},
    }
    path = os.path.join(str(tmp_path), 'tiny.json')
    with open(path, mode='w') as file:
        json.dump(config, file)
    return path


def _invoke(*args):
    return CliRunner().invoke(cli.main, list(args))


def _read(path) -> str:
    with open(path) as file:
        return file.read()


def _read_csv(path) -> list:
    with open(path, mode='r') as file:
        return [dict(row) for row in csv.DictReader(file)]


def test_command_line_interface():
    result = _invoke('--help')
    assert result.exit_code == 0
    for command in ['pretrain', 'finetune', 'eval', 'compare', 'oracle', 'selfcheck']:
        assert command in result.output


def test_missing_config_is_a_validation_error(tmp_path):
    result = _invoke('pretrain', '--config', os.path.join(str(tmp_path), 'missing.json'))
    assert result.exit_code == 1
    assert 'does not exist' in result.output


def test_finetune_without_a_base_checkpoint(tmp_path, config_path):
    out = os.path.join(str(tmp_path), 'run')
    result = _invoke('finetune', '--config', config_path, '--out', out)
    assert result.exit_code == 1
    assert 'pretrain' in result.output


def test_pretrain_writes_the_base_checkpoint(tmp_path, config_path):
    out = os.path.join(str(tmp_path), 'run')
    result = _invoke('pretrain', '--config', config_path, '--out', out, '--seed', '9')
    assert result.exit_code == 0
    assert os.path.exists(os.path.join(out, 'checkpoints', 'base.json'))
    assert len(_read_csv(os.path.join(out, 'pretrain_losses.csv'))) == 20

    with open(os.path.join(out, 'resolved_config.json')) as file:
        resolved = json.load(file)
    assert resolved['seed'] == 9
    assert resolved['finetune']['bins'] == 5


def test_deterministic_runs_are_identical(tmp_path, config_path):
    metrics = []
    for name in ['first', 'second']:
        out = os.path.join(str(tmp_path), name)
        assert _invoke('pretrain', '--config', config_path, '--out', out, '--deterministic').exit_code == 0
        assert _invoke('finetune', '--config', config_path, '--out', out, '--deterministic').exit_code == 0
        metrics.append(_read(os.path.join(out, 'metrics.csv')))

    assert metrics[0] == metrics[1]
    rows = _read_csv(os.path.join(str(tmp_path), 'first', 'metrics.csv'))
    assert [row['round'] for row in rows] == ['0', '1', '2']


def test_eval_writes_the_report(tmp_path, config_path):
    out = os.path.join(str(tmp_path), 'run')
    for command in ['pretrain', 'finetune', 'eval']:
        result = _invoke(command, '--config', config_path, '--out', out)
        assert result.exit_code == 0, result.output

    with open(os.path.join(out, 'report.json')) as file:
        report = json.load(file)
    assert report['w2_approximate'] is False
    assert report['kl_to_base'] is None

    samples = _read_csv(os.path.join(out, 'samples.csv'))
    assert len(samples) == 64
    assert set(samples[0].keys()) == {'x0', 'x1', 'model'}

    pareto = _read_csv(os.path.join(out, 'pareto.csv'))
    assert [row['round'] for row in pareto] == ['0', '2', '3']


@pytest.mark.slow
def test_selfcheck_without_a_config(tmp_path):
    out = os.path.join(str(tmp_path), 'selfcheck')
    result = _invoke('selfcheck', '--out', out)
    assert result.exit_code == 0, result.output
    with open(os.path.join(out, 'selfcheck.json')) as file:
        assert json.load(file)['passed'] is True


def test_a_shorter_finetuning_run_replaces_the_snapshots(tmp_path, config_path):
    out = os.path.join(str(tmp_path), 'run')
    for command in ['pretrain', 'finetune']:
        assert _invoke(command, '--config', config_path, '--out', out).exit_code == 0

    with open(config_path) as file:
        config = json.load(file)
    config['finetune']['n_rounds'] = 1
    shorter_path = os.path.join(str(tmp_path), 'shorter.json')
    with open(shorter_path, mode='w') as file:
        json.dump(config, file)

    for command in ['finetune', 'eval']:
        result = _invoke(command, '--config', shorter_path, '--out', out)
        assert result.exit_code == 0, result.output

    assert sorted(os.listdir(os.path.join(out, 'checkpoints'))) == [
        'base.json', 'finetuned.json', 'snapshot_000000.json', 'snapshot_000001.json', 'value_gradient.json'
    ]
    pareto = _read_csv(os.path.join(out, 'pareto.csv'))
    assert [row['round'] for row in pareto] == ['0', '1']


def test_compare_writes_the_snapshots_of_every_method(tmp_path, config_path):
    out = os.path.join(str(tmp_path), 'run')
    assert _invoke('pretrain', '--config', config_path, '--out', out).exit_code == 0
    result = _invoke('compare', '--config', config_path, '--out', out)
    assert result.exit_code in (0, 2), result.output

    rows = _read_csv(os.path.join(out, 'comparison.csv'))
    assert [(row['method'], row['round']) for row in rows] == [
        (method, round_index) for method in ['vgg_flow', 'refl', 'draft'] for round_index in ['0', '2', '3']
    ]
    assert {row['seed'] for row in rows} == {'0'}

    with open(os.path.join(out, 'comparison.json')) as file:
        report = json.load(file)
    check = report['checks'][0]
    assert check['name'] == 'matched_reward_comparison'
    assert check['value'][0]['reward_level'] == pytest.approx(float(rows[5]['mean_reward']))


def test_compare_rejects_baseline_settings_which_do_not_fit_the_sampler(tmp_path, config_path):
    with open(config_path) as file:
        config = json.load(file)
    config['finetune']['refl_range'] = [15, 20]
    path = os.path.join(str(tmp_path), 'invalid.json')
    with open(path, mode='w') as file:
        json.dump(config, file)

    out = os.path.join(str(tmp_path), 'run')
    assert _invoke('pretrain', '--config', path, '--out', out).exit_code == 0
    result = _invoke('compare', '--config', path, '--out', out)
    assert result.exit_code == 1
    assert 'truncation range' in result.output
