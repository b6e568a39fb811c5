"""Console script for pyflowalign."""
import sys
import logging

import click

from pyflowalign.config import ExperimentConfig, parse_config, MAX_SEED
from pyflowalign.runner import Experiment
from pyflowalign.errors import ConfigError, ShapeError, CheckpointError, NumericalError

logger = logging.getLogger(__name__)


# CONSTANTS
# ---------

LOG_FORMAT = '%(asctime)s %(levelname)-7s %(name)s: %(message)s'

EXIT_VALIDATION_ERROR = 1

EXIT_NUMERICAL_ERROR = 2


def experiment_options(require_config: bool = True):
    """The options shared by all subcommands."""
    options = [
        click.option('--config', 'config_path', type=click.Path(dir_okay=False), required=require_config,
                     help='Path of the JSON experiment config.'),
        click.option('--out', 'output_dir', type=click.Path(file_okay=False), default=None,
                     help='Output directory, overrides the config.'),
        click.option('--seed', type=click.IntRange(0, MAX_SEED), default=None,
                     help='Seed, overrides the config.'),
        click.option('--deterministic', is_flag=True,
                     help='Single threaded execution for bitwise reproducible results.'),
    ]

    def decorator(func):
        for option in reversed(options):
            func = option(func)
        return func
    return decorator


def load_config(command: str, config_path, output_dir, seed) -> ExperimentConfig:
    """
    Without a config file (only allowed for the check suites) an experiment with all defaults is created.
    """
    if config_path is not None:
        return parse_config(config_path, seed=seed, output_dir=output_dir)

    return ExperimentConfig.from_dict({
        'experiment':   command,
        'seed':         0 if seed is None else seed,
        'output_dir':   output_dir,
    })


def execute(command: str, config_path, output_dir, seed, deterministic) -> int:
    try:
        config = load_config(command, config_path, output_dir, seed)
        experiment = Experiment(config, deterministic=deterministic)
        status = experiment.run(command)
    except (ConfigError, ShapeError, CheckpointError) as error:
        click.echo(f'error: {error}', err=True)
        return EXIT_VALIDATION_ERROR
    except NumericalError as error:
        click.echo(f'numerical failure: {error}', err=True)
        return EXIT_NUMERICAL_ERROR

    click.echo(f'{command} of "{config.name}" finished with status {status}, results in {config.output_dir}')
    return status


@click.group()
@click.option('--verbose', is_flag=True, help='Debug logging.')
def main(verbose: bool):
    """Reward alignment of flow matching models on toy problems."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


@main.command()
@experiment_options()
@click.pass_context
def pretrain(ctx, config_path, output_dir, seed, deterministic):
    """Pretrains the base flow on the toy data and writes checkpoints/base.json."""
    ctx.exit(execute('pretrain', config_path, output_dir, seed, deterministic))


@main.command()
@experiment_options()
@click.pass_context
def finetune(ctx, config_path, output_dir, seed, deterministic):
    """Finetunes the base flow towards the reward and writes metrics.csv and the finetuned checkpoint."""
    ctx.exit(execute('finetune', config_path, output_dir, seed, deterministic))


@main.command(name='eval')
@experiment_options()
@click.pass_context
def evaluate(ctx, config_path, output_dir, seed, deterministic):
    """Compares the finetuned with the base flow and writes report.json, samples.csv and pareto.csv."""
    ctx.exit(execute('eval', config_path, output_dir, seed, deterministic))


@main.command()
@experiment_options()
@click.pass_context
def compare(ctx, config_path, output_dir, seed, deterministic):
    """Compares the finetuning methods at a matched reward and writes comparison.csv and comparison.json."""
    ctx.exit(execute('compare', config_path, output_dir, seed, deterministic))


@main.command()
@experiment_options(require_config=False)
@click.pass_context
def oracle(ctx, config_path, output_dir, seed, deterministic):
    """Cross validates the linear quadratic oracles and writes oracle.json."""
    ctx.exit(execute('oracle', config_path, output_dir, seed, deterministic))


@main.command()
@experiment_options(require_config=False)
@click.pass_context
def selfcheck(ctx, config_path, output_dir, seed, deterministic):
    """Runs the invariant suite and writes selfcheck.json."""
    ctx.exit(execute('selfcheck', config_path, output_dir, seed, deterministic))


if __name__ == "__main__":
    sys.exit(main())  # pragma: no cover
