"""
The ``Experiment`` executes the subcommands of an experiment config and writes their artifacts into the output
directory:

.. code:: text

    <output_dir>/
        resolved_config.json
        checkpoints/base.json, finetuned.json, snapshot_<round>.json, value_gradient.json
        pretrain_losses.csv
        metrics.csv
        report.json, samples.csv, pareto.csv
        comparison.csv, comparison.json
        oracle.json, selfcheck.json

Every run writes ``resolved_config.json``. Running the same subcommand again from that file reproduces the
run exactly.
"""
import os
import glob
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List

import numpy as np

from pyflowalign.numcore import Rng
from pyflowalign.nets import save_checkpoint, load_checkpoint
from pyflowalign.flow import MlpField, ResidualField, RectifiedFlowTrainer
from pyflowalign.align import METRIC_COLUMNS, FinetuneResult, vgg_flow_train
from pyflowalign.baselines import baseline_train
from pyflowalign.verify import MetricReport, evaluate_against_base
from pyflowalign.checks import (SuiteReport, SELFCHECK_SUITE, COMPARISON_COLUMNS, oracle_suite, run_suite,
                                method_comparison, comparison_check)
from pyflowalign.config import ExperimentConfig
from pyflowalign.util import write_csv, write_json, write_samples_csv, ensure_directory
from pyflowalign.errors import ConfigError

logger = logging.getLogger(__name__)


# CONSTANTS
# ---------

PARETO_COLUMNS = ['round', 'mean_reward', 'diversity', 'w2_to_base']

EXIT_SUCCESS = 0

EXIT_CHECK_FAILED = 2


class Experiment:
    """
    Runs the subcommands of one experiment. The randomness of every subcommand comes from its own substream of
    the experiment seed, so that the subcommands can be run separately and in any order.

    .. code:: python

        experiment = Experiment(parse_config('ring.json'), deterministic=True)
        experiment.run('pretrain')
        experiment.run('finetune')
        experiment.run('eval')

    :param deterministic: evaluates the snapshots one after another instead of in a thread pool
    """

    def __init__(self, config: ExperimentConfig, deterministic: bool = False):
        self.config = config
        self.deterministic = deterministic
        self.rng = Rng(config.seed)

        self.commands: Dict[str, Callable] = {
            'pretrain':     self.pretrain,
            'finetune':     self.finetune,
            'eval':         self.evaluate,
            'compare':      self.compare,
            'oracle':       self.oracle,
            'selfcheck':    self.selfcheck,
        }

    # PUBLIC METHODS
    # --------------

    def path(self, *parts: str) -> str:
        return os.path.join(self.config.output_dir, *parts)

    def run(self, command: str) -> int:
        """
        Executes the subcommand and returns the exit status, which is non-zero if a check suite failed.

        :raises ConfigError: for unknown subcommands and missing upstream artifacts
        """
        if command not in self.commands:
            raise ConfigError(f'unknown subcommand "{command}", has to be one of {sorted(self.commands.keys())}',
                              key='command')

        ensure_directory(self.path('checkpoints'))
        write_json(self.path('resolved_config.json'), self.config.to_dict())
        logger.info('running "%s" of experiment "%s" into %s', command, self.config.name, self.config.output_dir)

        result = self.commands[command]()
        if isinstance(result, SuiteReport) and not result.passed:
            return EXIT_CHECK_FAILED
        return EXIT_SUCCESS

    def pretrain(self) -> MlpField:
        config = self.config
        options = config.pretrain
        spec = options.network_spec(config.dim)
        trainer = RectifiedFlowTrainer(config.data, spec, options.steps, options.batch, options.lr,
                                       self.rng.child('pretrain'),
                                       weight_decay=options.weight_decay,
                                       max_grad_norm=options.max_grad_norm,
                                       log_every=options.log_every)
        field = trainer.run()

        save_checkpoint(self.base_checkpoint_path, spec, field.params,
                        meta={'experiment': config.name, 'seed': config.seed, 'steps': options.steps})
        write_csv(self.path('pretrain_losses.csv'),
                  [{'step': step, 'loss': loss} for step, loss in enumerate(trainer.losses)],
                  ['step', 'loss'])
        return field

    def finetune(self) -> FinetuneResult:
        config = self.config
        section = config.finetune
        base = self.load_base()
        rng = self.rng.child('finetune')

        if section.method == 'vgg_flow':
            result = vgg_flow_train(section.options, base, config.reward, rng)
        else:
            result = baseline_train(section.options, base, config.reward, rng)

        write_csv(self.path('metrics.csv'), result.records, METRIC_COLUMNS)

        # The snapshots of an earlier run in the same directory would end up in pareto.csv
        stale = glob.glob(self.path('checkpoints', 'snapshot_*.json'))
        for path in stale:
            os.remove(path)
        if stale:
            logger.info('removed %d snapshots of a previous finetuning run', len(stale))

        residual = result.field.residual
        meta = {'method': section.method, 'base_checkpoint': self.base_checkpoint_path}
        for round_index, theta in result.snapshots:
            save_checkpoint(self.path('checkpoints', f'snapshot_{round_index:06d}.json'), residual.spec, theta,
                            meta={**meta, 'round': round_index})
        save_checkpoint(self.finetuned_checkpoint_path, residual.spec, residual.params,
                        meta={**meta, 'round': len(result.records)})
        if result.value_field is not None:
            correction = result.value_field.correction
            save_checkpoint(self.path('checkpoints', 'value_gradient.json'), correction.spec, correction.params,
                            meta={**meta, 'eta': result.value_field.eta})
        if result.warnings:
            write_json(self.path('warnings.json'), {'warnings': result.warnings})

        records = result.records
        if records:
            logger.info('finetuning finished, mean reward %.5f -> %.5f', records[0]['mean_reward'],
                        records[-1]['mean_reward'])
        return result

    def evaluate(self) -> MetricReport:
        config = self.config
        options = config.eval
        base = self.load_base()
        finetuned = self.load_finetuned(base, self.finetuned_checkpoint_path)

        report, finetuned_samples, base_samples = evaluate_against_base(
            finetuned, base, config.reward, options.n_samples, options.n_steps, self.rng.child('eval'),
            kl_samples=options.kl_samples if options.kl else None,
            kl_steps=options.kl_steps,
            bound_samples=options.bound_samples if options.w2_bound else None,
        )
        report.save(self.path('report.json'))

        samples = np.concatenate([base_samples, finetuned_samples], axis=0)
        models = ['base'] * len(base_samples) + ['finetuned'] * len(finetuned_samples)
        write_samples_csv(self.path('samples.csv'), samples, models)

        if options.snapshots:
            write_csv(self.path('pareto.csv'), self.evaluate_snapshots(base), PARETO_COLUMNS)

        logger.info('%s', report)
        return report

    def evaluate_snapshots(self, base: MlpField) -> List[dict]:
        """
        Evaluates every periodic finetuning snapshot against the base. All snapshots are sampled from the same
        noise. Without the deterministic flag the snapshots are evaluated in a thread pool.
        """
        paths = sorted(glob.glob(self.path('checkpoints', 'snapshot_*.json')))
        workers = 1 if self.deterministic else self.config.eval.workers

        with ThreadPoolExecutor(max_workers=workers) as executor:
            rows = list(executor.map(lambda path: self._evaluate_snapshot(base, path), paths))

        return sorted(rows, key=lambda row: row['round'])

    def compare(self) -> SuiteReport:
        """
        Finetunes the pretrained base with the value gradient method, ReFL and DRaFT for ``compare_seeds`` seeds
        and compares their distance to the base at a matched reward. Writes the evaluated snapshots of all runs
        into comparison.csv and the per seed summaries into comparison.json.
        """
        options = self.config.eval
        comparison = method_comparison(self.config.finetune, self.load_base(), self.config.reward,
                                       self.rng.child('compare'), seeds=options.compare_seeds,
                                       n_samples=options.n_samples, n_steps=options.n_steps)
        write_csv(self.path('comparison.csv'), comparison['rows'], COMPARISON_COLUMNS)

        report = SuiteReport('compare', [comparison_check(comparison)])
        write_json(self.path('comparison.json'), report.to_dict())
        logger.info('%s', report)
        return report

    def oracle(self) -> SuiteReport:
        options = self.config.oracle
        report = run_suite('oracle', oracle_suite(options), self.rng.child('oracle'), options)
        write_json(self.path('oracle.json'), report.to_dict())
        return report

    def selfcheck(self) -> SuiteReport:
        report = run_suite('selfcheck', SELFCHECK_SUITE, self.rng.child('selfcheck'))
        write_json(self.path('selfcheck.json'), report.to_dict())
        return report

    # ARTIFACTS
    # ---------

    @property
    def base_checkpoint_path(self) -> str:
        return self.config.finetune.base_checkpoint or self.path('checkpoints', 'base.json')

    @property
    def finetuned_checkpoint_path(self) -> str:
        return self.config.eval.checkpoint or self.path('checkpoints', 'finetuned.json')

    def load_base(self) -> MlpField:
        """
        :raises ConfigError: if the base checkpoint does not exist
        """
        path = self.base_checkpoint_path
        if not os.path.exists(path):
            raise ConfigError(f'the base checkpoint "{path}" does not exist, run "pretrain" first',
                              key='base_checkpoint')

        checkpoint = load_checkpoint(path)
        return MlpField(checkpoint.spec, checkpoint.params)

    def load_finetuned(self, base: MlpField, path: str) -> ResidualField:
        """
        :raises ConfigError: if the finetuned checkpoint does not exist
        """
        if not os.path.exists(path):
            raise ConfigError(f'the finetuned checkpoint "{path}" does not exist, run "finetune" first',
                              key='checkpoint')

        checkpoint = load_checkpoint(path)
        return ResidualField(base, MlpField(checkpoint.spec, checkpoint.params))

    # PROTECTED METHODS
    # -----------------

    def _evaluate_snapshot(self, base: MlpField, path: str) -> dict:
        options = self.config.eval
        checkpoint = load_checkpoint(path)
        field = ResidualField(base, MlpField(checkpoint.spec, checkpoint.params))
        report, _, _ = evaluate_against_base(field, base, self.config.reward, options.n_samples,
                                             options.n_steps, self.rng.child('pareto'))
        return {
            'round':        checkpoint.meta.get('round', 0),
            'mean_reward':  report.mean_reward,
            'diversity':    report.diversity,
            'w2_to_base':   report.w2_to_base,
        }

    def __str__(self):
        return 'Experiment({}, output_dir={})'.format(self.config.name, self.config.output_dir)
