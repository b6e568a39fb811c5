"""
The experiment configuration.

An experiment is described by a JSON file. Only "experiment" and "seed" are required, every other section is
filled from the defaults below. The dicts of this module are meant to be copied and modified:

.. code:: python

    import copy
    from pyflowalign.config import DEFAULT

    config = copy.deepcopy(DEFAULT)
    config.update({'experiment': 'ring', 'seed': 0})
    config['finetune']['method'] = 'draft'
"""
import os
import json
import logging
from typing import Any, Dict, Optional

from pyflowalign.mixins import DictTransformationMixin
from pyflowalign.nets import MlpSpec
from pyflowalign.data import ToyDistribution, distribution_from_dict
from pyflowalign.rewards import Reward, reward_from_dict
from pyflowalign.align import FinetuneConfig
from pyflowalign.baselines import BaselineConfig
from pyflowalign.verify import LQProblem
from pyflowalign.util import require_integers
from pyflowalign.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


# CONSTANTS
# ---------

METHODS = ['vgg_flow'] + BaselineConfig.KINDS

REQUIRED_KEYS = ['experiment', 'seed']

MAX_SEED = 2 ** 64 - 1


# DEFAULT CONFIG DICTS
# --------------------

DEFAULT_DATA = {
    'kind':                     'gaussian_mixture',
    'means':                    [[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]],
    'variance':                 0.05,
    'weights':                  None,
}

DEFAULT_REWARD = {
    'kind':                     'ring',
    'radius':                   2.0,
    'width':                    0.5,
}

DEFAULT_PRETRAIN = {
    # The input dimension of the network is the dimension of the data
    'network':                  {'time_embed_dim': 8, 'hidden': [64, 64], 'activation': 'silu'},
    'steps':                    2000,
    'batch':                    256,
    'lr':                       1e-3,
    'weight_decay':             0.0,
    'max_grad_norm':            None,
    'log_every':                100,
}

DEFAULT_FINETUNE = {
    'method':                   'vgg_flow',
    # Defaults to checkpoints/base.json within the output directory
    'base_checkpoint':          None,
    # THE SETTINGS OF THE VALUE GRADIENT METHOD
    **FinetuneConfig._DEFAULT_CONFIG,
    # THE SETTINGS OF THE BASELINES, the shared keys have the same defaults
    **{key: value for key, value in BaselineConfig._DEFAULT_CONFIG.items() if key != 'kind'},
}

DEFAULT_EVAL = {
    'n_samples':                256,
    'n_steps':                  20,
    'kl':                       False,
    'kl_samples':               512,
    'kl_steps':                 32,
    'w2_bound':                 True,
    'bound_samples':            256,
    # Evaluate the periodic finetuning snapshots into pareto.csv
    'snapshots':                True,
    'workers':                  4,
    # Defaults to checkpoints/finetuned.json within the output directory
    'checkpoint':               None,
    # The "compare" subcommand finetunes every method of COMPARISON_METHODS for this many seeds
    'compare_seeds':            3,
}

DEFAULT_ORACLE = {
    # THE BUNDLED LINEAR QUADRATIC INSTANCE
    'A':                        [[0.0, -0.1], [0.1, 0.0]],
    'H':                        [[1.0, 0.0], [0.0, 1.0]],
    'h':                        [2.0, 1.0],
    'lam':                      1.0,
    # SOLVER SETTINGS
    'n_grid':                   2000,
    'n_steps':                  100,
    'brute_force_iters':        500,
    'random_instances':         5,
    'consistency_eps':          1e-3,
    'consistency_samples':      64,
    # The finetuning checks only run for a positive number of rounds
    'lq_rounds':                2000,
    'beta_sweep_rounds':        300,
    'beta_sweep':               [1.0, 2.0, 10.0],
}

DEFAULT = {
    'experiment':               None,
    'seed':                     None,
    'data':                     DEFAULT_DATA,
    'reward':                   DEFAULT_REWARD,
    'pretrain':                 DEFAULT_PRETRAIN,
    'finetune':                 DEFAULT_FINETUNE,
    'eval':                     DEFAULT_EVAL,
    'oracle':                   DEFAULT_ORACLE,
    # Defaults to runs/<experiment>
    'output_dir':               None,
}


# SECTIONS
# ########


class SectionConfig:
    """
    Base class for the flat sections of the experiment config. The keys of a section are the keys of its
    ``_DEFAULT_CONFIG``, missing keys are filled from there and unknown keys are rejected.
    """

    NAME = None

    INTEGER_KEYS = []

    _DEFAULT_CONFIG = {}

    def __init__(self, **kwargs):
        values = dict(self._DEFAULT_CONFIG)
        values.update(kwargs)
        for key in self._DEFAULT_CONFIG.keys():
            setattr(self, key, values[key])

        require_integers(self, self.INTEGER_KEYS)
        try:
            self._validate()
        except TypeError as error:
            raise ConfigError(f'invalid value types in the "{self.NAME}" section: {error}', key=self.NAME)

    def to_dict(self) -> Dict[str, Any]:
        return {key: getattr(self, key) for key in self._DEFAULT_CONFIG.keys()}

    @classmethod
    def from_dict(cls, data: dict):
        unknown = set(data.keys()) - set(cls._DEFAULT_CONFIG.keys())
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f'unknown key "{key}" in the "{cls.NAME}" section', key=key)
        return cls(**data)

    def _validate(self):
        pass

    def __str__(self):
        return '{}({})'.format(self.__class__.__name__, self.to_dict())


class PretrainConfig(SectionConfig):

    NAME = 'pretrain'

    INTEGER_KEYS = ['steps', 'batch', 'log_every']

    _DEFAULT_CONFIG = DEFAULT_PRETRAIN

    def network_spec(self, dim: int) -> MlpSpec:
        return MlpSpec.from_dict({'input_dim': dim, **self.network})

    def _validate(self):
        if not isinstance(self.network, dict):
            raise ConfigError('the network has to be given as a dict', key='network')
        # Builds the spec once to reject invalid network settings early
        self.network_spec(1)
        if self.steps < 0:
            raise ConfigError('the number of steps can not be negative', key='steps')
        if self.batch < 1:
            raise ConfigError('the batch size has to be positive', key='batch')
        if self.lr <= 0:
            raise ConfigError('the learning rate has to be positive', key='lr')


class FinetuneSection(SectionConfig):
    """
    The finetune section holds the method, the base checkpoint and the union of the settings of all methods.
    ``options`` is the ``FinetuneConfig`` or ``BaselineConfig`` built from the keys which the selected method
    uses.
    """

    NAME = 'finetune'

    # Checked for all methods, not only for the keys which the selected method reads
    INTEGER_KEYS = ['n_rounds', 'trajectories', 'bins', 'K', 'divergence_patience', 'eval_every', 'log_every']

    _DEFAULT_CONFIG = DEFAULT_FINETUNE

    def options_for(self, method: str):
        """
        Builds the ``FinetuneConfig`` or ``BaselineConfig`` of the given method from the keys of this section.

        :raises ConfigError: for unknown methods and for settings which are invalid for the method
        """
        if method not in METHODS:
            raise ConfigError(f'unknown finetuning method "{method}", has to be one of {METHODS}', key='method')

        values = {key: getattr(self, key) for key in self._DEFAULT_CONFIG.keys()}
        if method == 'vgg_flow':
            return FinetuneConfig(**{key: values[key] for key in FinetuneConfig._ARGS})

        kwargs = {key: values[key] for key in BaselineConfig._ARGS if key != 'kind'}
        return BaselineConfig(kind=method, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        data = super(FinetuneSection, self).to_dict()
        data.update(self.options.to_dict())
        data.pop('kind', None)
        return data

    def _validate(self):
        self.options = self.options_for(self.method)


class EvalConfig(SectionConfig):

    NAME = 'eval'

    INTEGER_KEYS = ['n_samples', 'n_steps', 'kl_samples', 'kl_steps', 'bound_samples', 'workers', 'compare_seeds']

    _DEFAULT_CONFIG = DEFAULT_EVAL

    def _validate(self):
        if self.n_samples < 2:
            raise ConfigError('the evaluation needs at least two samples', key='n_samples')
        if self.n_steps < 1:
            raise ConfigError('the number of sampler steps has to be positive', key='n_steps')
        if self.workers < 1:
            raise ConfigError('the number of workers has to be positive', key='workers')
        if self.compare_seeds < 1:
            raise ConfigError('the comparison needs at least one seed', key='compare_seeds')


class OracleConfig(SectionConfig):

    NAME = 'oracle'

    INTEGER_KEYS = ['n_grid', 'n_steps', 'brute_force_iters', 'random_instances', 'consistency_samples',
                    'lq_rounds', 'beta_sweep_rounds']

    _DEFAULT_CONFIG = DEFAULT_ORACLE

    def problem(self) -> LQProblem:
        return LQProblem(self.A, self.H, self.h, self.lam)

    def _validate(self):
        # Building the problem validates the matrices
        self.problem()
        if self.n_grid < 16:
            raise ConfigError('the Riccati grid needs at least 16 points', key='n_grid')
        if self.n_steps < 1 or self.brute_force_iters < 1:
            raise ConfigError('n_steps and brute_force_iters have to be positive', key='n_steps')
        if not 0 < self.consistency_eps < 1:
            raise ConfigError('the finite difference step has to be in (0, 1)', key='consistency_eps')
        if self.lq_rounds < 0 or self.beta_sweep_rounds < 0:
            raise ConfigError('the round budgets can not be negative', key='lq_rounds')
        if any(beta <= 0 for beta in self.beta_sweep):
            raise ConfigError('the swept temperatures have to be positive', key='beta_sweep')


# EXPERIMENT
# ##########


class ExperimentConfig(DictTransformationMixin):
    """
    The validated configuration of an experiment. It is created from the raw dict as it is loaded from the
    JSON file, and ``to_dict`` returns the resolved config with all defaults filled in. Running an experiment
    from its resolved config reproduces it.

    :raises ConfigError: for missing required keys, unknown keys, wrong types and invalid values. The error
        names the key.
    """

    dict_transformation = {
        ('experiment', 'name'):             {str: 'process_name'},
        # bool is a subclass of int and has to be checked first
        ('seed', 'seed'):                   {bool: 'raise_type_error', int: 'process_seed'},
        ('data', 'data'):                   {dict: 'process_data'},
        ('reward', 'reward'):               {dict: 'process_reward'},
        ('pretrain', 'pretrain'):           {dict: 'process_pretrain'},
        ('finetune', 'finetune'):           {dict: 'process_finetune'},
        ('eval', 'eval'):                   {dict: 'process_eval'},
        ('oracle', 'oracle'):               {dict: 'process_oracle'},
        ('output_dir', 'output_dir'):       {str: 'process_path', type(None): 'process_none'},
    }

    def __init__(self, data: dict):
        unknown = set(data.keys()) - set(DEFAULT.keys())
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f'unknown key "{key}" in the experiment config', key=key)

        present = {key: value for key, value in data.items() if value is not None}
        self._check_keys(present, REQUIRED_KEYS)

        content = dict(DEFAULT)
        content.update(data)
        result = self.process(content)

        self.name: str = result['name']
        self.seed: int = result['seed']
        self.data: ToyDistribution = result['data']
        self.reward: Reward = result['reward']
        self.pretrain: PretrainConfig = result['pretrain']
        self.finetune: FinetuneSection = result['finetune']
        self.eval: EvalConfig = result['eval']
        self.oracle: OracleConfig = result['oracle']
        self.output_dir: str = result['output_dir'] or os.path.join('runs', self.name)

        if self.reward.dim is not None and self.reward.dim != self.data.dim:
            raise ShapeError(f'the reward of dimension {self.reward.dim} does not fit data of dimension '
                             f'{self.data.dim}')

    # PUBLIC METHODS
    # --------------

    @property
    def dim(self) -> int:
        return self.data.dim

    def to_dict(self) -> Dict[str, Any]:
        return {
            'experiment':       self.name,
            'seed':             self.seed,
            'data':             self.data.to_dict(),
            'reward':           self.reward.to_dict(),
            'pretrain':         self.pretrain.to_dict(),
            'finetune':         self.finetune.to_dict(),
            'eval':             self.eval.to_dict(),
            'oracle':           self.oracle.to_dict(),
            'output_dir':       self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ExperimentConfig':
        return cls(data)

    # DICT TRANSFORMATIONS
    # --------------------

    def process_name(self, key: str, value: str) -> str:
        if not value:
            raise ConfigError(f'"{key}" can not be empty', key=key)
        return value

    def process_path(self, key: str, value: str) -> str:
        return value

    def process_none(self, key: str, value: None) -> None:
        return None

    def process_seed(self, key: str, value: int) -> int:
        if not 0 <= value <= MAX_SEED:
            raise ConfigError(f'the seed has to be an unsigned 64 bit integer, got {value}', key=key)
        return value

    def process_data(self, key: str, value: dict) -> ToyDistribution:
        return distribution_from_dict(value)

    def process_reward(self, key: str, value: dict) -> Reward:
        return reward_from_dict(value)

    def process_pretrain(self, key: str, value: dict) -> PretrainConfig:
        return PretrainConfig.from_dict(value)

    def process_finetune(self, key: str, value: dict) -> FinetuneSection:
        return FinetuneSection.from_dict(value)

    def process_eval(self, key: str, value: dict) -> EvalConfig:
        return EvalConfig.from_dict(value)

    def process_oracle(self, key: str, value: dict) -> OracleConfig:
        return OracleConfig.from_dict(value)

    def raise_type_error(self, key: str, value: Any):
        self._type_error(key, value, [int])

    def __str__(self):
        return 'ExperimentConfig(experiment={}, seed={}, method={})'.format(
            self.name,
            self.seed,
            self.finetune.method
        )


def parse_config(path: str, seed: Optional[int] = None, output_dir: Optional[str] = None) -> ExperimentConfig:
    """
    Loads and validates the experiment config from a JSON file. The seed and the output directory can be
    overridden.

    :raises ConfigError: if the file does not exist, is not valid JSON or does not describe a valid experiment
    """
    if not os.path.exists(path):
        raise ConfigError(f'the config file "{path}" does not exist', key='config')

    with open(path, mode='r') as file:
        try:
            data = json.load(file)
        except json.JSONDecodeError as error:
            raise ConfigError(f'the config file "{path}" is not valid JSON: {error}', key='config')

    if not isinstance(data, dict):
        raise ConfigError('the config file has to contain a JSON object', key='config')

    if seed is not None:
        data['seed'] = seed
    if output_dir is not None:
        data['output_dir'] = output_dir

    config = ExperimentConfig.from_dict(data)
    logger.debug('parsed %s from %s', config, path)
    return config
