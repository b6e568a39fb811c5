"""Top-level package for pyflowalign."""

__author__ = """Jonas Teufel"""
__email__ = 'jonseb1998@gmail.com'
__version__ = '0.1.0'


from pyflowalign.numcore import Rng
from pyflowalign.flow import MlpField, ResidualField, pretrain_rectified_flow
from pyflowalign.align import FinetuneConfig, vgg_flow_train
from pyflowalign.baselines import BaselineConfig, baseline_train
from pyflowalign.runner import Experiment
