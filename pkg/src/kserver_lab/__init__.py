"""Fractional and randomized k-server on hierarchically separated trees."""

from .metric import FiniteMetric, build_metric, load_metric, random_metric, uniform_metric
from .hst import Hst, contract_to_weighted, load_tree, sample_frt_embedding
from .allocation import AllocationInstance, run_allocation
from .composer import init_ensembles, run_composer, step
from .rounding import init_distribution, round_step
from .harness import PipelineConfig, run_pipeline

__version__ = "0.1.0"
