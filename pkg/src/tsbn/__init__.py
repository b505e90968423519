"""Class-incremental learning with task-specific BN banks and unknown-class heads."""

from .config import ExperimentConfig, config_from_dict, load_config
from .model import Backbone, IncrementalModel, parameter_report
from .trainer import run_incremental

__all__ = ["Backbone", "ExperimentConfig", "IncrementalModel", "config_from_dict", "load_config",
           "parameter_report", "run_incremental"]
__version__ = "0.1.0"
