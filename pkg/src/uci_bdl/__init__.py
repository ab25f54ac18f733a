"""MC-dropout baselines on the UCI regression benchmark."""

from .datasets import Dataset, Split, Standardizer, load_dataset
from .hypersearch import HyperPair
from .runner import ExperimentResult, ProtocolConfig, run_experiment

__version__ = "0.1.0"

__all__ = ["Dataset", "Split", "Standardizer", "load_dataset", "HyperPair", "ExperimentResult",
           "ProtocolConfig", "run_experiment"]
