"""LSTM sequence classifiers with output-conditioned gating, built on numpy.

The package holds a small reverse-mode autodiff engine, the recurrent cells,
synthetic tasks, a training loop, diagnostics and the ``echolstm`` CLI.
"""

from .cells import ModelConfig, SequenceClassifier
from .config import MODELS, ExperimentConfig
from .tasks import DistractorSpec, ListOpsSpec, gen_distractor, gen_listops
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "MODELS",
    "ExperimentConfig",
    "ModelConfig",
    "SequenceClassifier",
    "DistractorSpec",
    "ListOpsSpec",
    "gen_distractor",
    "gen_listops",
    "TrainConfig",
    "train",
]
