"""Mixture-of-experts graph models for generalization under distribution shift."""

from .config import ExperimentConfig, load_config
from .estimator import ERMClassifier, GraphMETROClassifier
from .evaluation import discover_shifts, evaluate_environments, invariance_matrix, summarize_trials
from .graph import DatasetSplit, Graph, pool, split_dataset, validate_graph
from .model import MoEConfig, MoEModel, SingleEncoderModel, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, train
from .transforms import CompositeTransform, TransformKind, TransformSet, TransformSpec, apply

__version__ = "0.1.0"
