"""Mixture of expert networks mixed by per-sample confidence, with gated, ensemble and single baselines."""

from .data import BatchIterator, Dataset, SynthSpec, generate_synthetic, load_dataset, save_dataset
from .mixture import (
    ExpertBank,
    GateNetwork,
    MixtureTrace,
    assign_subset_labels,
    ensemble_combine,
    expert_confidence,
    gated_combine,
    mix_logits,
    mixture_backward,
    mixture_forward,
    occupation_weights,
)
from .numerics import LayerSpec, Network, Parameter, cross_entropy, sgd_step, softmax
from .partition import DatasetPartition, extract_features, kmeans, lda_fit, lda_project, partition_dataset
from .trainer import RunReport, TrainSpec, evaluate, run

__version__ = "0.1.0"
