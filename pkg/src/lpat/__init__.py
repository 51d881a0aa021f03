"""Adversarially trained LSTM classifier for hard-drive health degrees."""

from . import cache, data, evaluate, perturb, synthetic, training
from .model import (
    ALL_POINTS,
    DenseParams,
    ForwardCache,
    LstmParams,
    Network,
    PerturbationSet,
    ShapeError,
    backward,
    dense_forward,
    forward,
    init_network,
    lstm_step,
    softmax,
)
from .checkpoint import (
    CheckpointArchitectureError,
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    checkpoint_load,
    checkpoint_save,
)
from .data import (
    DatasetSplit,
    DriveTimeline,
    Sample,
    ScalingParams,
    SmartRecord,
)
from .evaluate import MetricsReport, evaluate as evaluate_samples
from .perturb import (
    PerturbationConfig,
    compute_perturbations,
    kl_divergence,
    supervised_perturbation,
    virtual_perturbation,
)
from .synthetic import SynthConfig, generate_synthetic
from .training import OptimizerState, TrainConfig, TrainReport, predict, train

__version__ = "0.1.0"
