"""Federated unlearning simulator: adaptive checkpointing, layer-adaptive DP removal, fingerprint verification."""

from .checkpoint import Checkpoint, CheckpointStore, load, maybe_checkpoint, save, update_variance
from .data import Dataset, PartitionSpec, load_csv, make_blobs, partition_dirichlet
from .engine import RoundLog, RunConfig, aggregate, run_training, sample_clients
from .fingerprint import Fingerprint, Verdict, calibrate_threshold, embed, fingerprint_generate, influence, verify
from .metrics import SweepRow, accuracy, noise_sweep, timing_report
from .model import Batch, ClientUpdate, ModelParams, backward, forward, init_params, local_train
from .unlearn import (
    SensitivityProfile,
    UnlearnReport,
    calibrate_update,
    layer_sensitivity,
    retrain_oracle,
    uniform_dp_baseline,
    unlearn,
)

__version__ = "0.1.0"
