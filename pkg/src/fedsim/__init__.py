"""Deterministic federated-learning simulation engine.

A small numpy kernel with hand-derived gradients, desk-scale model families
with swappable normalization and token mixers, non-IID partitioners with
KS diagnostics, four federated aggregators (plus FedBN), and an experiment
harness with CSV/JSON/figure outputs.
"""

from .analysis import (
    DivergenceReport,
    evaluate_accuracy,
    rounds_to_target,
    weight_divergence,
)
from .config import ExperimentConfig, load_config
from .data import gen_synthetic_dataset, load_idx_dataset, save_idx_dataset
from .errors import (
    ConfigError,
    DataFormatError,
    FedsimError,
    ProtocolError,
    ShapeError,
)
from .fedcore import (
    AggregatorConfig,
    LocalReport,
    RoundState,
    aggregate_fedavg,
    aggregate_fedavgm,
    aggregate_scaffold,
    local_train,
    sample_clients,
)
from .models import Model, ModelSpec, build_model
from .params import ParamSet, Role, load_paramset, param_partition, save_paramset
from .partition import (
    ClientShard,
    Dataset,
    FeatureTransform,
    heterogeneity_report,
    ks_statistic,
    split_feature_skew,
    split_iid,
    split_label_skew,
    split_quantity_skew,
)
from .runner import FederatedRunner, centralized_checkpoints, train_centralized
from .schedule import TrainSchedule, lr_at_step

__version__ = "0.1.0"
