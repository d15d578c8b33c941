"""Desk-scale federated averaging: protocol engine, trainer, and experiment harness."""

__version__ = "0.1.0"

from .params import ParameterSet, ShapeMismatchError, add_scaled, l2_distance, zeros_like
from .data import (
    ClientDataset,
    ClientSpec,
    DataError,
    LabeledExample,
    PartitionSpec,
    combine,
    generate_synthetic,
    load_csv,
    save_csv,
    split,
)
from .nn import (
    EpochCheckpoint,
    ModelSpec,
    OptimizerState,
    TrainConfig,
    adam_step,
    bce_loss,
    forward,
    gradient,
    init_params,
    train_local,
)
from .fed import (
    ClientRole,
    FederationConfig,
    ModelUpdate,
    ProtocolError,
    ServerState,
    client_local_round,
    federated_average,
    server_handle,
)
from .metrics import (
    MetricsReport,
    ScoredSet,
    UndefinedMetricError,
    cross_eval_matrix,
    evaluate,
    pr_auc,
    roc_auc,
)
from .transport import Message, TransportError, decode, encode, transport_pair
from .runner import client_loop, run_federation, server_loop
from .experiment import (
    ConfigError,
    ExperimentConfig,
    load_config,
    load_model,
    run_experiment,
    save_model,
)

__all__ = [
    "__version__",
    "ParameterSet",
    "ShapeMismatchError",
    "add_scaled",
    "l2_distance",
    "zeros_like",
    "ClientDataset",
    "ClientSpec",
    "DataError",
    "LabeledExample",
    "PartitionSpec",
    "combine",
    "generate_synthetic",
    "load_csv",
    "save_csv",
    "split",
    "EpochCheckpoint",
    "ModelSpec",
    "OptimizerState",
    "TrainConfig",
    "adam_step",
    "bce_loss",
    "forward",
    "gradient",
    "init_params",
    "train_local",
    "ClientRole",
    "FederationConfig",
    "ModelUpdate",
    "ProtocolError",
    "ServerState",
    "client_local_round",
    "federated_average",
    "server_handle",
    "MetricsReport",
    "ScoredSet",
    "UndefinedMetricError",
    "cross_eval_matrix",
    "evaluate",
    "pr_auc",
    "roc_auc",
    "Message",
    "TransportError",
    "decode",
    "encode",
    "transport_pair",
    "client_loop",
    "run_federation",
    "server_loop",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "load_model",
    "run_experiment",
    "save_model",
]
