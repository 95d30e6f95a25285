"""Federated learning simulator with continual local training (FedCL), FedAvg and FedProx."""

from .comms import TransferLedger, extra_cost_ratio
from .data import (ClientShard, Dataset, PartitionPlan, ProxyDataset, class_histogram, dirichlet_partition,
                   gen_synthetic, load_idx, sample_proxy, write_idx)
from .errors import ConfigError, DomainError, FormatError, NumericError, ShapeError
from .fed import (FLConfig, ImportanceWeights, RoundRecord, RoundState, aggregate, estimate_importance,
                  evaluate_initial, evaluate_personalize, local_update, run_round, sample_clients,
                  weight_divergence)
from .harness import ExperimentConfig, emit_metrics, parse_config, read_metrics, rounds_to_target, run_experiment
from .nn import Batch, ModelSpec, ParamVector, accuracy, forward, init_params, loss_and_grad, sgd_step

__version__ = "0.1.0"
