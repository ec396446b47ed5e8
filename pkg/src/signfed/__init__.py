"""Differentially private sign-compressed federated learning simulator."""

from .adversary import AdversaryConfig, negative_adversary, random_adversary
from .data import Dataset, PartitionSpec, load_mnist_idx, partition_by_labels, synthetic_dataset
from .federation import (
    ALGORITHMS,
    Party,
    RoundMetrics,
    ServerState,
    ef_aggregate,
    fedavg_aggregate,
    majority_vote_aggregate,
    run_round,
)
from .model import (
    Batch,
    MlpModel,
    apply_update,
    evaluate,
    flatten_params,
    forward,
    init_mlp,
    local_gradient,
    model_from_flat,
    per_example_gradients,
)
from .privacy import (
    CalibrationError,
    PrivacyParams,
    agm_condition,
    calibrate_sigma,
    clip_per_example,
    dpsign,
    normal_cdf,
)

__version__ = "0.1.0"
