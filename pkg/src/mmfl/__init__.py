"""Multi-modal federated learning on synthetic data, in plain numpy."""

from .autograd import Tensor, gradients, no_grad
from .data import DatasetSpec, ModalitySpec, generate_dataset, label_divergence, partition, read_dataset, write_dataset
from .federation import (
    FederationConfig,
    aggregate,
    broadcast,
    init_global,
    local_train,
    msfedavg_infer,
    msfedavg_train,
    run_experiment,
)
from .layers import Adam, BatchNorm, BatchWhitening, Conv2dLayer, Dense, compute_whitening_matrix
from .losses import LossConfig, bce_loss, f1_scores, local_objective, ntxent_loss
from .models import Backbone, Classifier, FusionLayout, ModalityId, ModelConfig, full_fusion_inference, pseudo_fuse
from .wire import deserialize_params, serialize_params

__version__ = "0.1.0"

__all__ = [
    "Adam", "Backbone", "BatchNorm", "BatchWhitening", "Classifier", "Conv2dLayer", "DatasetSpec", "Dense",
    "FederationConfig", "FusionLayout", "LossConfig", "ModalityId", "ModalitySpec", "ModelConfig", "Tensor",
    "aggregate", "bce_loss", "broadcast", "compute_whitening_matrix", "deserialize_params", "f1_scores",
    "full_fusion_inference", "generate_dataset", "gradients", "init_global", "label_divergence", "local_objective",
    "local_train", "msfedavg_infer", "msfedavg_train", "no_grad", "ntxent_loss", "partition", "pseudo_fuse",
    "read_dataset", "run_experiment", "serialize_params", "write_dataset",
]
