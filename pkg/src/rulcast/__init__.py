"""Capacity-fade forecasting for lithium-ion cells.

A small float64 autodiff engine (`tensor`, `ops`), the layer blocks of a
dual-path forecaster (`blocks`), model assembly with ablation variants
(`model`), per-cycle capacity data handling (`data`), deterministic Adam
training (`training`), metric/RUL evaluation (`evaluation`), and a CLI
(`cli`).
"""

from . import blocks, data, evaluation, ops, training
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    MetricError,
    NumericsError,
    RulcastError,
    UsageError,
)
from .model import (
    Model,
    ModelConfig,
    ModelVariant,
    build_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .tensor import Tensor, computation_record, graph_nodes, no_grad
from .training import Adam, TrainConfig, TrainTrace, seed_everything, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "MetricError",
    "Model",
    "ModelConfig",
    "ModelVariant",
    "NumericsError",
    "RulcastError",
    "Tensor",
    "TrainConfig",
    "TrainTrace",
    "UsageError",
    "blocks",
    "build_model",
    "computation_record",
    "data",
    "evaluation",
    "graph_nodes",
    "load_checkpoint",
    "no_grad",
    "ops",
    "param_count",
    "save_checkpoint",
    "seed_everything",
    "train",
    "training",
]
