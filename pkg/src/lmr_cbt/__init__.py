"""Trainable cross-modal block transformer for unaligned multimodal emotion
recognition, built on a self-contained float64 autograd core."""

from .data import (Dataset, DatasetBundle, MultimodalSample, SynthSpec,
                   generate, load_dataset, save_dataset, split_batches)
from .errors import (CapacityError, ConfigError, ContractError, DataError,
                     DimensionError, EmptySequenceError, LmrCbtError,
                     NumericError, ParseError, SchemaError, TrainAbortError)
from .model import (FusionState, LmrCbtModel, ModelConfig,
                    load_checkpoint_bytes, make_ablation, param_count,
                    parameter_ledger, save_checkpoint_bytes)
from .tensor import Tape, Tensor, backward
from .training import (Adam, MetricsReport, TrainConfig, TrainResult, evaluate,
                    loss, run_ablation, train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "CapacityError", "ConfigError", "ContractError", "DataError",
    "Dataset", "DatasetBundle", "DimensionError", "EmptySequenceError",
    "FusionState", "LmrCbtError", "LmrCbtModel", "MetricsReport",
    "ModelConfig", "MultimodalSample", "NumericError", "ParseError",
    "SchemaError", "SynthSpec", "Tape", "Tensor", "TrainAbortError",
    "TrainConfig", "TrainResult", "backward", "evaluate", "generate",
    "load_checkpoint_bytes", "load_dataset", "loss", "make_ablation",
    "param_count", "parameter_ledger", "run_ablation",
    "save_checkpoint_bytes", "save_dataset", "split_batches", "train",
]
