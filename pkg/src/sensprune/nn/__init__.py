"""Minimal numpy training kernel."""
from .checkpoint import checkpoint_bytes, load_checkpoint, net_digest, save_checkpoint
from .network import Network, forward
from .spec import LayerSpec, ModelSpec, SkipEdge, count_macs, count_params
from .train import DatasetSplit, TrainConfig, evaluate, predict, train

__all__ = [
    "DatasetSplit", "LayerSpec", "ModelSpec", "Network", "SkipEdge", "TrainConfig",
    "checkpoint_bytes", "count_macs", "count_params", "evaluate", "forward", "load_checkpoint",
    "net_digest", "predict", "save_checkpoint", "train",
]
