"""Layer-wise parameter synchronization for data-parallel training."""
from .coordinator import InformationBook, bootstrap
from .engine import MLP, make_synthetic_dataset, train_oracle
from .modelspec import ClusterConfig, LayerSpec, ModelSpec, load_cluster, load_model, parse_cluster, parse_model
from .planner import CommPlan, Scheme, best_scheme, plan
from .runtime import train_distributed

__all__ = [
    "InformationBook", "bootstrap", "MLP", "make_synthetic_dataset", "train_oracle", "ClusterConfig",
    "LayerSpec", "ModelSpec", "load_cluster", "load_model", "parse_cluster", "parse_model", "CommPlan",
    "Scheme", "best_scheme", "plan", "train_distributed",
]
__version__ = "0.1.0"
