"""Layer-sensitiveness driven structured pruning for CNNs."""

__version__ = "0.1.0"
