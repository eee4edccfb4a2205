"""Simulation and analysis of local-update distributed training with matrix-aware inner optimizers."""
__version__ = "0.1.0"

__all__ = ["__version__"]
