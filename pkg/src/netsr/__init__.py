"""Symbolic regression of governing equations on complex networks.

The package covers the full desk-scale pipeline: corpus synthesis, network
generation, dynamics simulation, observation preprocessing, set-to-sequence
model training, and equation recovery with constrained beam search plus
constant refinement.
"""

__version__ = "0.1.0"

from . import corpus, dynamics, expr, inference, metrics, model, sampling, topology, training

__all__ = [
    "__version__",
    "corpus",
    "dynamics",
    "expr",
    "inference",
    "metrics",
    "model",
    "sampling",
    "topology",
    "training",
]
