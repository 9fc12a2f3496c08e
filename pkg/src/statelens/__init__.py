"""statelens: activation-state utilization profiling for small
convolutional computation graphs.

The package measures how much of each computation unit's binary output
state space a class of images actually exercises, assembles per-class
encodings and whole-model fingerprints from those measurements, and
contrasts clean models against trojan-poisoned ones trained on a
built-in synthetic sign dataset.
"""

from .errors import BudgetError, NumericError, StateLensError, ValidationError
from .graph import ComputationGraph, NodeSpec, load_graph, mini_resnet
from .probe import StateHistogram, UtilizationTriple, utilization
from .tensor import Tensor, elementwise, zeros

__all__ = [
    "BudgetError",
    "ComputationGraph",
    "NodeSpec",
    "NumericError",
    "StateHistogram",
    "StateLensError",
    "Tensor",
    "UtilizationTriple",
    "ValidationError",
    "elementwise",
    "load_graph",
    "mini_resnet",
    "utilization",
    "zeros",
]

__version__ = "0.1.0"
