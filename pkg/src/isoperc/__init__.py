"""Information percolation tools for Glauber dynamics of the Ising model on tori.

The package simulates continuous-time single-site dynamics driven by a
reproducible stream of update events, traces backward update histories,
builds space-time clusters, and provides exact small-system oracles and
mixing-time experiments.
"""

__version__ = "0.1.0"

from .lattice import TorusShape, BlockGrid, neighbors, ball, block_of
from .lattice import min_animal_weight, min_animal_weight_2
from .updates import ModelParams, Rule, ObliviousClass, UpdateEvent, UpdateStream
from .updates import theta, generate_stream, apply_update, classify_oblivious

__all__ = [
    "TorusShape",
    "BlockGrid",
    "neighbors",
    "ball",
    "block_of",
    "min_animal_weight",
    "min_animal_weight_2",
    "ModelParams",
    "Rule",
    "ObliviousClass",
    "UpdateEvent",
    "UpdateStream",
    "theta",
    "generate_stream",
    "apply_update",
    "classify_oblivious",
]
