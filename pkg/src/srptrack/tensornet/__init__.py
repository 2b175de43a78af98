"""Minimal dense-tensor NN core: exactly the layers the trackers need.

Tensors are plain numpy arrays (row-major, float32 in production paths,
float64 for gradient checking). Every layer implements ``forward``,
``backward`` (exact reverse-mode) and ``out_shape`` (total shape algebra that
raises ShapeError before any numeric work).
"""

from .layers import (
    CausalConv1d,
    CausalConv3d,
    Layer,
    MaxPoolAxis,
    Parameter,
    PReLU,
    Tanh,
    euclidean_distance_loss,
)
from .optim import Adam

__all__ = [
    "Adam",
    "CausalConv1d",
    "CausalConv3d",
    "Layer",
    "MaxPoolAxis",
    "PReLU",
    "Parameter",
    "Tanh",
    "euclidean_distance_loss",
]
