"""Neighborhood similarity layer: normalized inner products between each
pixel's centered feature vector and those of its spatial neighbors."""
from .nsl import (
    NeighborhoodStructure,
    NslCache,
    NslConfig,
    nsl_backward,
    nsl_forward,
    nsl_forward_reference,
    nsl_diagonal_term,
    square_neighborhood,
)
from .tensor import Shape4, channel_means, spatial_channel_mean, tensor_close, tensor_new

__version__ = "0.1.0"
