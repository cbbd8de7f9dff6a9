"""Factorized-attention forecasting on spherical equiangular grids."""

from .tensor import Tensor, constant, contract, einsum, grad, gradcheck, tape_op

__all__ = [
    "Tensor",
    "constant",
    "contract",
    "einsum",
    "grad",
    "gradcheck",
    "tape_op",
]

__version__ = "0.1.0"
