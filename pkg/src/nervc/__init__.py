"""Implicit neural video codec: a transformer hyper-network that emits NeRV
decoder weights in one forward pass, grouped-convolution decoding of many
videos at once, and a quantize + Huffman storage container."""

from .container import read_nrvp, write_nrvp
from .decoder import WeightBatch, bench, decode_batch, stack_weights
from .hypernet import HypernetConfig, HypernetParams, TokenSpec, encode, init_params
from .nerv import NervConfig, NervWeights, init_weights, nerv_forward
from .tensor import Tensor, backward
from .training import TrainConfig, fit_nerv, train_hypernet

__version__ = "0.1.0"

__all__ = [
    "HypernetConfig",
    "HypernetParams",
    "NervConfig",
    "NervWeights",
    "Tensor",
    "TokenSpec",
    "TrainConfig",
    "WeightBatch",
    "backward",
    "bench",
    "decode_batch",
    "encode",
    "fit_nerv",
    "init_params",
    "init_weights",
    "nerv_forward",
    "read_nrvp",
    "stack_weights",
    "train_hypernet",
    "write_nrvp",
]
