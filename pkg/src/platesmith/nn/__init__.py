from .autograd import Tensor, concat, conv2d, dropout, silu, softmax_last, upsample2x
from .denoiser import (
    NetConfig,
    PROFILES,
    ParamVector,
    UNetDenoiser,
    VectorDenoiser,
    VectorNetConfig,
    sinusoidal_embedding,
)
from .optim import AdamWState, adamw_step

__all__ = [
    "Tensor",
    "concat",
    "conv2d",
    "dropout",
    "silu",
    "softmax_last",
    "upsample2x",
    "NetConfig",
    "PROFILES",
    "ParamVector",
    "UNetDenoiser",
    "VectorDenoiser",
    "VectorNetConfig",
    "sinusoidal_embedding",
    "AdamWState",
    "adamw_step",
]
