from ._evc import (
    DecodeError,
    MetricError,
    Model,
    bd_rate,
    bpp,
    padded_size,
    psnr,
    relative_improvement,
    sparsity_grad,
    sparsity_loss,
)

__all__ = [
    "DecodeError",
    "MetricError",
    "Model",
    "bd_rate",
    "bpp",
    "padded_size",
    "psnr",
    "relative_improvement",
    "sparsity_grad",
    "sparsity_loss",
]
