"""Low-rank adapters for affine projections.

An adapter adds ``scale * (x @ down) @ up`` next to the frozen base weight,
so the effective weight is ``W + scale * (down @ up)``. With ``up`` zeroed
at init the wrapped layer is exactly the base layer.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, matmul, scale as t_scale

__all__ = ["LoraAdapter", "lora_apply"]


class LoraAdapter:
    """Trainable low-rank delta for one projection.

    down: (d_in, rank), gaussian init; up: (rank, d_out), zero init.
    ``scale`` is the literal multiplier on the delta (configs express it as
    scaling_factor / rank, the usual convention).
    """

    def __init__(self, d_in, d_out, rank, scale, target, rng):
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        self.rank = int(rank)
        self.scale = float(scale)
        self.target = target
        self.down = Tensor(rng.standard_normal((d_in, rank)) / np.sqrt(d_in),
                           requires_grad=True)
        self.up = Tensor(np.zeros((rank, d_out)), requires_grad=True)

    def params(self):
        return {f"{self.target}.down": self.down, f"{self.target}.up": self.up}


def lora_apply(adapter, w, x):
    """x @ (W + scale * down @ up), computed through the low-rank factors."""
    if x.shape[-1] != w.shape[0]:
        from .autodiff import ShapeMismatchError
        raise ShapeMismatchError("lora_apply", x.shape, w.shape)
    base = matmul(x, w)
    if adapter is None:
        return base
    if adapter.down.shape[0] != w.shape[0] or adapter.up.shape[1] != w.shape[1]:
        from .autodiff import ShapeMismatchError
        raise ShapeMismatchError("lora_apply", adapter.down.shape, w.shape)
    delta = matmul(matmul(x, adapter.down), adapter.up)
    return add(base, t_scale(delta, adapter.scale))
