"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

import numpy as np

__all__ = ["AdamW"]


class AdamW:
    """AdamW over named parameter groups.

    ``groups`` maps a group name to ``(params, lr)`` where ``params`` is a
    dict of name -> Tensor. Moments are exposed for checkpointing so a
    resumed run reproduces the original trajectory bit for bit.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.groups = {name: (dict(params), float(lr)) for name, (params, lr) in groups.items()}
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}
        for gname, (params, _) in self.groups.items():
            for pname, p in params.items():
                key = f"{gname}/{pname}"
                self.m[key] = np.zeros_like(p.data)
                self.v[key] = np.zeros_like(p.data)

    def zero_grad(self):
        for params, _ in self.groups.values():
            for p in params.values():
                p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for gname, (params, lr) in self.groups.items():
            for pname, p in params.items():
                if p.grad is None:
                    continue
                key = f"{gname}/{pname}"
                g = p.grad
                self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
                self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
                mhat = self.m[key] / bc1
                vhat = self.v[key] / bc2
                upd = mhat / (np.sqrt(vhat) + self.eps)
                if self.weight_decay:
                    upd = upd + self.weight_decay * p.data
                p.data = p.data - lr * upd

    def state_dict(self):
        return {
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=np.float64).reshape(self.m[k].shape)
            self.v[k] = np.asarray(state["v"][k], dtype=np.float64).reshape(self.v[k].shape)
