"""Adam over the ``group/name`` gradient stores produced by madapt.objectives."""

from __future__ import annotations

import numpy as np

from madapt.backbone import EncoderParams, ParamStore


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: EncoderParams, grads: ParamStore, lr: float, groups=None) -> None:
        """Update ``params`` in place; only names whose group is in ``groups`` move."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            group, _, name = key.partition("/")
            if groups is not None and group not in groups:
                continue
            m = self.m.get(key)
            if m is None:
                m = self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr:
                params.group(group)[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
