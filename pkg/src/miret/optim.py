"""Adam optimizer over named parameter tensors, with checkpointable state."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        lr: float = 1e-3,
        betas=(0.9, 0.999),
        eps: float = 1e-8,
        lr_overrides: dict[str, float] | None = None,
    ):
        self.params = params
        self.lr = lr
        self.lr_overrides = dict(lr_overrides or {})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params}
        self.v = {name: np.zeros_like(p.data) for name, p in params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        inv_bias1 = 1.0 / (1.0 - b1**self.t)
        inv_sqrt_bias2 = 1.0 / np.sqrt(1.0 - b2**self.t)
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v)
            denom *= inv_sqrt_bias2
            denom += self.eps
            update = m / denom
            update *= self.lr_overrides.get(name, self.lr) * inv_bias1
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for name, _ in self.params:
            self.m[name][...] = arrays[f"opt.m.{name}"]
            self.v[name][...] = arrays[f"opt.v.{name}"]
