"""Optimizers that update Tensor parameters in place."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SgdMomentum:
    """SGD with classical momentum and L2 weight decay folded into the gradient.

    The update is v <- mu * v + (grad + wd * p); p <- p - lr * v, with the
    learning rate supplied per step so schedules stay outside the optimizer.
    """

    def __init__(self, params: list[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data -= np.asarray(lr, dtype=p.dtype) * buf

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> list[np.ndarray]:
        return self.buffers

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != len(self.buffers):
            raise ValueError(f"optimizer state count mismatch: {len(arrays)} vs {len(self.buffers)}")
        for buf, arr in zip(self.buffers, arrays):
            if arr.shape != buf.shape:
                raise ValueError(f"optimizer state shape mismatch: {arr.shape} vs {buf.shape}")
            buf[...] = arr


class Adam:
    """Adam with bias correction (Kingma & Ba defaults)."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
