"""Plain SGD and Adam over named parameter segments."""

from __future__ import annotations

import numpy as np

from evograd.params import ParamVector


class SGD:
    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params: ParamVector, grads: ParamVector) -> ParamVector:
        return params.zip_map(grads, lambda p, g: p - self.lr * g)


class Adam:
    """Standard Adam with bias correction; state is kept per segment name.

    ``weight_decay`` is the classic L2 form, added to the gradient before
    the moment updates.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParamVector, grads: ParamVector) -> ParamVector:
        self.t += 1
        out = []
        for name, p in params.segments:
            g = grads.get(name)
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self._m.get(name, np.zeros_like(p))
            v = self._v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            mhat = m / (1 - self.beta1 ** self.t)
            vhat = v / (1 - self.beta2 ** self.t)
            out.append((name, p - self.lr * mhat / (np.sqrt(vhat) + self.eps)))
        return ParamVector(out)


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
