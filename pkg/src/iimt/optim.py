"""Adam with decoupled weight decay and the polynomial LR schedule."""

from __future__ import annotations

from typing import Dict, Tuple

import numpy as np

from .autodiff import Tensor


def polynomial_decay(step: int, total_steps: int, lr: float, lr_end: float = 0.0,
                     power: float = 1.0) -> float:
    """Learning rate after ``step`` optimizer updates (step 0 = first)."""
    if total_steps <= 0 or step >= total_steps:
        return lr_end
    frac = 1.0 - step / total_steps
    return (lr - lr_end) * frac**power + lr_end


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: Dict[str, Tensor], lr: float,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0,
                 lr_scales: Dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        # per-name LR multipliers by longest matching prefix
        self._scale = {}
        for name in params:
            factor = 1.0
            best = -1
            for prefix, s in (lr_scales or {}).items():
                if name.startswith(prefix) and len(prefix) > best:
                    factor, best = s, len(prefix)
            self._scale[name] = factor

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        if lr is None:
            lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * self._scale[name] * update

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moment buffers under reserved prefixes, for resumable checkpoints."""
        out = {}
        for k in self.params:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        out["opt.t"] = np.asarray(float(self.t))
        return out

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]):
        for k in self.params:
            self.m[k] = np.array(arrays[f"opt.m.{k}"])
            self.v[k] = np.array(arrays[f"opt.v.{k}"])
        self.t = int(np.asarray(arrays["opt.t"]).reshape(()))
