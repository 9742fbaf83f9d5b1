"""Adam optimizer (bias-corrected first/second moments)."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One in-place update. t is the 1-based step count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name], self.t,
                      self.lr, self.beta1, self.beta2, self.eps)

    def state_dict(self) -> dict:
        arrays = {}
        for name in self.params:
            arrays[f"m:{name}"] = self.m[name]
            arrays[f"v:{name}"] = self.v[name]
        return {"t": self.t, "arrays": arrays}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.m[name] = state["arrays"][f"m:{name}"].copy()
            self.v[name] = state["arrays"][f"v:{name}"].copy()


class EarlyStopper:
    """Validation-loss watchdog shared by all trainers.

    Stops once the loss has failed to strictly improve for max(patience, 1)
    consecutive epochs, and keeps a snapshot of the best parameters so the
    caller can restore them. Patience 3 on a monotonically worsening run
    therefore halts after epoch 4 and restores epoch 1.
    """

    def __init__(self, params: dict[str, Tensor], patience: int):
        self.params = dict(params)
        self.limit = max(int(patience), 1)
        self.best_loss = np.inf
        self.best_epoch = -1
        self.streak = 0
        self._snapshot = {k: p.data.copy() for k, p in self.params.items()}

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch. Returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = float(val_loss)
            self.best_epoch = int(epoch)
            self.streak = 0
            self._snapshot = {k: p.data.copy() for k, p in self.params.items()}
            return False
        self.streak += 1
        return self.streak >= self.limit

    def restore_best(self) -> None:
        for name, p in self.params.items():
            p.data[...] = self._snapshot[name]
