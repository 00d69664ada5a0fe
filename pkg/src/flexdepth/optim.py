"""Adam over named numpy parameter dicts, with non-finite-step protection."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.skipped_steps = 0

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray], lr: float) -> bool:
        """Update params in place. Returns False (and counts a skipped
        step) when any gradient is non-finite; params stay untouched."""
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                self.skipped_steps += 1
                return False
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        return True

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam_m.{k}": v for k, v in self.m.items()}
        out.update({f"adam_v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k.removeprefix("adam_m."): v.copy()
                  for k, v in tensors.items() if k.startswith("adam_m.")}
        self.v = {k.removeprefix("adam_v."): v.copy()
                  for k, v in tensors.items() if k.startswith("adam_v.")}
