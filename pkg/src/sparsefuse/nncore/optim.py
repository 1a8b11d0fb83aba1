"""AdamW with decoupled weight decay over a ParamStore."""

from __future__ import annotations

import numpy as np

from .params import ParamStore


class MissingGradError(RuntimeError):
    pass


class AdamW:
    def __init__(self, store: ParamStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.store = store
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, grads=None):
        """One update.  ``grads`` maps name -> array; defaults to each tensor's ``.grad``.

        Frozen parameters are skipped entirely; any other parameter without a
        gradient is an error.
        """
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for name, p in self.store.items():
            if self.store.is_frozen(name):
                continue
            g = p.grad if grads is None else grads.get(name)
            if g is None:
                raise MissingGradError(f"no gradient for trainable parameter {name!r}")
            g = np.asarray(g, dtype=np.float64)
            m = self.m.get(name)
            if m is None:
                m = np.zeros(p.shape)
                v = np.zeros(p.shape)
            else:
                v = self.v[name]
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data.astype(np.float64) * (1 - self.lr * self.weight_decay) - self.lr * update
            p.data = new.astype(p.data.dtype)


def adam_step(store, grads, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, state=None):
    """Functional single step; ``state`` is an AdamW instance reused across calls."""
    opt = state if state is not None else AdamW(store, lr, betas, eps, weight_decay)
    opt.step(grads)
    return opt
