"""Named parameter storage and deterministic initialisation."""

from __future__ import annotations

import zlib
from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered name -> Tensor map with frozen name prefixes.

    Initial values depend only on (seed, name), so creating parameters in a
    different order (or creating extra groups) never changes existing ones.
    """

    def __init__(self, seed=0, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.frozen_prefixes: set[str] = set()

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def rng_for(self, name):
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def get_or_create(self, name, shape, init="xavier", fan=None):
        if name in self.params:
            t = self.params[name]
            if t.shape != tuple(shape):
                raise ValueError(f"parameter {name!r} has shape {t.shape}, requested {shape}")
            return t
        return self.add(name, self._init(name, tuple(shape), init, fan))

    def _init(self, name, shape, init, fan):
        if init == "zeros":
            return np.zeros(shape)
        if init == "ones":
            return np.ones(shape)
        if isinstance(init, (int, float)):
            return np.full(shape, float(init))
        if init == "xavier":
            fan_in, fan_out = fan if fan is not None else (shape[0], shape[-1])
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            return self.rng_for(name).uniform(-bound, bound, size=shape)
        if init == "normal":
            return self.rng_for(name).normal(0.0, 0.02, size=shape)
        raise ValueError(f"unknown initialiser {init!r}")

    def is_frozen(self, name):
        return any(name.startswith(p) for p in self.frozen_prefixes)

    def trainable(self):
        return [(n, t) for n, t in self.params.items() if not self.is_frozen(n)]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state(self):
        return OrderedDict((n, t.data.copy()) for n, t in self.params.items())

    def load_state(self, state, strict=True):
        for name, arr in state.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            t = self.params[name]
            if t.shape != arr.shape:
                raise ValueError(f"parameter {name!r}: stored {arr.shape}, model {t.shape}")
            t.data = np.asarray(arr, dtype=self.dtype).copy()
        if strict:
            missing = [n for n in self.params if n not in state]
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")

    def astype(self, dtype):
        """Copy of the store with every value cast to ``dtype``."""
        out = ParamStore(self.seed, dtype)
        out.frozen_prefixes = set(self.frozen_prefixes)
        for n, t in self.params.items():
            out.add(n, t.data)
        return out
