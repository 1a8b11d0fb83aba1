"""Central finite differences as an independent gradient oracle."""

from __future__ import annotations

import numpy as np


def finite_diff_grad(f, x, h=1e-5, indices=None):
    """Numerical gradient of scalar ``f`` at array ``x`` by central differences.

    ``x`` is perturbed in place and restored.  With ``indices`` (flat
    positions) only those entries are evaluated; the rest stay zero.
    """
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-5):
    """Norm-wise relative error; ``floor`` keeps identically-zero gradients
    (e.g. key biases under softmax shift invariance) from dividing noise by 0."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_tensors(loss_fn, tensors, rng, h=1e-5, samples=6):
    """Compare analytic and numerical gradients for selected entries.

    ``loss_fn`` builds the graph and returns a scalar Tensor; ``tensors`` is
    a name -> Tensor map of float64 leaves.  Returns name -> relative error.
    """
    for t in tensors.values():
        t.grad = None
    loss_fn().backward()
    analytic = {k: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for k, t in tensors.items()}
    errors = {}
    for name, t in tensors.items():
        size = t.data.size
        idx = rng.choice(size, size=min(samples, size), replace=False)
        numeric = finite_diff_grad(lambda: loss_fn().data, t.data, h, idx)
        errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric.reshape(-1)[idx])
    return errors
