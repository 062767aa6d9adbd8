"""Central finite-difference checking of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


def finite_difference(f: Callable[[], Tensor], wrt: Sequence[Tensor],
                      h: float = 1e-5, max_per_tensor: int | None = None,
                      rng: np.random.Generator | None = None):
    """Compare analytic and numeric gradients of the scalar ``f()``.

    ``f`` must rebuild its graph from the current ``.data`` of the tensors in
    ``wrt`` on every call. Checks every coordinate unless ``max_per_tensor``
    caps the sample (seeded via ``rng``). Returns the worst relative error,
    where the denominator is floored at 1 so near-zero gradients are held to
    an absolute tolerance of the same magnitude.
    """
    for t in wrt:
        t.grad = None
    out = f()
    out.backward()
    grads = []
    for t in wrt:
        if t.grad is None:
            raise AssertionError(f"no gradient reached tensor of shape {t.shape}")
        grads.append(t.grad.copy())

    worst = 0.0
    for t, g in zip(wrt, grads):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_per_tensor, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = g.reshape(-1)[i]
            rel = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, rel)
    return worst


def weighted_sum(y: Tensor, rng: np.random.Generator) -> np.ndarray:
    """Fixed random weights turning a tensor output into a generic scalar."""
    return rng.standard_normal(y.shape)
