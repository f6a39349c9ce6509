"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tape, Tensor


def _scalarize(out, rng):
    if out.size == 1:
        return out
    # project onto a fixed random direction so every output entry is exercised
    w = rng.standard_normal(out.shape)
    return ops.weighted_sum(out, w)


def grad_check(fn, inputs, eps=1e-5, seed=0, skip=None):
    """Return the max relative error between analytic and numeric gradients.

    ``fn(*inputs)`` must build its result from ``inputs`` (64-bit tensors)
    using differentiable ops. Non-scalar results are reduced with a fixed
    random projection. Gradients are checked for every input with
    ``requires_grad``; ``skip`` may hold a boolean mask per input marking
    elements to leave out (e.g. relu kinks).

    The relative error of element i is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``
    where ``floor`` is 1e-6 times the largest gradient magnitude of that input,
    so entries whose true gradient is ~0 do not dominate.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check runs in 64-bit; convert inputs to float64")
    rng = np.random.default_rng(seed)
    proj_seed = rng.integers(2**32)

    def evaluate():
        return _scalarize(fn(*inputs), np.random.default_rng(proj_seed))

    for t in inputs:
        t.grad = None
        t.data = np.ascontiguousarray(t.data)
    with Tape() as tape:
        loss = evaluate()
    tape.backward(loss)

    worst = 0.0
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = evaluate().item()
            flat[i] = orig - eps
            fm = evaluate().item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        a, n = analytic.reshape(-1), numeric.reshape(-1)
        keep = np.ones(a.size, dtype=bool)
        if skip is not None and skip[idx] is not None:
            keep = ~np.asarray(skip[idx]).reshape(-1)
        if not keep.any():
            continue
        a, n = a[keep], n[keep]
        floor = max(1e-6 * max(np.abs(a).max(), np.abs(n).max()), 1e-12)
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()))
    return worst


def as_f64(*arrays, requires_grad=True):
    return [Tensor(np.asarray(a, dtype=np.float64), requires_grad=requires_grad) for a in arrays]
