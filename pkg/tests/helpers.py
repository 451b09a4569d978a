"""Shared test utilities: finite-difference gradient checks and comparisons."""

from __future__ import annotations

import numpy as np


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-level relative difference, safe for near-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a.ravel()))
    nb = float(np.linalg.norm(b.ravel()))
    diff = float(np.linalg.norm((a - b).ravel()))
    return diff / max(na, nb, floor)


def fd_grad(loss_fn, x: np.ndarray, eps: float) -> np.ndarray:
    """Central finite differences of loss_fn() w.r.t. every entry of x.

    loss_fn must read x by reference (it is perturbed in place and restored).
    """
    assert x.flags["C_CONTIGUOUS"]
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = loss_fn()
        flat[i] = keep - eps
        down = loss_fn()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * eps)
    return g


def randomize_weights(weights, rng, std: float = 0.5):
    """Overwrite every base tensor with healthy random values for grad checks."""
    for name, t in weights.tensors.items():
        if name.endswith("_norm"):
            t[...] = rng.normal(1.0, 0.2, size=t.shape).astype(t.dtype)
        else:
            t[...] = rng.normal(0.0, std / np.sqrt(t.shape[-1]), size=t.shape).astype(t.dtype)
    return weights


def randomize_adapters(lset, rng, std: float = 0.5, dtype=None):
    """Give A and B nonzero values so adapter gradients are exercised."""
    for ad in lset.adapters.values():
        dt = dtype if dtype is not None else ad.a.dtype
        ad.a = rng.normal(0.0, std / np.sqrt(ad.a.shape[1]), size=ad.a.shape).astype(dt)
        ad.b = rng.normal(0.0, std / np.sqrt(ad.b.shape[1]), size=ad.b.shape).astype(dt)
    return lset
