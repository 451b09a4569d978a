"""Dense float32 tensor ops with hand-derived gradients.

Everything here works on plain numpy arrays in C (row-major) order.
float32 is the working precision; float64 arrays are accepted too so
gradient checks can run a high-precision mode through the same code.
Accumulation order inside each op is fixed, so repeated calls with the
same inputs are bit-identical on one machine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InputError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


def _check_float(name: str, x: np.ndarray) -> None:
    if not isinstance(x, np.ndarray) or x.dtype.type not in FLOAT_DTYPES:
        raise ShapeError(f"{name} must be a float32/float64 ndarray, got {type(x).__name__}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[m, k] @ [k, n] -> [m, n] with explicit shape validation."""
    _check_float("a", a)
    _check_float("b", b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} vs {b.shape}")
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilized by max subtraction."""
    _check_float("x", x)
    if x.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Scale each trailing d-vector by 1/sqrt(mean of squares + eps), then by gain."""
    y, _ = rmsnorm_fwd(x, gain, eps)
    return y


def rmsnorm_fwd(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5):
    """Forward pass returning (y, inv_rms) so the backward pass can reuse the scale."""
    _check_float("x", x)
    _check_float("gain", gain)
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"gain {gain.shape} does not match trailing dim of {x.shape}")
    ms = np.mean(x * x, axis=-1, keepdims=True) + x.dtype.type(eps)
    inv = 1.0 / np.sqrt(ms)
    return x * inv * gain, inv


def rmsnorm_bwd(d_y: np.ndarray, x: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    """Gradients of rmsnorm: returns (d_x, d_gain)."""
    d = x.shape[-1]
    d_xn = d_y * gain
    # d_gain sums over all leading axes; xn = x * inv
    d_gain = np.sum(d_y * x * inv, axis=tuple(range(x.ndim - 1)))
    dot = np.sum(d_xn * x, axis=-1, keepdims=True)
    d_x = inv * d_xn - x * (inv**3 / d) * dot
    return d_x, d_gain


def cross_entropy_grad(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean NLL over unmasked positions plus its gradient w.r.t. logits.

    logits: [t, V]; targets: [t] int token ids; mask: [t] bool, True = counted.
    Loss is accumulated in float64 regardless of input dtype; the returned
    gradient matches the logits dtype and is (softmax - one_hot) / count on
    unmasked rows, zero elsewhere.
    """
    _check_float("logits", logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [t, V], got {logits.shape}")
    t, v = logits.shape
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != (t,) or mask.shape != (t,):
        raise ShapeError(f"targets/mask must be length {t}, got {targets.shape} and {mask.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise InputError(f"target ids must lie in [0, {v}), got range "
                         f"[{int(targets.min())}, {int(targets.max())}]")
    count = int(mask.sum())
    if count == 0:
        raise DegenerateInputError("all positions are masked; loss is undefined")

    shifted = logits - logits.max(axis=-1, keepdims=True)
    probs = softmax_rows(logits)
    rows = np.arange(t)
    # log p = shifted[target] - log sum exp(shifted); reduce in float64
    logp = shifted[rows, targets].astype(np.float64) - np.log(
        np.exp(shifted.astype(np.float64)).sum(axis=-1))
    loss = float(-(logp * mask).sum() / count)

    grad = probs.copy()
    grad[rows, targets] -= 1.0
    grad[~mask] = 0.0
    grad /= count
    return loss, grad


@dataclass
class AdamState:
    """First/second moment buffers plus hyperparameters for one optimizer."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState):
    """One bias-corrected Adam update, applied in place to every key in grads.

    Only keys present in grads are touched; params not listed there keep
    their values and accumulate no optimizer state.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    # bias correction uses the shared step counter, so all tensors must be
    # updated together on every step
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        if name not in params:
            raise InputError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


def global_norm(grads: dict[str, np.ndarray]) -> float:
    """Euclidean norm over every entry of every gradient, reduced in float64."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint norm is at most max_norm.

    Returns the pre-clip norm. max_norm <= 0 disables clipping.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= g.dtype.type(scale)
    return norm
