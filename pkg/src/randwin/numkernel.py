"""Dense float64 kernels with hand-written backward passes.

Every op that participates in training comes as a ``foo`` / ``foo_backward``
pair. Arrays may carry leading batch dimensions; the trailing two dimensions
are the matrix dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not chain."""


class KernelError(ArithmeticError):
    """Raised on numerically impossible requests (e.g. a fully masked row)."""


@dataclass(frozen=True)
class CausalMask:
    """Position ``i`` may attend to positions ``j <= i``."""

    size: int

    def allowed(self) -> np.ndarray:
        return np.tril(np.ones((self.size, self.size), dtype=bool))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def as_float(x) -> np.ndarray:
    """Array view in floating point; float64 unless already a float type (e.g. longdouble)."""
    x = np.asarray(x)
    return x if np.issubdtype(x.dtype, np.floating) else x.astype(DTYPE)


# -- matmul -----------------------------------------------------------------

def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A, B = as_float(A), as_float(B)
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply A{A.shape} by B{B.shape}")
    return A @ B


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def matmul_backward(dC: np.ndarray, A: np.ndarray, B: np.ndarray):
    dA = dC @ np.swapaxes(B, -1, -2)
    dB = np.swapaxes(A, -1, -2) @ dC
    return _unbroadcast(dA, A.shape), _unbroadcast(dB, B.shape)


# -- softmax ----------------------------------------------------------------

def _allowed_matrix(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    allowed = mask.allowed() if isinstance(mask, CausalMask) else np.asarray(mask, dtype=bool)
    if allowed.shape[-2:] != shape[-2:]:
        raise ShapeError(f"mask {allowed.shape} does not match logits {shape}")
    return allowed


def masked_softmax(logits: np.ndarray, mask=None) -> np.ndarray:
    """Row softmax where blocked positions get probability exactly 0.

    ``mask`` is a :class:`CausalMask`, a boolean "allowed" array broadcastable
    to ``logits``, or ``None`` for an unmasked softmax.
    """
    logits = as_float(logits)
    allowed = _allowed_matrix(mask, logits.shape)
    if allowed is None:
        return softmax_inplace(logits.copy())
    return softmax_inplace(logits.copy(), mask_bias(allowed))


def mask_bias(allowed: np.ndarray) -> np.ndarray:
    """Additive form of an "allowed" matrix: 0 where allowed, -inf where blocked."""
    allowed = np.asarray(allowed, dtype=bool)
    if not np.all(allowed.any(axis=-1)):
        raise KernelError("masked_softmax: a row has no allowed positions")
    return np.where(allowed, 0.0, -np.inf)


def softmax_inplace(S: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Row softmax that overwrites ``S``; ``bias`` is an additive mask from :func:`mask_bias`."""
    if bias is not None:
        S += bias
    S -= S.max(axis=-1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=-1, keepdims=True)
    return S


def masked_softmax_backward(dA: np.ndarray, A: np.ndarray) -> np.ndarray:
    # blocked entries have A == 0, so their gradient vanishes automatically
    out = dA - np.einsum("...ij,...ij->...i", dA, A)[..., None]
    out *= A
    return out


# -- pointwise --------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = as_float(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns ``(y, scale_mask)``; the mask is ``None`` when inactive."""
    if not training or rate <= 0.0:
        return x, None
    scale = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
    scale *= 1.0 / (1.0 - rate)
    return x * scale, scale


# -- feedforward ------------------------------------------------------------

def feedforward(Y, W1, b1, W2, b2):
    """Point-wise two-layer network ``relu(Y W1 + b1) W2 + b2``."""
    pre = matmul(Y, W1) + b1
    hidden = relu(pre)
    return matmul(hidden, W2) + b2


def feedforward_forward(Y, W1, b1, W2, b2):
    pre = matmul(Y, W1) + b1
    hidden = relu(pre)
    out = matmul(hidden, W2) + b2
    return out, (Y, pre, hidden)


def feedforward_backward(dout, cache, W1, W2):
    Y, pre, hidden = cache
    flat = dout.reshape(-1, dout.shape[-1])
    dW2 = hidden.reshape(-1, hidden.shape[-1]).T @ flat
    db2 = flat.sum(axis=0)
    dpre = (dout @ W2.T) * (pre > 0)
    dpre_flat = dpre.reshape(-1, dpre.shape[-1])
    dW1 = Y.reshape(-1, Y.shape[-1]).T @ dpre_flat
    db1 = dpre_flat.sum(axis=0)
    dY = dpre @ W1.T
    return dY, dW1, db1, dW2, db2


# -- layer norm -------------------------------------------------------------

def layer_norm(x, gain, bias, eps: float = 1e-5):
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_forward(x, gain, bias, eps: float = 1e-5):
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x = as_float(x)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv)


def layer_norm_backward(dout, cache, gain):
    xhat, inv = cache
    flat_d = dout.reshape(-1, dout.shape[-1])
    dgain = (flat_d * xhat.reshape(flat_d.shape)).sum(axis=0)
    dbias = flat_d.sum(axis=0)
    dxhat = dout * gain
    n = dout.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgain, dbias


# -- optimizer --------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched.

    A call whose gradients are all exactly zero leaves the parameters where
    they are (the moments still decay), whatever momentum the state carries.
    """
    if lr < 0:
        raise ValueError("adam_step: lr must be non-negative")
    all_zero = not any(np.any(g) for g in grads.values())
    step = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} does not match param '{name}' {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * g * g
        new_m[name], new_v[name] = m, v
        new_params[name] = p if all_zero else p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, AdamState(new_m, new_v, step)


def clip_global_norm(grads: dict, max_norm: float):
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm > max_norm > 0:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# -- gradient checking ------------------------------------------------------

def grad_check(f: Callable, inputs: Sequence[np.ndarray], eps: float = 1e-5,
               fd_dtype=np.longdouble, floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return ``(scalar, [grad for each input])``. The analytic
    gradients come from float64 inputs; the finite differences are evaluated
    in ``fd_dtype`` (extended precision by default) so that coordinates whose
    true gradient is zero are not swamped by float64 roundoff.

    The relative error of each component is ``|a - n| / max(|a|, |n|, floor * max(1, |f|))``:
    difference roundoff grows with the loss value, so the floor that keeps
    exactly-zero components from dividing by zero scales with it too.
    """
    f0, analytic = f(*[np.array(x, dtype=DTYPE) for x in inputs])
    floor = floor * max(1.0, abs(float(f0)))
    inputs = [np.array(x, dtype=fd_dtype) for x in inputs]
    worst = 0.0
    for k, x in enumerate(inputs):
        it = np.nditer(x, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = x[idx]
            x[idx] = orig + eps
            fp = f(*inputs)[0]
            x[idx] = orig - eps
            fm = f(*inputs)[0]
            x[idx] = orig
            num = float((fp - fm) / (2 * fd_dtype(eps)))
            a = float(np.asarray(analytic[k])[idx])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
