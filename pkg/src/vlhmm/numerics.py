"""Dense array operations with hand-written vector-Jacobian products.

Every forward op here has a matching ``*_vjp`` that maps the gradient of a
scalar loss w.r.t. the op output back to its inputs.  Arrays are plain
numpy arrays; training runs in float32 and gradient checks in float64.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

LN_EPS = 1e-5

Gradients = dict[str, np.ndarray]


class EmptySupportError(ValueError):
    pass


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_vjp(g: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return g @ b.T, a.T @ g


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_vjp(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, g, 0).astype(g.dtype, copy=False)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    """Row-wise standardization followed by a per-feature affine map.

    Returns ``(y, cache)``; ``cache`` feeds :func:`layer_norm_vjp`.
    """
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_vjp(g: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gain = cache
    h = xhat.shape[-1]
    ggain = (g * xhat).sum(axis=0)
    gbias = g.sum(axis=0)
    gxhat = g * gain
    gx = inv_std / h * (
        h * gxhat
        - gxhat.sum(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return gx, ggain, gbias


def logsumexp(values: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp.  Slices that are entirely ``-inf`` give ``-inf``."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("logsumexp of an empty array")
    m = np.max(values, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(values - m_safe), axis=axis, keepdims=True)) + m_safe
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return logits - logsumexp(logits, axis=axis, keepdims=True)


def log_softmax_vjp(g: np.ndarray, out: np.ndarray, axis: int = -1) -> np.ndarray:
    """VJP of log-softmax given its output ``out``; ``-inf`` outputs take no gradient."""
    g = np.where(np.isneginf(out), 0, g)
    return g - np.exp(out) * g.sum(axis=axis, keepdims=True)


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray, axis: int = -1) -> np.ndarray:
    """Log-softmax over entries where ``mask`` is true; the rest become ``-inf``."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if not mask.any(axis=axis).all():
        raise EmptySupportError("empty support")
    masked = np.where(mask, logits, -np.inf)
    return masked - logsumexp(masked, axis=axis, keepdims=True)


# Same algebra: the inactive entries are -inf in ``out`` and are skipped.
masked_log_softmax_vjp = log_softmax_vjp


def embedding_gather(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[np.asarray(ids)]


def embedding_vjp(g: np.ndarray, ids: np.ndarray, num_rows: int) -> np.ndarray:
    out = np.zeros((num_rows,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, np.asarray(ids), g)
    return out


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> Gradients:
    """Central differences of a scalar function, one coordinate at a time.

    ``f`` receives a dict of float64 copies of ``params``; it must be
    deterministic.
    """
    work = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    grads: Gradients = {}
    for name, arr in work.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(work)
            flat[i] = orig - eps
            fm = f(work)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads[name] = grad
    return grads


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                       floor: float = 1e-6) -> float:
    """Largest elementwise error, relative where ``|numeric| > floor`` and absolute otherwise."""
    worst = 0.0
    for name, num in numeric.items():
        ana = np.asarray(analytic.get(name, np.zeros_like(num)), dtype=np.float64)
        diff = np.abs(ana - num)
        scale = np.abs(num)
        err = np.where(scale > floor, diff / np.maximum(scale, floor), diff)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
