"""Differentiable primitives.

Layouts follow the channels-last convention: images are ``(n, h, w, c)`` and
convolution kernels ``(3, 3, c_in, c_out)``. Every op returns a new tensor and
records a vector-Jacobian rule on the active tape when any input needs grad.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, make_result


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _need(t: Tensor) -> bool:
    return t.requires_grad


# --------------------------------------------------------------------------
# convolution / pooling


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial size preserved)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be (n, h, w, c), got {x.shape}")
    if kernel.shape[:2] != (3, 3) or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (3, 3, c_in, c_out), got {kernel.shape}")
    n, h, w, cin = x.shape
    if kernel.shape[2] != cin:
        raise ShapeError(f"input has {cin} channels but kernel expects {kernel.shape[2]}")
    cout = kernel.shape[3]
    if bias.shape != (cout,):
        raise ShapeError(f"bias must be ({cout},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.stack(
        [xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)], axis=3
    ).reshape(n * h * w, 9 * cin)
    kmat = kernel.data.reshape(9 * cin, cout)
    out = (cols @ kmat).reshape(n, h, w, cout) + bias.data

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if _need(kernel) else None
        gb = g2.sum(axis=0) if _need(bias) else None
        gx = None
        if _need(x):
            gcols = (g2 @ kmat.T).reshape(n, h, w, 9, cin)
            gxp = np.zeros_like(xp)
            k = 0
            for i in range(3):
                for j in range(3):
                    gxp[:, i : i + h, j : j + w, :] += gcols[:, :, :, k, :]
                    k += 1
            gx = gxp[:, 1:-1, 1:-1, :]
        return gx, gk, gb

    return make_result("conv2d", out, (x, kernel, bias), vjp)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Ties route the gradient to the first maximum in row-major window order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d input must be (n, h, w, c), got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    # Window positions in row-major order: (0,0), (0,1), (1,0), (1,1).
    corners = [x.data[:, i::2, j::2, :] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    idx = np.where(
        corners[0] == out, 0, np.where(corners[1] == out, 1, np.where(corners[2] == out, 2, 3))
    )

    def vjp(g):
        gx = np.zeros_like(x.data)
        k = 0
        for i in (0, 1):
            for j in (0, 1):
                gx[:, i::2, j::2, :] = np.where(idx == k, g, 0)
                k += 1
        return (gx,)

    return make_result("maxpool2d", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: ``(n, h, w, d) -> (n, d)``."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be (n, h, w, d), got {x.shape}")
    n, h, w, d = x.shape
    out = x.data.mean(axis=(1, 2))

    def vjp(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return make_result("global_avg_pool", out, (x,), vjp)


# --------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_result("relu", out, (x,), lambda g: (np.where(x.data > 0, g, 0),))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # Two-branch form avoids overflow in exp for large |z|.
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _wrap(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return make_result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return make_result("scale", x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype),)

    return make_result("sum", np.asarray(x.data.sum(), dtype=x.dtype), (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def take(x: Tensor, indices) -> Tensor:
    """Select entries of a 1-D tensor."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 1:
        raise ShapeError(f"take expects a 1-D tensor, got {x.shape}")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_result("take", x.data[idx], (x,), vjp)


# --------------------------------------------------------------------------
# dense layers and reductions


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(n, p)`` and weight ``(q, p)``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear inner dims disagree: {x.shape} vs {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias must be ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def vjp(g):
        return (
            g @ weight.data if _need(x) else None,
            g.T @ x.data if _need(weight) else None,
            g.sum(axis=0) if _need(bias) else None,
        )

    return make_result("linear", out, (x, weight, bias), vjp)


def grouped_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """One dense layer per group ``t``.

    ``weight`` is ``(T, q, p)`` and ``bias`` ``(T, q)``. ``x`` is either
    ``(T, K, p)`` (each group sees its own rows) or ``(K, p)`` (all groups
    share the same rows). The result is ``(T, K, q)``.
    """
    if weight.data.ndim != 3 or bias.data.ndim != 2:
        raise ShapeError(f"grouped_linear weight/bias must be 3-D/2-D, got {weight.shape}, {bias.shape}")
    T, q, p = weight.shape
    if bias.shape != (T, q):
        raise ShapeError(f"bias must be ({T}, {q}), got {bias.shape}")
    shared = x.data.ndim == 2
    if x.shape[-1] != p or (not shared and (x.data.ndim != 3 or x.shape[0] != T)):
        raise ShapeError(f"grouped_linear input {x.shape} incompatible with weight {weight.shape}")
    wt = weight.data.transpose(0, 2, 1)
    out = np.matmul(x.data, wt) + bias.data[:, None, :]

    def vjp(g):
        gx = gw = gb = None
        if _need(x):
            gx = np.matmul(g, weight.data)
            if shared:
                gx = gx.sum(axis=0)
        if _need(weight):
            gw = np.matmul(g.transpose(0, 2, 1), x.data)
        if _need(bias):
            gb = g.sum(axis=1)
        return gx, gw, gb

    return make_result("grouped_linear", out, (x, weight, bias), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")

    def vjp(g):
        return (
            g @ b.data.T if _need(a) else None,
            a.data.T @ g if _need(b) else None,
        )

    return make_result("matmul", a.data @ b.data, (a, b), vjp)


def weighted_sum_rows(rows: Tensor, weights: Tensor) -> Tensor:
    """``sum_i weights[i] * rows[i]`` for rows ``(m, d)``."""
    if rows.data.ndim != 2 or weights.data.ndim != 1 or rows.shape[0] != weights.shape[0]:
        raise ShapeError(f"weighted_sum_rows: {rows.shape} rows vs {weights.shape} weights")
    out = weights.data @ rows.data

    def vjp(g):
        return (
            np.outer(weights.data, g) if _need(rows) else None,
            rows.data @ g if _need(weights) else None,
        )

    return make_result("weighted_sum_rows", out, (rows, weights), vjp)


def softmax_vector(x: Tensor) -> Tensor:
    if x.data.ndim != 1 or x.size < 1:
        raise ShapeError(f"softmax_vector expects a non-empty 1-D tensor, got {x.shape}")
    e = np.exp(x.data - x.data.max())
    s = e / e.sum()

    def vjp(g):
        return (s * (g - np.dot(g, s)),)

    return make_result("softmax_vector", s, (x,), vjp)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Sum of squared differences (not averaged over entries)."""
    target = _wrap(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss length mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray(np.dot(diff.reshape(-1), diff.reshape(-1)), dtype=pred.dtype)

    def vjp(g):
        g0 = g.reshape(-1)[0]
        return 2.0 * g0 * diff, -2.0 * g0 * diff

    return make_result("mse_loss", out, (pred, target), vjp)
