"""Network ops: convolution, normalization, pooling, linear maps and losses."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import DTYPE, Tensor, _stable_sigmoid, as_tensor, make_op

NORM_MOMENTUM = 0.1
NORM_EPS = 1e-5


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col_cf(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(C, N, Hp, Wp) -> (C*kh*kw, N*ho*wo) patch matrix, rows ordered (c, ki, kj)."""
    c, n = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=DTYPE)
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + hi : stride, j : j + wi : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, layout: str = "NCHW") -> Tensor:
    """2-d cross-correlation with an OIKhKw kernel (no bias).

    ``layout="CNHW"`` takes and returns channel-major batches, which avoids
    transposes when convolutions are chained.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects a 4-d input and OIKhKw kernel, got {x.shape}, {kernel.shape}")
    if layout not in ("NCHW", "CNHW"):
        raise ValueError(f"unknown layout {layout!r}")
    cf = layout == "CNHW"
    if cf:
        c, n, h, w = x.shape
    else:
        n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {ci}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h}x{w}")

    xc = x.data if cf else x.data.transpose(1, 0, 2, 3)
    if padding:
        xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
        xp[:, :, padding : padding + h, padding : padding + w] = xc
    else:
        xp = xc
    cols = _im2col_cf(xp, kh, kw, stride, ho, wo)
    wmat = kernel.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo)
    if not cf:
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g):
        g2 = (g if cf else g.transpose(1, 0, 2, 3)).reshape(o, -1)
        dk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        dx = None
        if x.requires_grad:
            # one GEMM gives every kernel tap's contribution in (tap, C, N, Ho, Wo) layout
            taps = (kernel.data.transpose(2, 3, 1, 0).reshape(-1, o) @ g2).reshape(kh, kw, c, n, ho, wo)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + hi : stride, j : j + wi : stride] += taps[i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            dx = np.ascontiguousarray(dxp if cf else dxp.transpose(1, 0, 2, 3))
        return dx, dk

    return make_op(out, (x, kernel), bw, "conv2d")


def channel_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    training: bool,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = NORM_MOMENTUM,
    eps: float = NORM_EPS,
    layout: str = "NCHW",
) -> Tensor:
    """Per-channel normalization of an NC/NCHW (or CNHW) tensor.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place; otherwise the running statistics
    are used and the op is a fixed per-channel affine map.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    cf = layout == "CNHW"
    c = x.shape[0] if cf else x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"channel_norm needs scale/shift of shape ({c},), got {scale.shape}, {shift.shape}")
    # work on a (C, M) view
    x2 = x.data.reshape(c, -1) if cf else np.moveaxis(x.data, 1, 0).reshape(c, -1)
    m = x2.shape[1]

    if training:
        mu = x2.mean(axis=1)
        var = x2.var(axis=1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * m / (m - 1) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x2 - mu[:, None]) * inv[:, None]
    out2 = xhat * scale.data[:, None] + shift.data[:, None]

    def to_layout(a2):
        if cf:
            return a2.reshape(x.shape)
        moved = (x.shape[1], x.shape[0]) + x.shape[2:]
        return np.ascontiguousarray(np.moveaxis(a2.reshape(moved), 0, 1))

    def bw(g):
        g2 = g.reshape(c, -1) if cf else np.moveaxis(g, 1, 0).reshape(c, -1)
        gx = np.einsum("cm,cm->c", g2, xhat)
        gs = g2.sum(axis=1)
        dx = None
        if x.requires_grad:
            k = (scale.data * inv)[:, None]
            if training:
                dx = to_layout((g2 - (gs / m)[:, None] - xhat * (gx / m)[:, None]) * k)
            else:
                dx = to_layout(g2 * k)
        return dx, gx if scale.requires_grad else None, gs if shift.requires_grad else None

    return make_op(to_layout(out2), (x, scale, shift), bw, "channel_norm")


def global_avg_pool(x: Tensor, layout: str = "NCHW") -> Tensor:
    """Spatial mean: NCHW -> NC (a CNHW input also yields NC)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-d tensor, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    if layout == "CNHW":
        return make_op(
            x.data.mean(axis=(2, 3)).T.copy(),
            (x,),
            lambda g: (np.broadcast_to(g.T[:, :, None, None] / hw, x.shape).copy(),),
            "global_avg_pool",
        )
    return make_op(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),),
        "global_avg_pool",
    )


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T (+ bias)`` with ``weight`` shaped (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear dimension mismatch: x {x.shape}, weight {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))
    out = x.data @ weight.data.T
    if bias is not None:
        if parents[2].shape != (weight.shape[0],):
            raise ValueError(f"linear bias must have shape ({weight.shape[0]},), got {parents[2].shape}")
        out = out + parents[2].data

    def bw(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_op(out, parents, bw, "linear")


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    diff = pred.data - t
    n = diff.size
    return make_op(np.asarray((diff**2).mean()), (pred,), lambda g: (g * 2.0 * diff / n,), "mse_loss")


def bce_with_logits_loss(logit: Tensor, label) -> Tensor:
    """Mean binary cross-entropy evaluated directly on logits."""
    logit = as_tensor(logit)
    y = np.asarray(label, dtype=DTYPE).reshape(logit.shape)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("bce labels must be 0 or 1")
    z = logit.data
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    p = _stable_sigmoid(z)
    return make_op(np.asarray(per.mean()), (logit,), lambda g: (g * (p - y) / n,), "bce_with_logits")
