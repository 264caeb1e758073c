"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import nn
from .tensor import Tensor, relu, sigmoid


@dataclass
class GradcheckReport:
    name: str
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def finite_difference_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    wrt: Optional[Sequence[int]] = None,
    max_coords: Optional[int] = None,
    floor: float = 1e-6,
    seed: int = 0,
    name: str = "",
) -> GradcheckReport:
    """Compare backprop gradients of scalar ``op(*tensors)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps coordinates with (near) zero gradient from dividing by noise.
    ``max_coords`` samples that many coordinates per input instead of all.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    leaves = [Tensor(a.copy(), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    loss = op(*leaves)
    if loss.data.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued op")
    loss.backward()

    def value(arrs):
        return float(op(*[Tensor(a) for a in arrs]).data)

    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        flat_idx = np.arange(arrays[i].size)
        if max_coords is not None and max_coords < flat_idx.size:
            flat_idx = np.sort(rng.choice(flat_idx, size=max_coords, replace=False))
        for k in flat_idx:
            pos = [a.copy() for a in arrays]
            neg = [a.copy() for a in arrays]
            pos[i].flat[k] += eps
            neg[i].flat[k] -= eps
            numeric = (value(pos) - value(neg)) / (2 * eps)
            a = analytic.flat[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            count += 1
    return GradcheckReport(name=name, max_rel_err=float(worst), n_checked=count, tol=tol)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x) + 0.0


def op_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> List[GradcheckReport]:
    """Gradient checks for every differentiable primitive of the engine."""
    rng = np.random.default_rng(seed)
    w_out = rng.standard_normal

    def weighted(fn, out_shape):
        # contract with fixed random weights so every output coordinate matters
        r = w_out(out_shape)
        return lambda *ts: (fn(*ts) * r).sum()

    cases = []

    x = rng.standard_normal((2, 3, 6, 6))
    k = rng.standard_normal((4, 3, 3, 3))
    cases.append(("conv2d s1p1", weighted(lambda a, b: nn.conv2d(a, b, 1, 1), (2, 4, 6, 6)), [x, k]))
    cases.append(("conv2d s2p1", weighted(lambda a, b: nn.conv2d(a, b, 2, 1), (2, 4, 3, 3)), [x, k]))
    k1 = rng.standard_normal((5, 3, 1, 1))
    cases.append(("conv2d 1x1 s2", weighted(lambda a, b: nn.conv2d(a, b, 2, 0), (2, 5, 3, 3)), [x, k1]))

    xr = _away_from_zero(rng, (3, 7))
    cases.append(("relu", weighted(relu, (3, 7)), [xr]))

    xn = rng.standard_normal((2, 4, 5, 5))
    sc, sh = rng.standard_normal(4), rng.standard_normal(4)

    def norm_train(a, s, b):
        return nn.channel_norm(a, s, b, True, np.zeros(4), np.ones(4))

    def norm_infer(a, s, b):
        return nn.channel_norm(a, s, b, False, np.full(4, 0.3), np.full(4, 1.7))

    cases.append(("channel_norm train", weighted(norm_train, (2, 4, 5, 5)), [xn, sc, sh]))
    cases.append(("channel_norm infer", weighted(norm_infer, (2, 4, 5, 5)), [xn, sc, sh]))
    cases.append(("global_avg_pool", weighted(nn.global_avg_pool, (2, 4)), [xn]))

    xl = rng.standard_normal((3, 5))
    wl = rng.standard_normal((2, 5))
    bl = rng.standard_normal(2)
    cases.append(("linear", weighted(nn.linear, (3, 2)), [xl, wl, bl]))
    cases.append(("linear no bias", weighted(nn.linear, (3, 2)), [xl, wl]))
    cases.append(("sigmoid", weighted(sigmoid, (3, 5)), [xl]))
    cases.append(("mse_loss", lambda p: nn.mse_loss(p, np.arange(6.0).reshape(2, 3)), [xl[:2, :3]]))
    labels = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
    cases.append(("bce_with_logits", lambda z: nn.bce_with_logits_loss(z, labels), [xl[0]]))
    cases.append(("mul/add/sub", lambda a, b: ((a * b + a) - b * b).sum(), [xl, xl[::-1].copy()]))
    cases.append(("matmul", weighted(lambda a, b: a @ b, (3, 2)), [xl, wl.T.copy()]))
    cases.append(("take_rows", weighted(lambda a: a[np.array([2, 0, 2])], (3, 5)), [xl]))

    return [
        finite_difference_check(fn, ins, eps=eps, tol=tol, name=name, seed=seed) for name, fn, ins in cases
    ]
