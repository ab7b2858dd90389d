"""Finite-difference oracle and gradient-of-gradient-norm helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, grad, no_grad, sqrt, tsum, mul


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate.

    ``f`` receives a float64 array shaped like ``x`` and returns a number (or
    a single-element Tensor).
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)

    def call(arr):
        v = f(arr)
        return float(v.data.reshape(-1)[0]) if isinstance(v, Tensor) else float(v)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = call(base)
        flat[i] = orig - h
        lo = call(base)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return out.reshape(base.shape)


@dataclass
class PenaltyGrad:
    """Result of :func:`grad_norm_penalty_grad`."""

    grads: list
    norm: float
    degenerate: bool


def grad_norm_penalty_grad(
    loss_fn: Callable[[Tensor], Tensor],
    x: Tensor,
    params: Sequence[Tensor],
    mode: str = "finite-diff",
    h: float = 1e-4,
) -> PenaltyGrad:
    """d/dθ of ``||dL/dx||_2`` where ``L = loss_fn(x)`` closes over ``params``.

    ``exact`` differentiates the gradient graph a second time. ``finite-diff``
    uses ``(∇θ L(x + h u) - ∇θ L(x)) / h`` with ``u = ∇x L / ||∇x L||``; when
    the input gradient is identically zero the direction is undefined and
    zero gradients are returned with ``degenerate=True``.
    """
    params = list(params)
    x = as_tensor(x)
    if mode not in ("exact", "finite-diff"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "exact":
        loss = loss_fn(x)
        (gx,) = grad(loss, [x], create_graph=True, allow_unused=True)
        norm_t = sqrt(tsum(mul(gx, gx)))
        norm = float(norm_t.data)
        if norm == 0.0 or not norm_t.requires_grad:
            return PenaltyGrad([np.zeros(p.shape) for p in params], norm, True)
        gs = grad(norm_t, params, allow_unused=True)
        return PenaltyGrad([g.data for g in gs], norm, False)

    loss = loss_fn(x)
    gx, *g0 = grad(loss, [x] + params, allow_unused=True)
    norm = float(np.sqrt((gx.data ** 2).sum()))
    if norm == 0.0:
        return PenaltyGrad([np.zeros(p.shape) for p in params], 0.0, True)
    u = gx.data / norm
    shifted = Tensor(x.data + h * u, requires_grad=x.requires_grad)
    g1 = grad(loss_fn(shifted), params, allow_unused=True)
    return PenaltyGrad([(a.data - b.data) / h for a, b in zip(g1, g0)], norm, False)
