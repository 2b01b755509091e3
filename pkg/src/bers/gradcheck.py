"""Central finite-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``arr``, perturbed in place."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps components that are zero up to round-off from dominating.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """Worst relative error over every ``requires_grad`` input of ``fn``.

    Non-scalar outputs are reduced with a fixed random projection so that
    every output element contributes to the checked scalar.
    """
    proj: list[np.ndarray] = []

    def scalar() -> Tensor:
        out = fn(*inputs)
        if out.ndim == 0:
            return out
        if not proj:
            proj.append(np.random.default_rng(seed).standard_normal(out.shape))
        return (out * Tensor(proj[0])).sum()

    for t in inputs:
        t.grad = None
    with Tape() as tape:
        loss = scalar()
    backward(loss, tape)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numerical_grad(lambda: scalar().item(), t.data, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ana, num, floor))
    return worst
