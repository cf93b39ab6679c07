"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def numeric_partial(loss_fn: Callable[[], float], p: Tensor, idx: tuple[int, ...], eps: float = 1e-6) -> float:
    """d loss / d p[idx] by central differences; ``p`` is restored afterwards."""
    old = p.data[idx].copy()
    p.data[idx] = old + eps
    up = loss_fn()
    p.data[idx] = old - eps
    down = loss_fn()
    p.data[idx] = old
    return (up - down) / (2 * eps)


def check(build_loss: Callable[[], Tensor], params: Sequence[Tensor], rng: np.random.Generator,
          samples: int = 3, eps: float = 1e-6) -> float:
    """Largest relative error between autodiff and finite differences.

    ``build_loss`` rebuilds the scalar loss graph from the current parameter
    values. ``samples`` random entries of each parameter are probed.
    """
    for p in params:
        p.grad = None
    build_loss().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        return build_loss().item()

    worst = 0.0
    for p, g in zip(params, analytic):
        for _ in range(samples):
            idx = tuple(int(rng.integers(n)) for n in p.shape)
            num = numeric_partial(value, p, idx, eps)
            worst = max(worst, rel_err(float(g[idx]), num))
    return worst
