"""Reverse-mode versus central-difference gradient comparison."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ParameterError
from .tensor import Tensor


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
    n_coords: int = 100,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """Largest relative error over a seeded sample of parameter coordinates.

    ``f`` must rebuild its graph from ``params`` on every call. At least
    ``n_coords`` coordinates are sampled (all of them if there are fewer).
    Each error is ``|a - n| / max(|a|, |n|, floor * g_max)`` where ``g_max``
    is the largest sampled analytic gradient: finite differences cannot
    resolve components many orders below the gradient's own scale. Both
    gradients exactly zero gives zero error.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ParameterError("epsilon must lie in [1e-7, 1e-3]")
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, n_coords, replace=False))
    owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    a_vals, n_vals = [], []
    for k, pi in zip(flat, owner):
        p = params[pi]
        idx = np.unravel_index(k - offsets[pi], p.shape)
        orig = p.data[idx]
        p.data[idx] = orig + epsilon
        up = f().item()
        p.data[idx] = orig - epsilon
        down = f().item()
        p.data[idx] = orig
        a_vals.append(analytic[pi][idx])
        n_vals.append((up - down) / (2 * epsilon))
    a = np.array(a_vals)
    n = np.array(n_vals)
    diff = np.abs(a - n)
    if not diff.any():
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * np.abs(a).max())
    denom = np.where(denom > 0, denom, 1.0)
    return float((diff / denom).max())
