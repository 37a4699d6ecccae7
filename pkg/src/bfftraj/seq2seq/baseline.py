"""Constant-velocity extrapolation."""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError


def constant_velocity_baseline(observed, horizon: int) -> np.ndarray:
    """Extrapolate the last observed displacement ``horizon`` steps ahead.

    ``observed`` is ``(T_obs, 2)`` or batched ``(B, T_obs, 2)``.
    """
    obs = np.asarray(observed, dtype=float)
    if obs.shape[-2] < 2:
        raise ParameterError("constant-velocity baseline needs at least 2 observed positions")
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    last = obs[..., -1:, :]
    v = last - obs[..., -2:-1, :]
    k = np.arange(1, horizon + 1, dtype=float)[:, None]
    return last + k * v
