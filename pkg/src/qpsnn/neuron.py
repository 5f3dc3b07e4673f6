"""Leaky integrate-and-fire dynamics with hard reset, and the triangular surrogate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class LifParams:
    tau: float = 0.5
    theta: float = 1.0
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise InvalidArgumentError(f"tau must be in [0, 1), got {self.tau}")
        if not self.theta > 0.0:
            raise InvalidArgumentError(f"theta must be positive, got {self.theta}")
        if not self.surrogate_width > 0.0:
            raise InvalidArgumentError(f"surrogate width must be positive, got {self.surrogate_width}")

    def to_dict(self):
        return {"tau": self.tau, "theta": self.theta, "surrogate_width": self.surrogate_width}


@dataclass
class LifLayerState:
    """Per-step history of one LIF layer; leading axis is time."""

    u_pre: np.ndarray
    spikes: np.ndarray
    u_post: np.ndarray

    @property
    def steps(self):
        return self.u_pre.shape[0]


def lif_step(params: LifParams, u_prev, input_current):
    """Advance one time step. Returns ``(u_pre, spikes, u_post)``."""
    u_prev = np.asarray(u_prev, dtype=np.float64)
    input_current = np.asarray(input_current, dtype=np.float64)
    if u_prev.shape != input_current.shape:
        raise InvalidArgumentError(
            f"membrane shape {u_prev.shape} does not match input shape {input_current.shape}"
        )
    u_pre = params.tau * u_prev + input_current
    spikes = (u_pre >= params.theta).astype(np.float64)
    u_post = u_pre * (1.0 - spikes)
    return u_pre, spikes, u_post


def run_lif(params: LifParams, currents) -> LifLayerState:
    """Drive a layer with ``currents[t]`` for each t, starting from rest (U[0] = 0)."""
    currents = np.asarray(currents, dtype=np.float64)
    u = np.zeros(currents.shape[1:])
    u_pre = np.empty_like(currents)
    spikes = np.empty_like(currents)
    u_post = np.empty_like(currents)
    for t in range(currents.shape[0]):
        u_pre[t], spikes[t], u = lif_step(params, u, currents[t])
        u_post[t] = u
    return LifLayerState(u_pre, spikes, u_post)


def surrogate_grad(params: LifParams, u_pre):
    """Triangular window ``(1/a) * max(a - |u - theta|, 0)``."""
    a = params.surrogate_width
    u_pre = np.asarray(u_pre, dtype=np.float64)
    return np.maximum(a - np.abs(u_pre - params.theta), 0.0) / a
