"""Iterative leaky integrate-and-fire neurons with a rectangle surrogate gradient.

One step of the neuron reads::

    U  = H_prev + x
    S  = Theta(U - V_th)            # Theta(0) = 1
    H  = tau * U * (1 - S) + V_reset * S

``tau`` is a multiplicative decay factor, not a time constant in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError


@dataclass(frozen=True)
class LifConfig:
    tau: float = 0.25
    v_th: float = 0.5
    v_reset: float = 0.0
    a: float = 1.0
    # stop gradients flowing through the reset branch of H
    detach_reset: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not self.v_th > self.v_reset:
            raise ValueError("v_th must exceed v_reset")
        if self.v_th <= 0:
            raise ValueError("v_th must be positive")
        if self.a <= 0:
            raise ValueError("surrogate width a must be positive")


@dataclass
class LifState:
    h: np.ndarray

    @classmethod
    def rest(cls, shape, cfg: LifConfig) -> "LifState":
        return cls(np.full(shape, float(cfg.v_reset)))


@dataclass
class LifTape:
    """Membrane potentials and spikes recorded by :func:`lif_sequence`."""

    u: np.ndarray  # [T, ...]
    s: np.ndarray  # [T, ...]
    cfg: LifConfig


def heaviside(u):
    """1.0 where ``u >= 0`` else 0.0 (fires on the boundary)."""
    out = (np.asarray(u) >= 0).astype(np.float64)
    return out if out.ndim else float(out)


def lif_step(state: LifState, x: np.ndarray, cfg: LifConfig = LifConfig()):
    """Advance one time step; return ``(new_state, spikes)``."""
    x = np.asarray(x, dtype=np.float64)
    if state.h.shape != x.shape:
        raise ShapeError(f"state shape {state.h.shape} != input shape {x.shape}")
    u = state.h + x
    s = heaviside(u - cfg.v_th)
    h = np.where(s > 0, cfg.v_reset, cfg.tau * u)
    return LifState(h), s


def lif_sequence(inputs, cfg: LifConfig = LifConfig(), h0=None, return_tape: bool = False):
    """Run the neuron over axis 0 of ``inputs`` [T, ...] and return the spikes.

    With ``return_tape=True`` also returns the :class:`LifTape` needed by
    :func:`lif_backward`.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 0 or inputs.shape[0] == 0:
        raise ValueError("lif_sequence needs at least one time step")
    steps = inputs.shape[0]
    h = np.full(inputs.shape[1:], float(cfg.v_reset)) if h0 is None else np.array(h0, dtype=np.float64)
    if h.shape != inputs.shape[1:]:
        raise ShapeError(f"h0 shape {h.shape} != per-step input shape {inputs.shape[1:]}")
    u_all = np.empty_like(inputs)
    s_all = np.empty_like(inputs)
    for t in range(steps):
        u = h + inputs[t]
        s = (u >= cfg.v_th).astype(np.float64)
        h = np.where(s > 0, cfg.v_reset, cfg.tau * u)
        u_all[t] = u
        s_all[t] = s
    if return_tape:
        return s_all, LifTape(u_all, s_all, cfg)
    return s_all


def surrogate_grad(u, cfg: LifConfig = LifConfig()):
    """Rectangle window: ``1/a`` where ``|u - v_th| < a/2`` (strict), else 0."""
    out = (np.abs(np.asarray(u, dtype=np.float64) - cfg.v_th) < cfg.a / 2) / cfg.a
    return out if np.ndim(out) else float(out)


def lif_backward(tape: LifTape, grad_spikes, grad_state=None) -> np.ndarray:
    """Backpropagate through time; return dL/d(input) for every step.

    ``grad_spikes`` [T, ...] is the upstream gradient on the spikes and
    ``grad_state`` an optional gradient on the final post-reset potential.
    The reset branch is differentiated through the same surrogate, so
    ``dH/dU = tau*(1-S) + (V_reset - tau*U) * surrogate(U)`` unless
    ``detach_reset`` is set.
    """
    grad_spikes = np.asarray(grad_spikes, dtype=np.float64)
    if grad_spikes.shape != tape.u.shape:
        raise ShapeError(f"grad shape {grad_spikes.shape} does not match tape {tape.u.shape}")
    cfg = tape.cfg
    gh = np.zeros(tape.u.shape[1:]) if grad_state is None else np.asarray(grad_state, dtype=np.float64)
    out = np.empty_like(grad_spikes)
    for t in range(tape.u.shape[0] - 1, -1, -1):
        u, s = tape.u[t], tape.s[t]
        sg = (np.abs(u - cfg.v_th) < cfg.a / 2) / cfg.a
        dh_du = cfg.tau * (1.0 - s)
        if not cfg.detach_reset:
            dh_du = dh_du + (cfg.v_reset - cfg.tau * u) * sg
        gu = grad_spikes[t] * sg + gh * dh_du
        out[t] = gu
        gh = gu
    return out
