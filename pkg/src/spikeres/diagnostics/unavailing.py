"""How often a vanilla block's residual path fails to flip any firing state."""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Optional

import numpy as np

from ..arch import BlockKind, Model
from ..autograd import Tensor, no_tape
from ..neuron import LifConfig

_STD = NormalDist()


class NotApplicableError(ValueError):
    """The diagnostic is meaningless for this block kind."""


def state_change_probability(sigma_x: float, cfg: LifConfig = LifConfig(), p_fire: float = 0.5) -> float:
    """P(state change) for residual output ~ N(0, sigma_x^2), decay ignored.

    A silent shortcut neuron flips when the residual alone crosses V_th; a
    firing one flips when the residual pulls 1 + F below V_th.
    """
    if sigma_x < 0:
        raise ValueError("sigma_x must be non-negative")
    if not 0.0 <= p_fire <= 1.0:
        raise ValueError("p_fire must lie in [0, 1]")
    th = cfg.v_th
    if sigma_x == 0.0:
        # degenerate residual: F = 0 exactly
        return (1 - p_fire) * float(0.0 >= th) + p_fire * float(1.0 < th)
    down = _STD.cdf((th - 1.0) / sigma_x)
    up = 1.0 - _STD.cdf(th / sigma_x)
    return p_fire * down + (1.0 - p_fire) * up


@dataclass
class MonteCarloEstimate:
    value: float
    stderr: float
    draws: int


def state_change_monte_carlo(sigma_x: float, cfg: LifConfig = LifConfig(), p_fire: float = 0.5,
                             draws: int = 1_000_000, seed: int = 0, decay: bool = False) -> MonteCarloEstimate:
    """Sample shortcut spikes and residual outputs and count flipped states.

    With ``decay`` each draw also carries a leaked membrane ``tau * u_prev``
    from one preceding step (zero if that step fired), the term the closed
    form leaves out.
    """
    rng = np.random.default_rng(seed)
    o = rng.random(draws) < p_fire
    f = rng.normal(0.0, sigma_x, draws)
    u = f + o
    u_ident = o.astype(np.float64)
    if decay:
        o_prev = rng.random(draws) < p_fire
        u_prev = rng.normal(0.0, sigma_x, draws) + o_prev
        carried = np.where(u_prev >= cfg.v_th, cfg.v_reset, u_prev)
        # the identity neuron would have seen only its own shortcut history
        carried_id = np.where(o_prev, cfg.v_reset, o_prev.astype(np.float64))
        u = u + cfg.tau_mem * carried
        u_ident = u_ident + cfg.tau_mem * carried_id
    flipped = (u >= cfg.v_th) != (u_ident >= cfg.v_th)
    value = float(flipped.mean())
    return MonteCarloEstimate(value, math.sqrt(max(value * (1 - value), 1e-300) / draws), draws)


def block_unavailing_rate(block, x, timesteps: int) -> float:
    """1 - fraction of (neuron, t) spikes that differ with vs without the residual path."""
    if block.kind is not BlockKind.VANILLA:
        raise NotApplicableError(
            f"unavailing rate applies to vanilla blocks; {block.kind.value} shortcuts carry "
            "membrane-domain input, so every residual contribution accumulates")
    with no_tape():
        x = x if isinstance(x, Tensor) else Tensor(x)
        on = block(x, timesteps).data
        off = block(x, timesteps, residual=False).data
    return 1.0 - float(np.mean(on != off))


def unavailing_block_rate(model: Model, batch, timesteps: Optional[int] = None) -> list:
    """Per-block unavailing rate along an actual forward pass (vanilla models only)."""
    if model.spec.kind is not BlockKind.VANILLA:
        raise NotApplicableError(
            f"unavailing rate is defined for vanilla models, not {model.spec.kind.value}")
    T = timesteps or model.spec.timesteps
    capture: list = []
    rates = []
    with no_tape(), model.frozen_stats():
        model.forward(batch, T, capture=capture)
        for blk, x_in, _ in capture:
            rates.append({"block": blk.name, "rate": block_unavailing_rate(blk, x_in, T)})
    return rates
