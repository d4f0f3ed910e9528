"""Global SSIM between firing-rate maps, and the per-block radar built from it."""

from __future__ import annotations

import csv
from typing import Optional

import numpy as np

from ..arch import Model
from ..autograd import Tensor, no_tape
from ..neuron import LIF

C1 = 0.01 ** 2
C2 = 0.03 ** 2


def ssim(x, y, c1: float = C1, c2: float = C2) -> float:
    """Structural similarity of two maps computed over the whole map (no window)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    mx, my = x.mean(), y.mean()
    dx, dy = x - mx, y - my
    vx, vy = (dx * dx).mean(), (dy * dy).mean()
    cov = (dx * dy).mean()
    return float((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))


def ssim_direct(x, y, c1: float = C1, c2: float = C2) -> float:
    """Same statistic with explicit Python sums (test oracle)."""
    xs = [float(v) for v in np.ravel(x)]
    ys = [float(v) for v in np.ravel(y)]
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    vx = sum((a - mx) ** 2 for a in xs) / n
    vy = sum((b - my) ** 2 for b in ys) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(xs, ys)) / n
    return (2 * mx * my + c1) * (2 * cov + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def rate_map(spikes: np.ndarray, timesteps: int) -> np.ndarray:
    """Per-neuron firing rate over batch and time from a (T*N, C, H, W) stack."""
    s = np.asarray(spikes, dtype=np.float64)
    return s.reshape((timesteps, -1) + s.shape[1:]).mean(axis=(0, 1))


def _as_spikes(block, t: Tensor, timesteps: int) -> np.ndarray:
    """Spiking trunks already carry spikes; membrane-domain trunks are read
    through a fresh LIF with the block's neuron constants."""
    if block.kind.spiking_trunk:
        return t.data
    return LIF(block.lif_mid.cfg, "probe")(t, timesteps).data


def ssim_radar(model: Model, batch, timesteps: Optional[int] = None) -> list:
    """One SSIM per residual block: firing map of the block output with vs
    without its residual path (equal to the block input for identity shortcuts)."""
    T = timesteps or model.spec.timesteps
    capture: list = []
    rows = []
    with no_tape(), model.frozen_stats():
        model.forward(batch, T, capture=capture)
        for i, (blk, x_in, out) in enumerate(capture):
            before = blk(x_in, T, residual=False)
            a = rate_map(_as_spikes(blk, before, T), T)
            b = rate_map(_as_spikes(blk, out, T), T)
            rows.append({"block": i, "name": blk.name, "ssim": ssim(a, b)})
    return rows


def write_radar_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "name", "ssim"])
        for r in rows:
            w.writerow([r["block"], r["name"], repr(float(r["ssim"]))])
