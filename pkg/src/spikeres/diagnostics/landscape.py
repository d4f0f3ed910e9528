"""Two-dimensional loss surfaces along filter-normalised random directions."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ..autograd import no_tape


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    loss: np.ndarray  # (len(alphas), len(betas)); +inf where the loss was not finite
    center_loss: float
    seed: int
    cosine: float = 0.0  # |<delta, eta>| / (|delta| |eta|) after orthogonalisation
    meta: dict = field(default_factory=dict)

    def rows(self) -> list:
        return [{"alpha": float(a), "beta": float(b), "loss": float(self.loss[i, j])}
                for i, a in enumerate(self.alphas) for j, b in enumerate(self.betas)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "beta", "loss"])
            for r in self.rows():
                w.writerow([repr(r["alpha"]), repr(r["beta"]), repr(r["loss"])])


def filter_normalized_direction(params: Sequence[np.ndarray], rng: np.random.Generator) -> list:
    """Gaussian direction rescaled filter by filter to the matching parameter
    filter's norm. 1-D tensors (BN scales and shifts, biases) get zero."""
    out = []
    for p in params:
        d = rng.standard_normal(p.shape)
        if p.ndim <= 1:
            out.append(np.zeros(p.shape))
            continue
        pf = p.reshape(p.shape[0], -1).astype(np.float64)
        df = d.reshape(p.shape[0], -1)
        dn = np.linalg.norm(df, axis=1, keepdims=True)
        pn = np.linalg.norm(pf, axis=1, keepdims=True)
        df *= pn / np.where(dn > 0, dn, 1.0)
        out.append(df.reshape(p.shape))
    return out


def _dot(a: list, b: list) -> float:
    return float(sum(np.vdot(x, y) for x, y in zip(a, b)))


def orthogonalize(delta: list, eta: list) -> list:
    """Remove eta's component along delta (one Gram-Schmidt step)."""
    dd = _dot(delta, delta)
    if dd == 0.0:
        return eta
    c = _dot(eta, delta) / dd
    return [e - c * d for e, d in zip(eta, delta)]


def cosine(a: list, b: list) -> float:
    na, nb = math.sqrt(_dot(a, a)), math.sqrt(_dot(b, b))
    return abs(_dot(a, b)) / (na * nb) if na > 0 and nb > 0 else 0.0


def axis(resolution: int = 21, span: float = 1.0) -> np.ndarray:
    """Symmetric grid whose middle entry is exactly 0."""
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if resolution == 1:
        return np.zeros(1)
    half = (resolution - 1) / 2
    return np.array([span * (i - half) / half for i in range(resolution)])


def scan(params: Sequence[np.ndarray], loss_fn: Callable[[list], float], delta: list, eta: list,
         alphas, betas, seed: int = 0) -> LandscapeGrid:
    """Evaluate ``loss_fn(theta + a*delta + b*eta)`` on the grid.

    The (0, 0) cell (and the reported centre) is evaluated on the original
    arrays, so it equals the unperturbed loss bit for bit.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    base = [np.asarray(p) for p in params]
    center = float(loss_fn(base))
    grid = np.empty((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            if a == 0.0 and b == 0.0:
                val = center
            else:
                moved = [(p + a * d + b * e).astype(p.dtype) for p, d, e in zip(base, delta, eta)]
                try:
                    val = float(loss_fn(moved))
                except FloatingPointError:
                    val = math.inf
            grid[i, j] = val if math.isfinite(val) else math.inf
    return LandscapeGrid(alphas, betas, grid, center, seed, cosine(delta, eta))


def loss_landscape(model, data, labels, resolution: int = 21, span: Optional[float] = None,
                   seed: int = 0, timesteps: Optional[int] = None, batch_size: int = 100) -> LandscapeGrid:
    """Loss surface of ``model`` around its current weights on a fixed subset."""
    from ..train import evaluate_loss

    named = model.named_parameters()
    tensors = [t for _, t in named]
    originals = [t.data.copy() for t in tensors]
    if span is None:
        span = 1.5 if model.spec.weighted_layers > 56 else 1.0
    rng = np.random.default_rng(seed)
    delta = filter_normalized_direction(originals, rng)
    eta = orthogonalize(delta, filter_normalized_direction(originals, rng))

    def loss_fn(values):
        for t, v in zip(tensors, values):
            t.data = v
        with no_tape(), np.errstate(all="ignore"):
            return evaluate_loss(model, data, labels, timesteps=timesteps, batch_size=batch_size)

    try:
        with model.frozen_stats():
            grid = scan(originals, loss_fn, delta, eta, axis(resolution, span), axis(resolution, span), seed)
    finally:
        for t, v in zip(tensors, originals):
            t.data = v
    grid.meta = {"span": span, "resolution": resolution, "samples": int(len(labels))}
    return grid
