"""Hutchinson estimates of the first two spectral moments of block Jacobians.

For a block Jacobian ``J`` (m outputs), ``phi = tr(J J^T)/m`` and
``phi_var = tr((J J^T)^2)/m - phi^2``. Both only need matrix-free products,
which the tape supplies (``vjp`` for ``J^T u``, forward replay for ``J v``).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..arch import BlockKind, Model
from ..autograd import Tape, Tensor, get_dtype, no_tape


@dataclass
class PhiEstimate:
    phi: float
    phi_var: float
    phi_stderr: float
    second_moment: float
    probes: int
    partial: bool = False


def _probe(rng, shape, kind):
    if kind == "rademacher":
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    if kind == "gaussian":
        return rng.standard_normal(shape)
    raise ValueError(f"unknown probe distribution {kind!r}")


def phi_moments(matvec: Callable, dim: int, probes: int = 4096, rmatvec: Optional[Callable] = None,
                seed: int = 0, distribution: str = "rademacher", batch: int = 1,
                time_budget: Optional[float] = None) -> PhiEstimate:
    """Estimate ``phi(A A^T)`` and its variance from products with ``A``.

    ``matvec`` maps a probe of length ``dim`` to ``A v``; ``rmatvec`` gives
    ``A^T w`` and is needed for the second moment (``||A^T A v||^2``). When
    ``batch > 1`` both are called on (dim, batch) blocks of probes.
    Rademacher probes make the estimate exact for orthogonal-scaled ``A``;
    Gaussian probes are available for the textbook estimator.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    first, second = [], []
    start = time.monotonic()
    done = 0
    partial = False
    while done < probes:
        b = min(batch, probes - done)
        v = _probe(rng, (dim, b) if batch > 1 else (dim,), distribution)
        av = np.asarray(matvec(v), dtype=np.float64)
        if av.ndim == 1:
            av = av[:, None]
        if (batch > 1 and av.shape[1] != b):
            raise ValueError("matvec changed the number of probes")
        first.extend((av ** 2).sum(axis=0) / dim)
        if rmatvec is not None:
            aav = np.asarray(rmatvec(av if batch > 1 else av[:, 0]), dtype=np.float64)
            if aav.ndim == 1:
                aav = aav[:, None]
            if aav.shape[0] != dim:
                raise ValueError(f"rmatvec returned length {aav.shape[0]}, expected {dim}")
            second.extend((aav ** 2).sum(axis=0) / dim)
        done += b
        if time_budget is not None and time.monotonic() - start > time_budget and done < probes:
            partial = True
            break
    first = np.asarray(first)
    phi = float(first.mean())
    se = float(first.std(ddof=1) / math.sqrt(len(first))) if len(first) > 1 else 0.0
    if second:
        m2 = float(np.mean(second))
        var = max(m2 - phi * phi, 0.0)
    else:
        m2, var = float("nan"), float("nan")
    return PhiEstimate(phi, var, se, m2, int(done), partial)


def phi_of_matrix(j: np.ndarray) -> tuple:
    """Exact (phi, phi_var) of J J^T normalised by the output dimension."""
    a = j @ j.T
    m = a.shape[0]
    phi = np.trace(a) / m
    return float(phi), float(np.trace(a @ a) / m - phi ** 2)


class DimensionError(ValueError):
    pass


def operator_oracle(j: np.ndarray):
    """matvec/rmatvec pair for the moments of J J^T (probes live in output space)."""
    m, n = j.shape

    def matvec(u):
        if u.shape[0] != m:
            raise DimensionError(f"probe length {u.shape[0]} != {m}")
        return j.T @ u

    def rmatvec(w):
        return j @ w

    return matvec, rmatvec, m


# -- per-block reports ------------------------------------------------------

@dataclass
class BlockIsometry:
    block: str
    kind: str
    downsample: bool
    phi: float
    phi_var: float
    phi_stderr: float
    phi_path: float
    phi_shortcut: float
    gamma2_sq: float
    occupancy: Optional[float]
    predicted: float
    probes: int
    partial: bool = False
    error: str = ""

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class IsometryReport:
    blocks: list = field(default_factory=list)
    probes: int = 0
    omega: Optional[float] = None
    tau: Optional[float] = None
    lam: Optional[int] = None

    @property
    def partial(self) -> bool:
        return any(b.partial or b.error for b in self.blocks)

    def rows(self) -> list:
        return [b.as_row() for b in self.blocks]

    def summary(self) -> dict:
        return {"blocks": len(self.blocks), "probes": self.probes, "omega": self.omega,
                "tau": self.tau, "lambda": self.lam, "partial": self.partial}


def shallow_equivalent_depth(num_blocks: int, tau: float, one_minus_omega: float = 0.0,
                             tol: float = 1e-3) -> Optional[int]:
    """Smallest lambda < L with both C(L, lambda) tau^lambda and
    C(L, lambda) |1 - omega|^lambda below ``tol``; None if none qualifies."""
    for lam in range(1, num_blocks):
        c = math.comb(num_blocks, lam)
        if c * tau ** lam < tol and c * abs(one_minus_omega) ** lam < tol:
            return lam
    return None


def _block_moments(fn, x: np.ndarray, probes: int, seed: int, distribution: str,
                   time_budget: Optional[float]) -> PhiEstimate:
    """phi of J J^T for ``out = fn(x)``, J taken at ``x``."""
    with Tape() as tape:
        leaf = Tensor(x, requires_grad=True)
        out = fn(leaf)
        if out.uid == leaf.uid or out._tape is not tape:
            # the map is the identity on its input
            dim = out.size
            return phi_moments(lambda u: u, dim, probes, lambda w: w, seed, distribution)
        dim = out.size

        def matvec(u):
            return tape.vjp([out], [u.reshape(out.shape)], [leaf])[0].ravel()

        def rmatvec(w):
            return tape.jvp([leaf], [w.reshape(leaf.shape)], [out])[0].ravel()

        return phi_moments(matvec, dim, probes, rmatvec, seed, distribution, time_budget=time_budget)


def isometry_report(model: Model, batch, probes: int = 4096, timesteps: Optional[int] = None,
                    seed: int = 0, distribution: str = "rademacher", path_probes: Optional[int] = None,
                    time_budget: Optional[float] = None) -> IsometryReport:
    """Measured block moments next to their analytic predictions.

    Jacobians are of each block's full-T output with respect to its input
    stack, through the surrogate-gradient graph. Predictions: MS-like blocks
    ``1 + gamma^2 phi~`` (``phi~`` is measured with gamma folded in, so
    ``1 + phi_path``); vanilla blocks ``(p/a^2) (1 + phi_path)`` with ``p`` the
    measured surrogate-window occupancy of the output LIF. Downsample blocks
    have no identity shortcut, so the leading 1 becomes the measured
    shortcut moment ``phi_shortcut``.
    """
    T = timesteps or model.spec.timesteps
    a = model.spec.lif.a
    capture: list = []
    with no_tape(), model.frozen_stats():
        model.forward(batch, T, capture=capture)
    report = IsometryReport(probes=probes)
    path_probes = path_probes or max(probes // 4, 64)
    with model.frozen_stats():
        for i, (blk, x_in, _) in enumerate(capture):
            x = np.asarray(x_in.data, dtype=get_dtype())
            end = blk.path_end_bn()
            g2 = float(np.mean(end.gamma.data.astype(np.float64) ** 2)) if end is not None else 1.0
            row = dict(block=blk.name, kind=blk.kind.value, downsample=blk.downsamples, gamma2_sq=g2)
            try:
                est = _block_moments(lambda t: blk(t, T), x, probes, seed + i, distribution, time_budget)
                if blk.kind is BlockKind.PLAIN:
                    phi_path = est.phi
                else:
                    path_est = _block_moments(lambda t: blk.path(t, T), x, path_probes, seed + 1000 + i,
                                              distribution, time_budget)
                    phi_path = path_est.phi
                phi_sc = 1.0
                if blk.downsamples:
                    phi_sc = _block_moments(blk.shortcut, x, path_probes, seed + 2000 + i,
                                            distribution, time_budget).phi
                occ = None
                if blk.kind is BlockKind.VANILLA:
                    with no_tape():
                        blk(Tensor(x), T)
                    occ = blk.lif_out.last_occupancy
                    predicted = occ / a ** 2 * (phi_sc + phi_path)
                elif blk.kind is BlockKind.PLAIN:
                    phi_sc = 0.0
                    predicted = est.phi
                else:
                    predicted = phi_sc + phi_path
                report.blocks.append(BlockIsometry(phi=est.phi, phi_var=est.phi_var, phi_stderr=est.phi_stderr,
                                                   phi_path=phi_path, phi_shortcut=phi_sc, occupancy=occ,
                                                   predicted=predicted, probes=est.probes, partial=est.partial,
                                                   **row))
            except MemoryError as exc:
                report.blocks.append(BlockIsometry(phi=float("nan"), phi_var=float("nan"), phi_stderr=float("nan"),
                                                   phi_path=float("nan"), phi_shortcut=float("nan"), occupancy=None, predicted=float("nan"),
                                                   probes=0, partial=True, error=f"out of memory: {exc}", **row))
    good = [b for b in report.blocks if not b.error and not b.downsample]
    if good:
        # phi = omega + tau * phi~, with phi_path already carrying the gamma^2 factor
        report.omega = float(np.mean([b.phi - b.phi_path for b in good]))
        report.tau = float(np.mean([b.gamma2_sq for b in good]))
        report.lam = shallow_equivalent_depth(len(report.blocks), report.tau, 1.0 - report.omega)
    return report
