"""Iterative LIF neurons, the rectangular surrogate gradient and TDBN."""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autograd import Tensor, as_tensor, get_dtype

_mode = threading.local()


@dataclass(frozen=True)
class LifConfig:
    """Neuron constants shared by every spiking layer of a model."""

    v_th: float = 0.5
    v_reset: float = 0.0
    tau_mem: float = 0.25
    timesteps: int = 6
    a: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau_mem <= 1.0:
            raise ValueError(f"tau_mem must lie in (0, 1], got {self.tau_mem}")
        if self.a <= 0.0:
            raise ValueError(f"surrogate width a must be positive, got {self.a}")
        if int(self.timesteps) != self.timesteps or self.timesteps < 1:
            raise ValueError(f"timesteps must be a positive integer, got {self.timesteps}")

    def with_timesteps(self, timesteps: int) -> "LifConfig":
        return replace(self, timesteps=int(timesteps))


@contextlib.contextmanager
def consistent_surrogate(enabled: bool = True):
    """Replace the hard gate by its piecewise-linear relaxation.

    Inside this context the spike is ``clamp((u - v_th)/a + 1/2, 0, 1)``,
    whose derivative is exactly the rectangular surrogate. Gradients on the
    tape then equal true derivatives, which is what gradient checks need.
    """
    previous = getattr(_mode, "consistent", False)
    _mode.consistent = enabled
    try:
        yield
    finally:
        _mode.consistent = previous


def consistent_mode() -> bool:
    return getattr(_mode, "consistent", False)


def surrogate_grad(u, cfg: LifConfig) -> np.ndarray:
    """``(1/a) * 1[|u - v_th| <= a/2]`` elementwise."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u)
    dt = u.dtype.type if np.issubdtype(u.dtype, np.floating) else np.float64
    inside = np.abs(u - dt(cfg.v_th)) <= dt(cfg.a / 2)
    return inside.astype(u.dtype if np.issubdtype(u.dtype, np.floating) else np.float64) / dt(cfg.a)


def spike_gate(u, cfg: LifConfig) -> Tensor:
    """Heaviside forward (inclusive threshold) with the surrogate backward."""
    th = cfg.v_th
    if consistent_mode():
        def forward(x):
            return np.clip((x - th) / cfg.a + 0.5, 0.0, 1.0)
    else:
        def forward(x):
            return (x >= x.dtype.type(th)).astype(x.dtype)
    return ops.custom_node(u, forward, lambda x: surrogate_grad(x, cfg), name="spike_gate")


def lif_step(u_prev, synaptic_input, cfg: LifConfig):
    """One LIF update; returns ``(state_carried_to_next_step, spike, membrane)``.

    ``membrane`` is the pre-reset potential ``tau*u_prev + input``. Neurons that
    fired carry exactly ``v_reset`` forward; the reset is a constant selection
    so no gradient flows through it.
    """
    x = as_tensor(synaptic_input)
    if u_prev is None:
        u = x
        if cfg.v_reset != 0.0:
            u = ops.add(x, Tensor(np.full(x.shape, cfg.v_reset * cfg.tau_mem)))
    else:
        u_prev = as_tensor(u_prev)
        if u_prev.shape != x.shape:
            raise ops.ShapeError(f"lif_step: membrane {u_prev.shape} vs input {x.shape}")
        u = ops.add(ops.scale(u_prev, cfg.tau_mem), x)
    spike = spike_gate(u, cfg)
    fired = u.data >= u.dtype.type(cfg.v_th)
    u_next = ops.masked_fill(u, fired, cfg.v_reset)
    return u_next, spike, u


@dataclass
class LifTrace:
    """What a LIF unroll leaves behind besides its spikes."""

    membranes: list
    fired: list

    def window_occupancy(self, cfg: LifConfig) -> float:
        """Fraction of membrane values inside the surrogate window."""
        inside = sum(float(surrogate_grad(m.data, cfg).astype(bool).sum()) for m in self.membranes)
        total = sum(m.size for m in self.membranes)
        return inside / total if total else 0.0


def lif_unroll(inputs: Sequence, cfg: LifConfig):
    """Run a LIF layer over ``len(inputs)`` timesteps starting from ``v_reset``.

    Returns ``(spikes, trace)``; both gradient paths (the membrane recurrence
    and the surrogate gate) are recorded on the active tape.
    """
    if len(inputs) == 0:
        raise ValueError("lif_unroll needs at least one timestep")
    shape = as_tensor(inputs[0]).shape
    spikes, membranes, fired = [], [], []
    state = None
    for x in inputs:
        x = as_tensor(x)
        if x.shape != shape:
            raise ops.ShapeError(f"lif_unroll: timestep shapes differ ({shape} vs {x.shape})")
        state, s, u = lif_step(state, x, cfg)
        spikes.append(s)
        membranes.append(u)
        fired.append(u.data >= u.dtype.type(cfg.v_th))
    return spikes, LifTrace(membranes, fired)


@dataclass
class SpikeRecord:
    """Per-layer binary spike trains captured during a forward pass.

    ``layers`` maps a layer name to a bool array of shape (T, N, ...).
    ``roles`` tags each layer (stem, first, second, output, terminal, ...).
    """

    layers: dict = field(default_factory=dict)
    roles: dict = field(default_factory=dict)
    occupancy: dict = field(default_factory=dict)

    def add(self, name: str, spikes: np.ndarray, role: str, occupancy: Optional[float] = None):
        s = np.asarray(spikes)
        if s.dtype != bool:
            if not np.isin(s, (0, 1)).all():
                raise ValueError(f"layer {name}: spike record must be binary")
            s = s.astype(bool)
        self.layers[name] = s
        self.roles[name] = role
        if occupancy is not None:
            self.occupancy[name] = occupancy

    def __len__(self) -> int:
        return len(self.layers)


# -- TDBN -------------------------------------------------------------------

class UninitializedStatsError(RuntimeError):
    pass


class TDBN:
    """Threshold-dependent batch norm over a (T*N, C, H, W) stack.

    Statistics pool batch, time and spatial axes jointly; the affine part is
    ``gamma * v_th * x_hat + beta``.
    """

    def __init__(self, channels: int, cfg: LifConfig, eps: float = 1e-5, momentum: float = 0.1,
                 name: str = "bn"):
        if eps <= 0:
            raise ValueError("eps must be positive")
        dt = get_dtype()
        self.channels = channels
        self.cfg = cfg
        self.eps = eps
        self.momentum = momentum
        self.name = name
        self.gamma = Tensor(np.ones(channels, dt), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dt), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dt)
        self.running_var = np.ones(channels, dt)
        self.updates = 0
        self.training = True

    def parameters(self):
        return [self.gamma, self.beta]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if self.training:
            out, mu, var = ops.batch_norm(x, self.gamma, self.beta, scale_factor=self.cfg.v_th, eps=self.eps)
            m = x.size // x.shape[1]
            unbiased = var * (m / (m - 1))
            k = self.momentum
            self.running_mean = ((1 - k) * self.running_mean + k * mu).astype(self.running_mean.dtype)
            self.running_var = ((1 - k) * self.running_var + k * unbiased).astype(self.running_var.dtype)
            self.updates += 1
            return out
        if self.updates == 0:
            raise UninitializedStatsError(f"{self.name}: eval mode before any running-stat update")
        return ops.batch_norm(x, self.gamma, self.beta, scale_factor=self.cfg.v_th, eps=self.eps,
                              stats=(self.running_mean, self.running_var))


def tdbn(sequential_inputs: Sequence, params: TDBN, cfg: Optional[LifConfig] = None) -> list:
    """TDBN applied to a list of T NCHW tensors; returns T tensors."""
    if cfg is not None and cfg.v_th != params.cfg.v_th:
        raise ValueError(f"TDBN built for v_th={params.cfg.v_th}, called with v_th={cfg.v_th}")
    xs = [as_tensor(x) for x in sequential_inputs]
    n = xs[0].shape[0]
    stacked = ops.reshape(ops.stack(xs), (len(xs) * n,) + xs[0].shape[1:])
    out = params(stacked)
    return ops.unstack(ops.reshape(out, (len(xs), n) + xs[0].shape[1:])) if len(xs) > 1 else [
        ops.reshape(out, xs[0].shape)]


class LIF:
    """Spiking layer over a time-major (T*N, ...) stack."""

    def __init__(self, cfg: LifConfig, name: str = "lif", role: str = "path"):
        self.cfg = cfg
        self.name = name
        self.role = role
        self.last_occupancy: Optional[float] = None

    def __call__(self, x, timesteps: int, record: Optional[SpikeRecord] = None) -> Tensor:
        x = as_tensor(x)
        n = x.shape[0] // timesteps
        steps = x.reshape((timesteps, n) + x.shape[1:])
        parts = ops.unstack(steps) if timesteps > 1 else [ops.reshape(steps, x.shape)]
        spikes, trace = lif_unroll(parts, self.cfg)
        self.last_occupancy = trace.window_occupancy(self.cfg)
        if record is not None:
            bits = np.stack([s.data for s in spikes])
            if consistent_mode():
                bits = np.stack(trace.fired)
            record.add(self.name, bits, self.role, self.last_occupancy)
        if timesteps == 1:
            return spikes[0]
        return ops.reshape(ops.stack(spikes), x.shape)
