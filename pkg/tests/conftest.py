import numpy as np
import pytest
from hypothesis import settings

from spikeres import Tape, Tensor, precision
from spikeres.arch import NetworkSpec, StageSpec, cifar_spec
from spikeres.neuron import LifConfig

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def tape_grads(fn, params):
    """Gradients of the scalar ``fn()`` w.r.t. ``params`` via the tape."""
    with Tape() as tape:
        loss = fn()
        g = tape.backward(loss)
    return [g[p] for p in params]


def fd_grad(fn, param, index, h):
    """Central difference of scalar ``fn()`` in one entry of ``param``."""
    old = param.data[index]
    param.data[index] = old + h
    up = float(fn().item())
    param.data[index] = old - h
    down = float(fn().item())
    param.data[index] = old
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def tiny_spec(kind="ms", n=1, T=2, widths=(4, 8, 16), size=8, classes=3, **kw):
    return cifar_spec(n, kind, lif=LifConfig(timesteps=T), widths=widths, input_size=size,
                      num_classes=classes, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def spikes(rng, shape, p=0.3):
    return (rng.random(shape) < p).astype(np.float32)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
