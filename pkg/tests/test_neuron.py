import numpy as np
import pytest
from scipy import integrate

from spikeres import LIF, TDBN, LifConfig, SpikeRecord, Tape, Tensor, lif_step, lif_unroll, ops, surrogate_grad
from spikeres.neuron import UninitializedStatsError, consistent_surrogate, tdbn

from conftest import fd_grad, rel_err, tape_grads

CFG = LifConfig()


def step(u_prev, x, cfg=CFG):
    u_prev = None if u_prev is None else Tensor(np.array([u_prev], np.float32))
    u_next, s, u = lif_step(u_prev, Tensor(np.array([x], np.float32)), cfg)
    return float(u_next.data[0]), float(s.data[0]), float(u.data[0])


def test_defaults():
    assert (CFG.v_th, CFG.v_reset, CFG.tau_mem, CFG.timesteps, CFG.a) == (0.5, 0.0, 0.25, 6, 1.0)


@pytest.mark.parametrize("kw", [{"tau_mem": 0.0}, {"tau_mem": 1.5}, {"a": 0.0}, {"timesteps": 0}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        LifConfig(**kw)


def test_step_fires_and_resets():
    assert step(0.0, 0.6)[:2] == (0.0, 1.0)


def test_step_leak():
    u_next, s, _ = step(0.4, 0.0)
    assert s == 0.0 and np.isclose(u_next, 0.1)


def test_step_leak_with_input_below_threshold():
    # 0.25 * 0.4 + 0.2 = 0.3: the leak keeps this below threshold
    u_next, s, u = step(0.4, 0.2)
    assert s == 0.0 and np.isclose(u, 0.3, atol=1e-7)


@pytest.mark.parametrize("u_prev,x", [(0.0, 0.5), (1.2, 0.2)])
def test_step_threshold_inclusive(u_prev, x):
    u_next, s, u = step(u_prev, x)
    assert u == 0.5 and s == 1.0 and u_next == 0.0


def test_step_shape_mismatch():
    with pytest.raises(ops.ShapeError):
        lif_step(Tensor(np.zeros(3)), Tensor(np.zeros(2)), CFG)


def test_surrogate_values():
    assert surrogate_grad(np.array([0.5]), CFG)[0] == 1.0
    assert surrogate_grad(np.array([1.01]), CFG)[0] == 0.0
    assert surrogate_grad(np.array([1.0, 0.0]), CFG).tolist() == [1.0, 1.0]


@pytest.mark.parametrize("a", [0.25, 1.0, 3.0])
def test_surrogate_integrates_to_one(a):
    cfg = LifConfig(a=a)
    val, _ = integrate.quad(lambda u: float(surrogate_grad(np.array([u]), cfg)[0]), -5, 6,
                            points=[0.5 - a / 2, 0.5 + a / 2], limit=200)
    assert abs(val - 1.0) < 1e-6


def test_unroll_constant_subthreshold():
    spikes, trace = lif_unroll([Tensor(np.array([0.3], np.float32))] * 8, CFG)
    us = [float(m.data[0]) for m in trace.membranes]
    assert np.allclose(us[:4], [0.3, 0.375, 0.39375, 0.3984375], atol=1e-7)
    assert all(u < 0.4 + 1e-7 for u in us)
    assert all(float(s.data[0]) == 0.0 for s in spikes)


def test_unroll_fires_every_step():
    spikes, trace = lif_unroll([Tensor(np.array([0.5], np.float32))] * 5, CFG)
    assert [float(s.data[0]) for s in spikes] == [1.0] * 5
    assert [float(m.data[0]) for m in trace.membranes] == [0.5] * 5


def test_unroll_zero_input():
    spikes, trace = lif_unroll([Tensor(np.zeros(4, np.float32))] * 6, CFG)
    assert all(not s.data.any() for s in spikes)
    assert all(not m.data.any() for m in trace.membranes)


def test_unroll_empty():
    with pytest.raises(ValueError):
        lif_unroll([], CFG)


def test_unroll_backprop_through_membrane():
    # subthreshold: spike at t=2 depends on input at t=0 through tau
    xs = [Tensor(np.array([0.3], np.float32), requires_grad=True) for _ in range(3)]
    with Tape() as tape:
        spikes, _ = lif_unroll(xs, CFG)
        g = tape.backward(ops.sum(spikes[2]))
    assert np.isclose(g[xs[0]][0], 0.25 ** 2)
    assert np.isclose(g[xs[2]][0], 1.0)


def test_unroll_consistent_fd(f64, rng):
    cfg = LifConfig(timesteps=5, a=1.0)
    xs = [Tensor(rng.uniform(-0.2, 0.6, size=(6,)), requires_grad=True) for _ in range(5)]
    w = rng.standard_normal((5, 6))

    def f():
        spikes, _ = lif_unroll(xs, cfg)
        return ops.sum(ops.mul(ops.stack(spikes), Tensor(w)))

    with consistent_surrogate():
        grads = tape_grads(f, xs)
        # step sizes small enough not to cross a reset or clamp kink
        for t in range(5):
            for i in range(6):
                assert rel_err(grads[t][i], fd_grad(f, xs[t], (i,), 1e-7), floor=1e-6) < 1e-4


def test_tdbn_output_std_is_vth(rng):
    bn = TDBN(3, CFG)
    xs = [Tensor(rng.standard_normal((64, 3, 4, 4)).astype(np.float32)) for _ in range(4)]
    out = np.stack([o.data for o in tdbn(xs, bn)])
    std = out.transpose(2, 0, 1, 3, 4).reshape(3, -1).std(axis=1)
    assert np.allclose(std, 0.5, atol=1e-3)


def test_tdbn_constant_input_zero(rng):
    bn = TDBN(2, CFG)
    x = np.ones((4, 2, 3, 3), np.float32) * np.array([3.0, -1.0], np.float32)[None, :, None, None]
    out = bn(Tensor(x)).data
    assert np.allclose(out, 0.0, atol=1e-6)


def test_tdbn_gamma_zero_gives_beta(rng):
    bn = TDBN(3, CFG)
    bn.gamma.data[:] = 0
    bn.beta.data[:] = [0.1, -0.2, 0.3]
    out = bn(Tensor(rng.standard_normal((5, 3, 2, 2)).astype(np.float32))).data
    assert np.array_equal(out, np.broadcast_to(bn.beta.data[None, :, None, None], out.shape))


def test_tdbn_stats_and_eval(rng):
    bn = TDBN(2, CFG)
    bn.gamma.data[:] = [2.0, 0.5]
    bn.beta.data[:] = [0.3, -0.1]
    x = rng.standard_normal((300, 2, 3, 3)).astype(np.float32) * 4 + 1
    out = bn(Tensor(x)).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), [0.3, -0.1], atol=1e-2)
    assert np.allclose(out.std(axis=(0, 2, 3)), [1.0, 0.25], atol=1e-2)
    assert bn.updates == 1 and np.all(bn.running_var >= 0)


def test_tdbn_eval_before_update():
    bn = TDBN(2, CFG)
    bn.training = False
    with pytest.raises(UninitializedStatsError):
        bn(Tensor(np.zeros((2, 2, 1, 1))))


def test_tdbn_vth_mismatch():
    with pytest.raises(ValueError):
        tdbn([Tensor(np.zeros((2, 1, 1, 1)))], TDBN(1, CFG), LifConfig(v_th=1.0))


def test_lif_layer_records_binary(rng):
    rec = SpikeRecord()
    layer = LIF(CFG, name="l0")
    x = Tensor(rng.standard_normal((3 * 4, 2, 3, 3)).astype(np.float32))
    out = layer(x, 3, rec)
    assert out.shape == x.shape
    assert rec.layers["l0"].shape == (3, 4, 2, 3, 3)
    assert set(np.unique(out.data)) <= {0.0, 1.0}
    assert 0.0 <= layer.last_occupancy <= 1.0


def test_spike_record_rejects_non_binary():
    with pytest.raises(ValueError):
        SpikeRecord().add("x", np.array([0.0, 0.5]), "path")
