"""Property-based checks of the invariants each module promises."""

import math
from fractions import Fraction

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spikeres import TDBN, LifConfig, SpikeRecord, Tape, Tensor, lif_unroll, ops, precision
from spikeres.arch import BlockKind, NetworkSpec, StageSpec, build_network, cifar_spec, count_flops
from spikeres.autograd import no_tape
from spikeres.diagnostics import energy
from spikeres.diagnostics.isometry import operator_oracle, phi_moments
from spikeres.diagnostics.ssim import ssim
from spikeres.diagnostics.unavailing import state_change_monte_carlo, state_change_probability

from conftest import fd_grad, tiny_spec

seeds = st.integers(0, 2 ** 16)
slow = settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.too_slow])


def _smooth_graph(x, w, b):
    h = ops.linear(x, w, b)
    h = ops.mul(h, h)
    h = ops.add(h, ops.scale(ops.linear(x, w), 0.5))
    return ops.sum(ops.mean(h, axis=0))


@given(seeds)
def test_fd_matches_tape_for_smooth_graphs(seed):
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        x = Tensor(rng.standard_normal((3, 4)))
        w = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal(5), requires_grad=True)
        with Tape() as tape:
            g = tape.backward(_smooth_graph(x, w, b))
        f = lambda: _smooth_graph(x, w, b)  # noqa: E731
        for p in (w, b):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            num = fd_grad(f, p, idx, 1e-5)
            assert abs(num - g[p][idx]) <= 1e-4 * max(1.0, abs(num))


@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
    x = Tensor(rng.standard_normal((2, 3)).astype(np.float32))

    def grads(ca, cb):
        with Tape() as tape:
            y = ops.linear(x, w)
            l1 = ops.sum(ops.mul(y, y))
            l2 = ops.sum(y)
            return tape.backward(ops.add(ops.scale(l1, ca), ops.scale(l2, cb)))[w]

    combo = grads(a, b)
    sep = a * grads(1.0, 0.0) + b * grads(0.0, 1.0)
    assert np.allclose(combo, sep, rtol=1e-5, atol=1e-4)


@slow
@given(seeds, st.sampled_from([k.value for k in BlockKind]))
def test_forward_and_gradients_deterministic(seed, kind):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)

    def run():
        model = build_network(tiny_spec(kind), seed=seed % 7, gamma2_zero=False)
        with Tape() as tape:
            out = model.forward(x)
            g = tape.backward(ops.sum(out))
        return out.data, [g[p] for p in model.parameters() if p in g]

    (o1, g1), (o2, g2) = run(), run()
    assert o1.tobytes() == o2.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


@slow
@given(seeds, st.sampled_from([k.value for k in BlockKind]))
def test_spikes_are_binary_everywhere(seed, kind):
    rng = np.random.default_rng(seed)
    model = build_network(tiny_spec(kind, T=3), seed=seed % 5, gamma2_zero=False)
    rec = SpikeRecord()
    with no_tape():
        model.forward(rng.standard_normal((2, 3, 8, 8)).astype(np.float32) * 3, record=rec)
    assert rec.layers
    for bits in rec.layers.values():
        assert bits.dtype == bool


@given(st.integers(1, 8), st.integers(1, 6))
def test_zero_input_never_fires(T, n):
    spikes, trace = lif_unroll([Tensor(np.zeros(n, np.float32))] * T, LifConfig())
    assert not any(s.data.any() for s in spikes)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 5)), elements=st.floats(-1, 1)),
       st.floats(0.05, 1.0, exclude_max=True), st.floats(0.1, 2.0))
def test_membrane_bound_without_firing(xs, tau, m):
    cfg = LifConfig(v_th=1e9, tau_mem=tau)
    with precision(np.float64):
        _, trace = lif_unroll([Tensor(m * row) for row in xs], cfg)
    bound = m / (1 - tau)
    assert all(np.all(np.abs(u.data) <= bound * (1 + 1e-12)) for u in trace.membranes)


@slow
@given(seeds, st.floats(0.5, 3.0), st.floats(-1, 1), st.integers(1, 3))
def test_tdbn_output_statistics(seed, gamma, beta, T):
    rng = np.random.default_rng(seed)
    bn = TDBN(2, LifConfig())
    bn.gamma.data[:] = gamma
    bn.beta.data[:] = beta
    x = (rng.standard_normal((256 * T, 2, 2, 2)) * rng.uniform(0.5, 5) + rng.uniform(-3, 3)).astype(np.float32)
    out = bn(Tensor(x)).data
    assert np.allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-2)
    assert np.allclose(out.std(axis=(0, 2, 3)), gamma * 0.5, rtol=1e-2)


@slow
@given(seeds, st.integers(1, 2), st.sampled_from(["ms", "ms-without-path-lif", "sr-c"]))
def test_identity_at_init(seed, n, kind):
    rng = np.random.default_rng(seed)
    model = build_network(tiny_spec(kind, n=n), seed=seed, gamma2_zero=True)
    cap = []
    with no_tape():
        model.forward(rng.standard_normal((2, 3, 8, 8)).astype(np.float32) * 2, capture=cap)
    for blk, x, y in cap:
        if blk.downsamples:
            with no_tape():
                ref = blk.shortcut(x).data
        else:
            ref = x.data
        assert y.data.tobytes() == ref.tobytes()


@slow
@given(seeds, st.floats(0.05, 0.95), st.integers(1, 6))
def test_vanilla_identity_propagation(seed, v_th, T):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(kind="vanilla", stages=(StageSpec(2, 4, 1),), stem_width=4, input_size=4,
                       lif=LifConfig(v_th=v_th, timesteps=T))
    model = build_network(spec, seed=seed, gamma2_zero=True)
    x = (rng.random((T * 2, 4, 4, 4)) < 0.4).astype(np.float32)
    with no_tape():
        for blk in model.blocks:
            assert np.array_equal(blk(Tensor(x), T).data, x)


@given(st.integers(1, 100))
def test_depth_bookkeeping(n):
    assert cifar_spec(n).weighted_layers == 6 * n + 2


@slow
@given(st.floats(0.1, 2.0), st.floats(0.0, 1.0), seeds)
def test_unavailing_analytic_vs_monte_carlo(sigma, p_fire, seed):
    mc = state_change_monte_carlo(sigma, LifConfig(), p_fire, draws=200_000, seed=seed)
    exact = state_change_probability(sigma, LifConfig(), p_fire)
    se = math.sqrt(max(exact * (1 - exact), 1e-12) / mc.draws)
    assert abs(mc.value - exact) <= 3 * se + 1e-12


@given(st.integers(1, 40), st.floats(0.1, 10.0))
def test_phi_identity_and_scaling(dim, c):
    est = phi_moments(lambda v: v, dim, probes=4, rmatvec=lambda w: w)
    assert est.phi == 1.0 and est.phi_var == 0.0
    mv, rm, m = operator_oracle(c * np.eye(dim))
    assert math.isclose(phi_moments(mv, m, 4, rm).phi, c * c, rel_tol=1e-12)


@given(hnp.arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 1)),
       hnp.arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 1)))
def test_ssim_symmetry_and_self(x, y):
    assert ssim(x, x) == 1.0
    if x.shape == y.shape:
        assert math.isclose(ssim(x, y), ssim(y, x), rel_tol=1e-12, abs_tol=1e-15)
        assert -1.0 <= ssim(x, y) <= 1.0 + 1e-12


@given(st.integers(1, 10 ** 10), st.integers(0, 1000), st.integers(1, 8))
def test_uniform_rate_syops_exact(flops, permille, T):
    rate = permille / 1000
    rep = energy.energy_from_rate(flops, rate, T)
    assert rep.syops == flops * T * rate
    if rate > 0:
        assert rep.ratio == (flops * energy.E_MAC) / (rep.syops * energy.E_AC)


@slow
@given(seeds, st.integers(1, 3))
def test_rate_and_literal_syops_agree(seed, T):
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(kind="ms", stages=(StageSpec(1, 4, 1), StageSpec(1, 6, 1)), stem_width=4, input_size=4,
                       path_kernel=1, lif=LifConfig(timesteps=T), num_classes=2)
    model = build_network(spec, seed=seed, gamma2_zero=False)
    convs = [c for c in model.convs() if c.category == "residual-path"]
    for c in convs:
        c.keep_input = True
    with no_tape():
        model.forward(rng.standard_normal((3, 3, 4, 4)).astype(np.float32))
    macs = {n: m for n, _, m in count_flops(model).layers}
    for c in convs:
        x = c.last_input
        assert energy.exact_rate_syops(macs[c.name], int(np.count_nonzero(x)), x.size, T) == Fraction(
            energy._literal_accumulates(c, x), 3)


@slow
@given(seeds)
def test_lr_zero_step_is_noop(seed):
    from spikeres.data import separable_spike_dataset
    from spikeres.train import TrainConfig, train
    model = build_network(tiny_spec("ms", classes=2), seed=seed)
    before = [p.data.copy() for p in model.parameters()]
    stats = [bn.running_mean.copy() for bn in model.bns()]
    train(model, separable_spike_dataset(10, size=8, seed=seed), TrainConfig(epochs=1, lr=0.0, batch_size=10))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
    assert any(not np.array_equal(s, bn.running_mean) for s, bn in zip(stats, model.bns()))
