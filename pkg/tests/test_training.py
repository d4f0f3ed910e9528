import time

import numpy as np
import pytest

from spikeres import Tape, Tensor, ops
from spikeres.arch import build_network, cifar_spec
from spikeres.checkpoint import load_checkpoint, restore_model, save_checkpoint
from spikeres.data import separable_spike_dataset, template_dataset
from spikeres.neuron import LifConfig
from spikeres.train import (SGD, MissingGradient, TrainConfig, evaluate, loss, lr_at, sgd_step, smoothed_targets,
                            top1, train, two_phase_train)

from conftest import tiny_spec


def one_param(value=0.0):
    return Tensor(np.array([value], np.float32), requires_grad=True)


def test_presets_verbatim():
    d = TrainConfig.depth_analysis()
    assert (d.lr, d.batch_size, d.momentum, d.weight_decay, d.epochs, d.milestones, d.beta) == (
        0.1, 100, 0.9, 0.0, 100, (40, 60, 80), 0.2)
    a = TrainConfig.alternatives()
    assert (a.lr, a.weight_decay, a.schedule, a.epochs) == (0.1, 1e-4, "cosine", 100)


def test_sgd_single_step():
    p = one_param()
    opt = SGD([("p", p)], momentum=0.0)
    opt.step({p: np.ones(1)}, 0.1)
    assert np.isclose(p.data[0], -0.1)


def test_sgd_momentum_second_step():
    p = one_param()
    opt = SGD([("p", p)], momentum=0.9)
    opt.step({p: np.ones(1)}, 0.1)
    before = p.data[0]
    opt.step({p: np.ones(1)}, 0.1)
    assert np.isclose(before - p.data[0], 0.1 * 1.9)


def test_sgd_weight_decay_shrink():
    p = one_param(1.0)
    opt = SGD([("p", p)], momentum=0.0, weight_decay=1e-4)
    for k in range(1, 4):
        opt.step({p: np.zeros(1)}, 0.1)
    assert np.isclose(p.data[0], (1 - 0.1 * 1e-4) ** 3, rtol=1e-7)


def test_sgd_missing_gradient():
    p, q = one_param(), one_param()
    with pytest.raises(MissingGradient):
        SGD([("p", p), ("q", q)]).step({p: np.ones(1)}, 0.1)


def test_sgd_step_helper():
    model = build_network(tiny_spec(), seed=0)
    grads = {p: np.zeros_like(p.data) for p in model.parameters()}
    before = [p.data.copy() for p in model.parameters()]
    sgd_step(model, grads, TrainConfig(lr=0.5))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))


@pytest.mark.parametrize("epoch,want", [(0, 0.1), (39, 0.1), (40, 0.02), (50, 0.02), (65, 0.004), (90, 8e-4)])
def test_multistep(epoch, want):
    assert np.isclose(lr_at(TrainConfig.depth_analysis(), epoch), want)


def test_cosine_endpoints():
    cfg = TrainConfig(schedule="cosine", epochs=10)
    assert lr_at(cfg, 0) == 0.1
    assert abs(lr_at(cfg, 10)) < 1e-12
    assert np.isclose(lr_at(cfg, 5), 0.05)


def test_loss_uniform_logits_is_log_c():
    for s in (0.0, 0.1, 0.5):
        assert np.isclose(loss(np.zeros((3, 10), np.float32), np.array([0, 4, 9]), s).item(), np.log(10), rtol=1e-6)


def test_loss_confident_goes_to_zero():
    vals = [loss(np.array([[c, 0.0, 0.0]], np.float32), np.array([0])).item() for c in (1, 5, 20)]
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-6


def test_loss_smoothing_direct_sum(rng):
    logits = rng.standard_normal((6, 10))
    targets = rng.integers(0, 10, 6)
    got = loss(logits.astype(np.float32), targets, 0.1).item()
    total = 0.0
    for i in range(6):
        m = max(logits[i])
        lse = m + np.log(sum(np.exp(v - m) for v in logits[i]))
        for c in range(10):
            q = 0.9 * (c == targets[i]) + 0.01
            total -= q * (logits[i, c] - lse)
    assert abs(got - total / 6) / (total / 6) < 1e-6


def test_loss_invalid_class():
    with pytest.raises(ValueError):
        loss(np.zeros((1, 3), np.float32), np.array([3]))
    with pytest.raises(ValueError):
        smoothed_targets(np.array([-1]), 3)


def test_top1_ties_lowest_index():
    assert top1(np.array([[1.0, 1.0, 0.0]]), np.array([0])) == 1.0
    assert top1(np.array([[1.0, 1.0, 0.0]]), np.array([1])) == 0.0


def _small_run(seed=0, epochs=2, **kw):
    ds = separable_spike_dataset(40, size=8, seed=seed)
    model = build_network(tiny_spec("ms", classes=2), seed=seed)
    return train(model, ds, TrainConfig(epochs=epochs, batch_size=16, lr=0.05, **kw), test_ds=ds)


def test_lr_zero_keeps_parameters():
    ds = separable_spike_dataset(30, size=8)
    model = build_network(tiny_spec("ms", classes=2), seed=0)
    before = [p.data.copy() for p in model.parameters()]
    init_acc = evaluate(model, ds, use_batch_stats=True)[1]
    res = train(model, ds, TrainConfig(epochs=1, lr=0.0, batch_size=30))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
    assert model.bns()[0].updates == 1
    assert res.metrics[0]["top1"] == init_acc


def test_seeded_determinism():
    a, b = _small_run(3), _small_run(3)
    strip = lambda ms: [{k: v for k, v in m.items() if k != "wall_seconds"} for m in ms]  # noqa: E731
    assert strip(a.metrics) == strip(b.metrics)


def test_metrics_schema(tmp_path):
    ds = separable_spike_dataset(20, size=8)
    model = build_network(tiny_spec("ms", classes=2), seed=0)
    path = tmp_path / "m.csv"
    res = train(model, ds, TrainConfig(epochs=2, batch_size=20), test_ds=ds, metrics_path=path)
    header = path.read_text().splitlines()[0]
    assert header == "epoch,split,loss,top1,lr,wall_seconds,firing_rate"
    assert len(res.metrics) == 4
    assert res.final_metric() == np.mean([m["top1"] for m in res.metrics if m["split"] == "test"])


def test_separable_reaches_full_accuracy():
    ds = separable_spike_dataset(100, size=8, seed=0)
    model = build_network(tiny_spec("ms", n=1, T=2, classes=2), seed=0)
    res = train(model, ds, TrainConfig(epochs=20, batch_size=25, lr=0.1))
    accs = [m["top1"] for m in res.metrics]
    assert max(accs) == 1.0


def test_gradient_reaches_every_parameter(rng):
    model = build_network(tiny_spec("vanilla", classes=3), seed=0, gamma2_zero=False)
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    with Tape() as tape:
        g = tape.backward(loss(model.forward(x), np.array([0, 1, 2, 0])))
    for name, p in model.named_parameters():
        assert np.any(g[p] != 0), name


def test_gradient_reaches_stem_and_classifier_at_gamma2_zero(rng):
    model = build_network(tiny_spec("ms"), seed=0, gamma2_zero=True)
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    with Tape() as tape:
        g = tape.backward(loss(model.forward(x), np.array([0, 1, 2, 0])))
    assert np.any(g[model.stem.weight] != 0)
    assert np.any(g[model.fc.weight] != 0)


def test_dropout_only_in_training(rng):
    model = build_network(tiny_spec(), seed=0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    model.train()
    a = model.forward(x, dropout=0.0).data
    model.eval()
    b = model.forward(x, dropout=0.9, rng=rng).data
    model.train()
    c = model.forward(x, dropout=0.0).data
    assert np.array_equal(a, c) and b.shape == a.shape


def test_checkpoint_resume_bit_identical(tmp_path):
    ds = separable_spike_dataset(32, size=8, seed=1)
    cfg = TrainConfig(epochs=4, batch_size=16, lr=0.05)
    straight = train(build_network(tiny_spec("ms", classes=2), seed=2), ds, cfg)

    model = build_network(tiny_spec("ms", classes=2), seed=2)
    part = train(model, ds, TrainConfig(**{**cfg.to_dict(), "epochs": 2}))
    save_checkpoint(tmp_path / "c.spkr", model, part.optimizer, part.epochs_run, part.rng)
    ck = load_checkpoint(tmp_path / "c.spkr")
    resumed_model = restore_model(ck)
    opt = SGD(resumed_model.named_parameters(), cfg.momentum, cfg.weight_decay)
    opt.load_state(ck.optimizer)
    rest = train(resumed_model, ds, cfg, start_epoch=ck.epoch, optimizer=opt, rng=ck.rng())
    for (_, p), (_, q) in zip(straight.model.named_parameters(), resumed_model.named_parameters()):
        assert np.array_equal(p.data, q.data)
    assert [m["loss"] for m in straight.metrics[2:]] == [m["loss"] for m in rest.metrics]


def test_two_phase(tmp_path):
    ds = separable_spike_dataset(24, size=8)
    model = build_network(tiny_spec("ms", T=4, classes=2), seed=0)
    p1 = TrainConfig(epochs=1, batch_size=12)
    p2 = TrainConfig(epochs=1, batch_size=12, lr=0.01)
    r1, r2 = two_phase_train(model, ds, p1, p2, checkpoint_path=tmp_path / "p1.spkr")
    assert load_checkpoint(tmp_path / "p1.spkr").meta["phase"] == 1
    assert r2.metrics[0]["lr"] == 0.01
    # a T=1 model runs directly at T>1
    out = r1.model.forward(ds.x[:2], timesteps=4)
    assert out.shape == (2, 2)


def test_single_step_unroll_matches_step():
    from spikeres import lif_step, lif_unroll
    x = Tensor(np.array([0.2, 0.7, 0.5], np.float32))
    spikes, _ = lif_unroll([x], LifConfig(timesteps=1))
    _, s, _ = lif_step(None, x, LifConfig(timesteps=1))
    assert np.array_equal(spikes[0].data, s.data)


def test_phase_one_epoch_faster_than_t6():
    ds = template_dataset(20, 3, size=8, seed=0)
    spec = tiny_spec("ms", T=6)

    def epoch_time(T):
        model = build_network(spec, seed=0)
        t0 = time.perf_counter()
        train(model, ds, TrainConfig(epochs=1, batch_size=20, timesteps=T), track_rate=False)
        return time.perf_counter() - t0

    epoch_time(1)
    assert epoch_time(1) < epoch_time(6)
