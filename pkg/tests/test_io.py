import struct

import numpy as np
import pytest

from spikeres.arch import build_network
from spikeres.checkpoint import MAGIC, CheckpointError, load_checkpoint, restore_model, save_checkpoint
from spikeres.config import (ConfigError, apply_overrides, config_hash, data_sources, dump_config, load_config,
                             network_spec, parse_config, train_config)
from spikeres.data import (Augment, DataFormatError, Dataset, DatasetSource, batches, load_cifar_binary,
                           load_event_frames, load_idx, normalize, read_idx, template_dataset, write_event_frames,
                           write_idx)
from spikeres.diagnostics.energy import model_firing_stats

from conftest import tiny_spec


# -- IDX -----------------------------------------------------------------------

def test_idx_header_contract(tmp_path):
    p = tmp_path / "img.idx"
    with open(p, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, 10000, 28, 28))
        fh.write(bytes(10000 * 28 * 28))
    assert read_idx(p).shape == (10000, 28, 28)


def test_idx_roundtrip_with_labels(tmp_path, rng):
    imgs = rng.integers(0, 256, (7, 5, 4), dtype=np.uint8)
    labs = np.array([0, 1, 2, 3, 4, 5, 9], np.uint8)
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", labs)
    x, y = load_idx(tmp_path / "i", tmp_path / "l")
    assert x.shape == (7, 1, 5, 4) and np.array_equal(x[:, 0], imgs)
    assert y.dtype == np.int64 and y.tolist() == labs.tolist()


def test_idx_errors(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">I", 0x00000804) + bytes(20))
    with pytest.raises(DataFormatError, match="magic"):
        read_idx(bad)
    short = tmp_path / "short"
    short.write_bytes(struct.pack(">IIII", 0x00000803, 2, 3, 3) + bytes(5))
    with pytest.raises(DataFormatError, match="truncated"):
        read_idx(short)
    write_idx(tmp_path / "i", np.zeros((2, 2, 2), np.uint8))
    write_idx(tmp_path / "l", np.array([1, 12], np.uint8))
    with pytest.raises(DataFormatError, match="out of range"):
        load_idx(tmp_path / "i", tmp_path / "l", num_classes=10)


# -- CIFAR binary ----------------------------------------------------------------

def _cifar_bytes(labels, rng):
    recs = []
    planes = []
    for lab in labels:
        px = rng.integers(0, 256, 3072, dtype=np.uint8)
        recs.append(bytes([lab]) + px.tobytes())
        planes.append(px.reshape(3, 32, 32))
    return b"".join(recs), np.stack(planes)


def test_cifar_record_arithmetic():
    assert 30_730_000 // 3073 == 10000 and 30_730_000 % 3073 == 0


def test_cifar_plane_order(tmp_path, rng):
    raw, planes = _cifar_bytes([3, 7, 0], rng)
    (tmp_path / "b.bin").write_bytes(raw)
    x, y = load_cifar_binary(tmp_path / "b.bin")
    assert y.tolist() == [3, 7, 0]
    assert np.array_equal(x, planes)
    # first pixel bytes are R, then 1024 bytes later G
    assert x[0, 0, 0, 0] == raw[1] and x[0, 1, 0, 0] == raw[1 + 1024]


def test_cifar_errors(tmp_path, rng):
    raw, _ = _cifar_bytes([1], rng)
    (tmp_path / "t.bin").write_bytes(raw[:-1])
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path / "t.bin")
    (tmp_path / "l.bin").write_bytes(bytes([11]) + raw[1:])
    with pytest.raises(DataFormatError, match="out of range"):
        load_cifar_binary(tmp_path / "l.bin")


def test_normalize_pixel():
    x = normalize(np.full((1, 1, 2, 2), 255, np.uint8), (0.5,), (0.5,))
    assert np.all(x == 1.0)
    y = normalize(np.zeros((1, 3, 1, 1), np.uint8), (0.5, 0.25, 0.0), (0.5, 0.25, 1.0))
    assert y.ravel().tolist() == [-1.0, -1.0, 0.0]


def test_cifar_source(tmp_path, rng):
    raw, _ = _cifar_bytes(list(range(10)) * 2, rng)
    (tmp_path / "b.bin").write_bytes(raw)
    ds = DatasetSource(kind="cifar-binary", path=str(tmp_path / "b.bin"), subset=10).load()
    assert len(ds) == 10 and sorted(ds.y.tolist()) == list(range(10))
    assert ds.x.dtype == np.float32


# -- event frames ----------------------------------------------------------------

def test_event_frames_roundtrip_bit_identical(tmp_path, rng):
    frames = rng.standard_normal((3, 6, 2, 4, 4)).astype(np.float32)
    labels = np.array([0, 9, 4])
    write_event_frames(tmp_path / "e.evfr", frames, labels)
    ev = load_event_frames(tmp_path / "e.evfr", timesteps=6)
    assert ev.frames.tobytes() == frames.tobytes()
    assert ev.labels.tolist() == [0, 9, 4] and ev.timesteps == 6 and len(ev) == 3
    raw = (tmp_path / "e.evfr").read_bytes()
    assert raw[:4] == b"EVFR" and struct.unpack("<6I", raw[4:28]) == (1, 3, 6, 2, 4, 4)


def test_event_frames_errors(tmp_path):
    write_event_frames(tmp_path / "e", np.zeros((1, 4, 1, 2, 2), np.float32), np.array([0]))
    with pytest.raises(DataFormatError, match="T=4"):
        load_event_frames(tmp_path / "e", timesteps=6)
    (tmp_path / "x").write_bytes(b"EVFX" + bytes(40))
    with pytest.raises(DataFormatError, match="magic"):
        load_event_frames(tmp_path / "x")
    raw = (tmp_path / "e").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-6])
    with pytest.raises(DataFormatError, match="truncated"):
        load_event_frames(tmp_path / "t")


def test_event_frames_feed_network(tmp_path):
    spec = tiny_spec("vanilla", T=6, size=8)
    spec = type(spec)(**{**spec.__dict__, "in_channels": 2})
    write_event_frames(tmp_path / "z", np.zeros((2, 6, 2, 8, 8), np.float32), np.array([0, 1]))
    src = DatasetSource(kind="event-frames", path=str(tmp_path / "z"), timesteps=6, num_classes=3)
    ds = src.load()
    assert ds.x.shape == (2, 6, 2, 8, 8)
    model = build_network(spec, seed=0)
    assert model_firing_stats(model, ds.x).spikes == 0


# -- datasets and augmentation -----------------------------------------------------

def test_dataset_label_range():
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((2, 1, 1, 1)), np.array([0, 5]), 3)


def test_batches_keep_tail():
    ds = Dataset(np.zeros((7, 1, 2, 2), np.float32), np.arange(7) % 2, 2)
    sizes = [len(y) for _, y in batches(ds, 3)]
    assert sizes == [3, 3, 1]


def test_augmentation_train_only():
    cfg = parse_config("data.crop_pad = 4\ndata.hflip = true\ndata.rotation = 15\n")
    train_src, test_src = data_sources(cfg, 10)
    assert train_src.augment.active and not test_src.augment.active


def test_augment_preserves_shape(rng):
    x = rng.standard_normal((4, 3, 8, 8)).astype(np.float32)
    y = Augment(crop_pad=2, hflip=True, rotation=10)(x, rng)
    assert y.shape == x.shape and not np.array_equal(x, y)
    assert Augment()(x, rng) is x


def test_template_splits_share_classes():
    a = template_dataset(20, 4, size=8, seed=0, sample_seed=0)
    b = template_dataset(20, 4, size=8, seed=0, sample_seed=1)
    ma = np.stack([a.x[a.y == c].mean(axis=0) for c in range(4)])
    mb = np.stack([b.x[b.y == c].mean(axis=0) for c in range(4)])
    assert np.corrcoef(ma.ravel(), mb.ravel())[0, 1] > 0.5
    assert a.digest() != b.digest()


# -- config ------------------------------------------------------------------------

def test_config_parse_and_roundtrip():
    text = "# comment\nmodel.kind = vanilla  # inline\nmodel.depth = 14\ntrain.lr = 0.05\n"
    cfg = parse_config(text)
    assert cfg == {"model.kind": "vanilla", "model.depth": "14", "train.lr": "0.05"}
    assert parse_config(dump_config(cfg)) == cfg
    assert config_hash(cfg) == config_hash(dict(reversed(list(cfg.items()))))


@pytest.mark.parametrize("text", ["model.kind vanilla", "kind = ms", "model.kind = a\nmodel.kind = b",
                                  "model.colour = red", "optim.lr = 1"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_overrides():
    cfg = apply_overrides({"train.lr": "0.1"}, ["train.lr=0.2", "model.depth = 8"])
    assert cfg == {"train.lr": "0.2", "model.depth": "8"}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["noequals"])


def test_shipped_configs():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    t6 = load_config(root / "depth_analysis.cfg")
    c6 = train_config(t6)
    assert (c6.lr, c6.batch_size, c6.momentum, c6.weight_decay, c6.epochs, c6.milestones, c6.beta) == (
        0.1, 100, 0.9, 0.0, 100, (40, 60, 80), 0.2)
    assert network_spec(t6).weighted_layers == 20
    t7 = load_config(root / "alternatives.cfg")
    c7 = train_config(t7)
    assert (c7.schedule, c7.weight_decay, c7.label_smoothing, c7.dropout) == ("cosine", 1e-4, 0.1, 0.2)


def test_invalid_model_section():
    with pytest.raises(ConfigError):
        network_spec({"model.kind": "ms", "model.depth": "9"})
    with pytest.raises(ConfigError):
        train_config({"train.lr": "fast"})


# -- checkpoint --------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, rng):
    from spikeres.train import SGD
    model = build_network(tiny_spec("sr-b"), seed=3)
    model.forward(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    model.bns()[0].running_mean[:] = 0.25
    opt = SGD(model.named_parameters())
    opt.buffers = {n: np.full(p.shape, 0.5, np.float32) for n, p in model.named_parameters()}
    g = np.random.default_rng(9)
    g.random(3)
    save_checkpoint(tmp_path / "m.spkr", model, opt, 7, g, meta={"note": "x"})
    raw = (tmp_path / "m.spkr").read_bytes()
    assert raw[:4] == MAGIC and struct.unpack("<I", raw[4:8])[0] == 1
    ck = load_checkpoint(tmp_path / "m.spkr")
    assert ck.epoch == 7 and ck.meta["note"] == "x" and ck.spec == model.spec
    assert ck.rng().random() == g.random()
    back = restore_model(ck)
    for (n, p), (_, q) in zip(model.named_parameters(), back.named_parameters()):
        assert np.array_equal(p.data, q.data), n
    assert back.bns()[0].running_mean[0] == 0.25
    assert set(ck.optimizer) == {n for n, _ in model.named_parameters()}
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    model.eval()
    back.eval()
    assert np.array_equal(model.forward(x).data, back.forward(x).data)


def test_checkpoint_errors(tmp_path):
    model = build_network(tiny_spec(), seed=0)
    save_checkpoint(tmp_path / "m", model)
    raw = (tmp_path / "m").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short")
    (tmp_path / "ver").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver")
    ck = load_checkpoint(tmp_path / "m")
    with pytest.raises(CheckpointError):
        restore_model(ck, tiny_spec(n=2))
