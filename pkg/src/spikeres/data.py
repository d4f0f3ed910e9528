"""Dataset readers (IDX, CIFAR binary, event-frame container), augmentation,
synthetic sets and batching."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage


class DataFormatError(ValueError):
    pass


CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32

# -- IDX ---------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def read_idx(path) -> np.ndarray:
    """Read an IDX file of unsigned bytes (images 0x803 or labels 0x801)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise DataFormatError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES, 1: IDX_LABELS}.get(a.ndim)
    if magic is None:
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        fh.write(a.tobytes())


def load_idx(images_path, labels_path=None, num_classes: int = 10):
    """Images as (N, 1, H, W) uint8 and labels (N,) int64 (or None)."""
    images = read_idx(images_path)
    if images.ndim != 3:
        raise DataFormatError(f"{images_path}: expected an image file (3 dims), got {images.ndim}")
    images = images[:, None]
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise DataFormatError(f"{labels_path}: expected a label file")
        if len(labels) != len(images):
            raise DataFormatError("image and label counts differ")
        _check_labels(labels, num_classes, labels_path)
        labels = labels.astype(np.int64)
    return images, labels


def _check_labels(labels: np.ndarray, num_classes: int, where) -> None:
    if labels.size and int(labels.max()) >= num_classes:
        raise DataFormatError(f"{where}: label {int(labels.max())} out of range for {num_classes} classes")


# -- CIFAR binary --------------------------------------------------------------

CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


def load_cifar_binary(paths, num_classes: int = 10):
    """Parse 3073-byte records (label byte, then R, G and B 32x32 planes)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD:
            raise DataFormatError(f"{p}: size {len(raw)} is not a whole number of {CIFAR_RECORD}-byte records")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        lab = rec[:, 0]
        _check_labels(lab, num_classes, p)
        labels.append(lab.astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(images), np.concatenate(labels)


def cifar_dir_from_env(var: str = "SPIKERES_CIFAR10") -> Optional[Path]:
    """Directory holding the CIFAR-10 binary batches, if configured and present."""
    d = os.environ.get(var)
    if not d:
        return None
    p = Path(d)
    for sub in (p, p / "cifar-10-batches-bin"):
        if (sub / CIFAR_TRAIN_FILES[0]).exists():
            return sub
    return None


def load_cifar10(directory, split: str = "train"):
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    return load_cifar_binary([Path(directory) / f for f in files])


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """uint8 pixels -> float32 ``(x/255 - mean)/std`` per channel."""
    x = images.astype(np.float32) / np.float32(255.0)
    c = x.shape[1]
    m = np.asarray(mean, np.float32).reshape(1, c, 1, 1) if len(mean) > 1 else np.float32(mean[0])
    s = np.asarray(std, np.float32).reshape(1, c, 1, 1) if len(std) > 1 else np.float32(std[0])
    return (x - m) / s


# -- event frames --------------------------------------------------------------

EVFR_MAGIC = b"EVFR"
EVFR_VERSION = 1


def write_event_frames(path, frames: np.ndarray, labels: np.ndarray) -> None:
    """Container: magic, u32 version, u32 x5 (samples, T, C, H, W), f32 frames, u32 labels."""
    f = np.ascontiguousarray(frames, dtype="<f4")
    if f.ndim != 5:
        raise ValueError("frames must be (samples, T, C, H, W)")
    lab = np.ascontiguousarray(labels, dtype="<u4")
    if lab.shape != (f.shape[0],):
        raise ValueError("one label per sample")
    with open(path, "wb") as fh:
        fh.write(EVFR_MAGIC)
        fh.write(struct.pack("<I", EVFR_VERSION))
        fh.write(struct.pack("<5I", *f.shape))
        fh.write(f.tobytes())
        fh.write(lab.tobytes())


@dataclass
class EventFrameSet:
    frames: np.ndarray  # (samples, T, C, H, W) float32
    labels: np.ndarray

    @property
    def timesteps(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return len(self.labels)


def load_event_frames(path, timesteps: Optional[int] = None, num_classes: Optional[int] = None) -> EventFrameSet:
    raw = Path(path).read_bytes()
    if raw[:4] != EVFR_MAGIC:
        raise DataFormatError(f"{path}: bad event-frame magic {raw[:4]!r}")
    if len(raw) < 28:
        raise DataFormatError(f"{path}: truncated header")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != EVFR_VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    shape = struct.unpack("<5I", raw[8:28])
    n = int(np.prod(shape))
    need = 28 + 4 * n + 4 * shape[0]
    if len(raw) < need:
        raise DataFormatError(f"{path}: truncated payload ({len(raw)} of {need} bytes)")
    frames = np.frombuffer(raw, dtype="<f4", count=n, offset=28).reshape(shape).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<u4", count=shape[0], offset=28 + 4 * n).astype(np.int64)
    if timesteps is not None and shape[1] != timesteps:
        raise DataFormatError(f"{path}: container has T={shape[1]} frames, model expects T={timesteps}")
    if num_classes is not None:
        _check_labels(labels, num_classes, path)
    return EventFrameSet(frames, labels)


# -- in-memory dataset -----------------------------------------------------------

@dataclass
class Dataset:
    """Normalised samples: (N, C, H, W) images or (N, T, C, H, W) frames."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("sample and label counts differ")
        _check_labels(self.y, self.num_classes, self.name or "dataset")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, n: int, seed: int = 0, stratified: bool = True) -> "Dataset":
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        if stratified:
            idx = []
            per = n // self.num_classes
            for c in range(self.num_classes):
                members = np.flatnonzero(self.y == c)
                idx.extend(rng.permutation(members)[:per])
            rest = np.setdiff1d(np.arange(len(self)), idx)
            idx.extend(rng.permutation(rest)[: n - len(idx)])
            idx = np.sort(np.asarray(idx))
        else:
            idx = np.sort(rng.permutation(len(self))[:n])
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.name)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]


@dataclass
class Augment:
    """Training-split augmentation: pad-then-crop, horizontal flip, rotation."""

    crop_pad: int = 0
    hflip: bool = False
    rotation: float = 0.0

    @property
    def active(self) -> bool:
        return bool(self.crop_pad or self.hflip or self.rotation)

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.active:
            return x
        x = x.copy()
        n = x.shape[0]
        h, w = x.shape[-2:]
        if self.crop_pad:
            p = self.crop_pad
            pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
            padded = np.pad(x, pad)
            oy = rng.integers(0, 2 * p + 1, n)
            ox = rng.integers(0, 2 * p + 1, n)
            for i in range(n):
                x[i] = padded[i, ..., oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        if self.hflip:
            flip = rng.random(n) < 0.5
            x[flip] = x[flip][..., ::-1]
        if self.rotation:
            angles = rng.uniform(-self.rotation, self.rotation, n)
            for i in range(n):
                x[i] = ndimage.rotate(x[i], angles[i], axes=(-1, -2), reshape=False, order=1,
                                      mode="constant", cval=0.0)
        return x


def batches(ds: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None,
            augment: Optional[Augment] = None) -> Iterator[tuple]:
    """Mini-batches covering every sample once; the short tail batch is kept."""
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        x = ds.x[idx]
        if augment is not None and rng is not None:
            x = augment(x, rng)
        yield x, ds.y[idx]


# -- synthetic sets --------------------------------------------------------------

def separable_spike_dataset(n: int = 200, channels: int = 3, size: int = 8, seed: int = 0,
                            p_on: float = 0.6, p_off: float = 0.1) -> Dataset:
    """Two classes of binary images: class 0 lights the left half more, class 1 the right."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rng.shuffle(y)
    x = np.empty((n, channels, size, size), np.float32)
    half = size // 2
    for i in range(n):
        left = p_on if y[i] == 0 else p_off
        right = p_off if y[i] == 0 else p_on
        probs = np.full((size, size), right)
        probs[:, :half] = left
        x[i] = rng.random((channels, size, size)) < probs
    return Dataset(x, y.astype(np.int64), 2, "separable-spikes")


def template_dataset(n: int = 500, num_classes: int = 10, channels: int = 3, size: int = 32,
                     noise: float = 1.0, seed: int = 0, sample_seed: Optional[int] = None) -> Dataset:
    """CIFAR-shaped stand-in: one smooth random template per class plus noise.

    ``seed`` fixes the templates; ``sample_seed`` (default ``seed``) draws the
    samples, so train and test splits share classes but not noise.
    """
    trng = np.random.default_rng(seed)
    templates = ndimage.gaussian_filter(trng.standard_normal((num_classes, channels, size, size)),
                                        sigma=(0, 0, 3, 3))
    templates /= templates.std(axis=(1, 2, 3), keepdims=True)
    rng = np.random.default_rng(seed if sample_seed is None else (seed, sample_seed))
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    x = templates[y] + noise * rng.standard_normal((n, channels, size, size))
    return Dataset(x.astype(np.float32), y.astype(np.int64), num_classes, "templates")


# -- source descriptor ------------------------------------------------------------

@dataclass
class DatasetSource:
    kind: str = "synthetic"  # idx-images | cifar-binary | event-frames | synthetic
    path: str = ""
    split: str = "train"
    mean: tuple = CIFAR_MEAN
    std: tuple = CIFAR_STD
    num_classes: int = 10
    subset: int = 0
    augment: Augment = field(default_factory=Augment)
    labels_path: str = ""
    timesteps: Optional[int] = None
    seed: int = 0
    synthetic: str = "templates"  # templates | separable
    samples: int = 500
    channels: int = 3
    size: int = 32

    def load(self) -> Dataset:
        if self.kind == "cifar-binary":
            p = Path(self.path)
            if p.is_dir():
                imgs, labs = load_cifar10(p, self.split)
            else:
                imgs, labs = load_cifar_binary(p, self.num_classes)
            ds = Dataset(normalize(imgs, self.mean, self.std), labs, self.num_classes, f"cifar10-{self.split}")
        elif self.kind == "idx-images":
            imgs, labs = load_idx(self.path, self.labels_path or None, self.num_classes)
            if labs is None:
                raise DataFormatError("idx-images source needs a labels file")
            ds = Dataset(normalize(imgs, self.mean[:1], self.std[:1]), labs, self.num_classes, "idx")
        elif self.kind == "event-frames":
            ev = load_event_frames(self.path, self.timesteps, self.num_classes)
            ds = Dataset(ev.frames, ev.labels, self.num_classes, "event-frames")
        elif self.kind == "synthetic":
            split_seed = 0 if self.split == "train" else 1
            if self.synthetic == "separable":
                ds = separable_spike_dataset(self.samples, self.channels, self.size, seed=self.seed * 2 + split_seed)
            else:
                ds = template_dataset(self.samples, self.num_classes, self.channels, self.size, seed=self.seed,
                                      sample_seed=split_seed)
        else:
            raise DataFormatError(f"unknown dataset kind {self.kind!r}")
        if self.subset:
            ds = ds.subset(self.subset, seed=self.seed)
        return ds
