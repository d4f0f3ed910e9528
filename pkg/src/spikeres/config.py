"""Flat ``section.key = value`` experiment files.

Lines starting with ``#`` are comments. Values are kept as strings until a
consumer converts them, so a file round-trips unchanged through
:func:`dump_config`.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Optional

from .arch import NetworkSpec
from .data import Augment, DatasetSource, CIFAR_MEAN, CIFAR_STD
from .train import TrainConfig


class ConfigError(ValueError):
    pass


SECTIONS = ("model", "lif", "train", "data", "run")

_TRAIN_KEYS = {"lr": float, "batch_size": int, "momentum": float, "weight_decay": float, "epochs": int,
               "schedule": str, "beta": float, "label_smoothing": float, "dropout": float, "seed": int,
               "timesteps": int, "eval_batch_size": int}
_MODEL_KEYS = {"kind", "depth", "widths", "name", "stages", "stem_width", "stem_kernel", "stem_stride",
               "in_channels", "input_size", "downsample", "num_classes", "path_kernel", "gamma2_zero"}
_LIF_KEYS = {"v_th", "v_reset", "tau_mem", "timesteps", "a"}
_DATA_KEYS = {"kind", "path", "test_path", "labels_path", "test_labels_path", "subset", "test_subset",
              "samples", "test_samples", "synthetic", "mean", "std", "num_classes", "crop_pad", "hflip",
              "rotation", "seed", "timesteps"}
_RUN_KEYS = {"name", "phase1_epochs", "phase1_lr", "phase1_weight_decay", "phase2_lr",
             "phase2_weight_decay", "two_phase"}


def parse_config(text: str, source: str = "<string>") -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} has no section")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    validate_keys(out, source)
    return out


def validate_keys(cfg: dict, source: str = "<config>") -> None:
    allowed = {"model": _MODEL_KEYS, "lif": _LIF_KEYS, "train": set(_TRAIN_KEYS) | {"milestones"},
               "data": _DATA_KEYS, "run": _RUN_KEYS}
    for key in cfg:
        section, _, name = key.partition(".")
        if section not in allowed:
            raise ConfigError(f"{source}: unknown section {section!r} in {key!r}")
        if name not in allowed[section]:
            raise ConfigError(f"{source}: unknown key {key!r}")


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(p.read_text(), str(p))


def dump_config(cfg: dict) -> str:
    lines = []
    for section in SECTIONS:
        keys = sorted(k for k in cfg if k.startswith(section + "."))
        if keys:
            lines.append(f"# {section}")
            lines += [f"{k} = {cfg[k]}" for k in keys]
            lines.append("")
    return "\n".join(lines)


def apply_overrides(cfg: dict, overrides) -> dict:
    out = dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = v
    validate_keys(out, "<overrides>")
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def network_spec(cfg: dict) -> NetworkSpec:
    try:
        return NetworkSpec.from_dict({k: v for k, v in cfg.items() if k.startswith(("model.", "lif."))})
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc


def gamma2_zero(cfg: dict) -> bool:
    return _bool(cfg.get("model.gamma2_zero", "true"))


def train_config(cfg: dict, preset: Optional[str] = None) -> TrainConfig:
    kw: dict = {}
    for name, conv in _TRAIN_KEYS.items():
        key = f"train.{name}"
        if key in cfg:
            try:
                kw[name] = conv(cfg[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
    if "train.milestones" in cfg:
        kw["milestones"] = tuple(int(m) for m in cfg["train.milestones"].replace(" ", "").split(",") if m)
    try:
        if preset == "depth-analysis":
            return TrainConfig.depth_analysis(**kw)
        if preset == "alternatives":
            return TrainConfig.alternatives(**kw)
        return TrainConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"invalid train section: {exc}") from exc


def _floats(v: str) -> tuple:
    return tuple(float(s) for s in v.split(","))


def data_sources(cfg: dict, num_classes: int, timesteps: Optional[int] = None,
                 shape: tuple = (3, 32)) -> tuple:
    """(train source, test source) described by the ``data.*`` keys.

    ``shape`` is (channels, size) for synthetic sources.
    """
    g = cfg.get
    kind = g("data.kind", "synthetic")
    try:
        aug = Augment(crop_pad=int(g("data.crop_pad", 0)), hflip=_bool(g("data.hflip", "false")),
                      rotation=float(g("data.rotation", 0)))
        common = dict(kind=kind, mean=_floats(g("data.mean")) if "data.mean" in cfg else CIFAR_MEAN,
                      std=_floats(g("data.std")) if "data.std" in cfg else CIFAR_STD,
                      num_classes=int(g("data.num_classes", num_classes)),
                      seed=int(g("data.seed", 0)), synthetic=g("data.synthetic", "templates"),
                      timesteps=timesteps, channels=int(shape[0]), size=int(shape[1]))
        train = DatasetSource(path=g("data.path", ""), split="train", subset=int(g("data.subset", 0)),
                              augment=aug, labels_path=g("data.labels_path", ""),
                              samples=int(g("data.samples", 500)), **common)
        test_path = g("data.test_path", g("data.path", ""))
        test = DatasetSource(path=test_path, split="test", subset=int(g("data.test_subset", 0)),
                             labels_path=g("data.test_labels_path", ""),
                             samples=int(g("data.test_samples", g("data.samples", 500))), **common)
    except ValueError as exc:
        raise ConfigError(f"invalid data section: {exc}") from exc
    return train, test
