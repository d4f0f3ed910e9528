"""Spiking residual networks: plain, vanilla, membrane-shortcut and variants.

A :class:`NetworkSpec` describes stem, stages and block kind; :func:`build_network`
turns it into a :class:`Model`. Activations flow as time-major stacks of
shape (T*N, C, H, W), index ``t*N + n``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autograd import Tensor, as_tensor, get_dtype
from .neuron import LIF, TDBN, LifConfig, SpikeRecord


class SpikeIntegrityError(RuntimeError):
    """A convolution that must be spike-driven received non-binary input."""


class BlockKind(str, Enum):
    PLAIN = "plain"
    VANILLA = "vanilla"
    MS = "ms"
    SR_B = "sr-b"
    SR_C = "sr-c"
    MS_NO_PATH_LIF = "ms-without-path-lif"

    @classmethod
    def parse(cls, value) -> "BlockKind":
        if isinstance(value, cls):
            return value
        value = str(value).strip().lower()
        aliases = {"sr-a": "ms", "ms-resnet": "ms", "wo-lif": "ms-without-path-lif",
                   "w/o-lif": "ms-without-path-lif", "resnet": "vanilla"}
        return cls(aliases.get(value, value))

    @property
    def spiking_trunk(self) -> bool:
        """Blocks exchange spikes (LIF after every block)."""
        return self in (BlockKind.PLAIN, BlockKind.VANILLA)

    @property
    def has_shortcut(self) -> bool:
        return self is not BlockKind.PLAIN

    @property
    def spike_based_path(self) -> bool:
        """Every residual-path convolution sees binary input."""
        return self in (BlockKind.PLAIN, BlockKind.VANILLA, BlockKind.MS, BlockKind.SR_B)

    @property
    def terminal_lif(self) -> bool:
        return not self.spiking_trunk


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    width: int
    stride: int = 1


@dataclass(frozen=True)
class NetworkSpec:
    kind: BlockKind
    stages: tuple
    stem_width: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    in_channels: int = 3
    input_size: int = 32
    downsample: str = "conv"  # "conv" (strided 1x1) or "avgpool" (pool, then 1x1)
    num_classes: int = 10
    path_kernel: int = 3
    lif: LifConfig = field(default_factory=LifConfig)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind.parse(self.kind))
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages))
        if self.downsample not in ("conv", "avgpool"):
            raise ValueError(f"downsample must be 'conv' or 'avgpool', got {self.downsample!r}")
        if not self.stages:
            raise ValueError("a network needs at least one stage")
        if self.path_kernel % 2 == 0:
            raise ValueError("path kernel must be odd")
        size = self._stem_out_size()
        for i, st in enumerate(self.stages):
            if st.blocks < 1 or st.width < 1:
                raise ValueError(f"stage {i}: blocks and width must be positive")
            if st.stride not in (1, 2):
                raise ValueError(f"stage {i}: stride must be 1 or 2, got {st.stride}")
            if st.stride == 2:
                if size % 2:
                    raise ValueError(f"stage {i}: stride 2 on odd spatial size {size}")
                size //= 2
        if size < 1:
            raise ValueError("spatial size collapses to zero")

    def _stem_out_size(self) -> int:
        pad = self.stem_kernel // 2
        return (self.input_size + 2 * pad - self.stem_kernel) // self.stem_stride + 1

    @property
    def timesteps(self) -> int:
        return self.lif.timesteps

    @property
    def weighted_layers(self) -> int:
        """Stem conv + two convs per block + classifier (shortcut 1x1s excluded)."""
        return 2 + 2 * sum(s.blocks for s in self.stages)

    def with_timesteps(self, timesteps: int) -> "NetworkSpec":
        return replace(self, lif=self.lif.with_timesteps(timesteps))

    def to_dict(self) -> dict:
        d = {
            "model.kind": self.kind.value,
            "model.stages": ";".join(f"{s.blocks},{s.width},{s.stride}" for s in self.stages),
            "model.stem_width": self.stem_width,
            "model.stem_kernel": self.stem_kernel,
            "model.stem_stride": self.stem_stride,
            "model.in_channels": self.in_channels,
            "model.input_size": self.input_size,
            "model.downsample": self.downsample,
            "model.num_classes": self.num_classes,
            "model.path_kernel": self.path_kernel,
            "model.name": self.name,
        }
        for k, v in asdict(self.lif).items():
            d[f"lif.{k}"] = v
        return {k: str(v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        if "model.stages" not in d:
            return spec_from_shorthand(d)
        stages = tuple(StageSpec(*(int(v) for v in part.split(",")))
                       for part in str(d["model.stages"]).split(";") if part.strip())
        lif_fields = {f: d[f"lif.{f}"] for f in ("v_th", "v_reset", "tau_mem", "timesteps", "a")
                      if f"lif.{f}" in d}
        lif = LifConfig(**{k: (int(float(v)) if k == "timesteps" else float(v)) for k, v in lif_fields.items()})

        def get(key, default, conv=int):
            return conv(d[key]) if key in d else default

        return cls(
            kind=BlockKind.parse(d.get("model.kind", "ms")),
            stages=stages,
            stem_width=get("model.stem_width", 16),
            stem_kernel=get("model.stem_kernel", 3),
            stem_stride=get("model.stem_stride", 1),
            in_channels=get("model.in_channels", 3),
            input_size=get("model.input_size", 32),
            downsample=d.get("model.downsample", "conv"),
            num_classes=get("model.num_classes", 10),
            path_kernel=get("model.path_kernel", 3),
            lif=lif,
            name=d.get("model.name", ""),
        )


def cifar_spec(n: int, kind="ms", lif: Optional[LifConfig] = None, widths=(16, 32, 64),
               input_size: int = 32, in_channels: int = 3, num_classes: int = 10,
               stem_stride: int = 1, downsample: str = "conv", path_kernel: int = 3) -> NetworkSpec:
    """Narrow depth-analysis family: stages of n blocks at widths 16/32/64; depth 6n+2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    stages = (StageSpec(n, widths[0], 1), StageSpec(n, widths[1], 2), StageSpec(n, widths[2], 2))
    return NetworkSpec(kind=kind, stages=stages, stem_width=widths[0], stem_kernel=3,
                       stem_stride=stem_stride, in_channels=in_channels, input_size=input_size,
                       downsample=downsample, num_classes=num_classes, path_kernel=path_kernel,
                       lif=lif or LifConfig(), name=f"{BlockKind.parse(kind).value}-{6 * n + 2}")


def cifar_spec_for_depth(depth: int, kind="ms", **kw) -> NetworkSpec:
    if (depth - 2) % 6 or depth < 8:
        raise ValueError(f"depth {depth} is not of the form 6n+2 with n >= 1")
    return cifar_spec((depth - 2) // 6, kind, **kw)


IMAGENET_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 104: (3, 8, 32, 8)}


def imagenet_spec(depth: int, kind="ms", lif: Optional[LifConfig] = None, downsample: Optional[str] = None,
                  num_classes: int = 1000, input_size: int = 224) -> NetworkSpec:
    """ImageNet family; the stem max-pool is replaced by stride 2 on the first stage."""
    try:
        blocks = IMAGENET_BLOCKS[depth]
    except KeyError:
        raise ValueError(f"no ImageNet layout for depth {depth}; known: {sorted(IMAGENET_BLOCKS)}") from None
    if downsample is None:
        downsample = "avgpool" if depth == 104 else "conv"
    widths = (64, 128, 256, 512)
    stages = tuple(StageSpec(b, w, 2) for b, w in zip(blocks, widths))
    return NetworkSpec(kind=kind, stages=stages, stem_width=64, stem_kernel=7, stem_stride=2,
                       in_channels=3, input_size=input_size, downsample=downsample,
                       num_classes=num_classes, lif=lif or LifConfig(), name=f"resnet{depth}")


def named_spec(name: str, kind="ms") -> NetworkSpec:
    """``resnet18/34/104`` (ImageNet), ``resnet20-dvs`` or ``cifar<depth>``."""
    key = name.lower().replace("_", "-")
    if key.startswith("resnet") and key[6:].isdigit() and int(key[6:]) in IMAGENET_BLOCKS:
        return imagenet_spec(int(key[6:]), kind)
    if key == "resnet20-dvs":
        spec = cifar_spec(3, kind, input_size=128, in_channels=2, stem_stride=2)
        return replace(spec, name="resnet20-dvs")
    for prefix in ("cifar", "resnet"):
        if key.startswith(prefix) and key[len(prefix):].lstrip("-").isdigit():
            return cifar_spec_for_depth(int(key[len(prefix):].lstrip("-")), kind)
    raise ValueError(f"unknown network name {name!r}")


def spec_from_shorthand(d: dict) -> NetworkSpec:
    kind = d.get("model.kind", "ms")
    lif_kw = {f: float(d[f"lif.{f}"]) for f in ("v_th", "v_reset", "tau_mem", "a") if f"lif.{f}" in d}
    if "lif.timesteps" in d:
        lif_kw["timesteps"] = int(float(d["lif.timesteps"]))
    lif = LifConfig(**lif_kw)
    if "model.name" in d and "model.depth" not in d:
        spec = named_spec(d["model.name"], kind)
        return replace(spec, lif=lif)
    depth = int(d.get("model.depth", 20))
    widths = tuple(int(w) for w in str(d.get("model.widths", "16,32,64")).split(","))
    return cifar_spec_for_depth(
        depth, kind, lif=lif, widths=widths,
        input_size=int(d.get("model.input_size", 32)),
        in_channels=int(d.get("model.in_channels", 3)),
        num_classes=int(d.get("model.num_classes", 10)),
        stem_stride=int(d.get("model.stem_stride", 1)),
        downsample=d.get("model.downsample", "conv"),
        path_kernel=int(d.get("model.path_kernel", 3)),
    )


# -- layers -----------------------------------------------------------------

class Conv:
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: Optional[int] = None,
                 name: str = "conv", category: str = "residual-path", expects_spikes: bool = False):
        self.cin, self.cout, self.kernel, self.stride = cin, cout, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        self.name = name
        self.category = category
        self.expects_spikes = expects_spikes
        self.weight = Tensor(np.zeros((cout, cin, kernel, kernel), get_dtype()), requires_grad=True,
                             name=f"{name}.weight")
        self.in_size: Optional[int] = None
        self.check_spikes = False
        self.last_input: Optional[np.ndarray] = None
        self.keep_input = False

    def out_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel) // self.stride + 1

    def macs(self, in_size: int) -> int:
        o = self.out_size(in_size)
        return self.cout * o * o * self.cin * self.kernel * self.kernel

    def parameters(self):
        return [self.weight]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if self.check_spikes and self.expects_spikes:
            d = x.data
            if not ((d == 0) | (d == 1)).all():
                raise SpikeIntegrityError(f"{self.name}: spike-based convolution received non-binary input")
        if self.keep_input:
            self.last_input = x.data
        return ops.conv2d(x, self.weight, self.stride, self.padding)


class Linear:
    def __init__(self, fin: int, fout: int, name: str = "fc"):
        self.fin, self.fout, self.name = fin, fout, name
        dt = get_dtype()
        self.weight = Tensor(np.zeros((fout, fin), dt), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(fout, dt), requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Block:
    """One residual (or plain) block; see :func:`build_network` for the wiring."""

    def __init__(self, kind: BlockKind, cin: int, cout: int, stride: int, spec: NetworkSpec, name: str):
        cfg = spec.lif
        k = spec.path_kernel
        self.kind, self.cin, self.cout, self.stride, self.name = kind, cin, cout, stride, name
        spiky = kind.spike_based_path
        first_spiky = kind in (BlockKind.PLAIN, BlockKind.VANILLA, BlockKind.MS, BlockKind.SR_B)
        self.conv1 = Conv(cin, cout, k, stride, name=f"{name}.conv1", expects_spikes=first_spiky)
        self.bn1 = TDBN(cout, cfg, name=f"{name}.bn1")
        self.conv2 = Conv(cout, cout, k, 1, name=f"{name}.conv2", expects_spikes=spiky or kind is not BlockKind.SR_C)
        if kind is BlockKind.MS_NO_PATH_LIF:
            self.conv2.expects_spikes = True
        self.bn2 = TDBN(cout, cfg, name=f"{name}.bn2")

        self.lif_top = LIF(cfg, f"{name}.lif_top", "first") if kind in (BlockKind.MS, BlockKind.SR_B) else None
        mid_role = "second" if self.lif_top is not None else "first"
        self.lif_mid = LIF(cfg, f"{name}.lif_mid", mid_role)
        self.lif_out = None
        if kind in (BlockKind.PLAIN, BlockKind.VANILLA, BlockKind.SR_C):
            self.lif_out = LIF(cfg, f"{name}.lif_out", "second")

        self.down_conv = self.down_bn = None
        self.pool = False
        if kind.has_shortcut and (stride != 1 or cin != cout):
            self.pool = spec.downsample == "avgpool" and stride == 2
            self.down_conv = Conv(cin, cout, 1, 1 if self.pool else stride, padding=0,
                                  name=f"{name}.down", category="shortcut-downsample",
                                  expects_spikes=kind.spiking_trunk)
            self.down_bn = TDBN(cout, cfg, name=f"{name}.down_bn")

    @property
    def downsamples(self) -> bool:
        return self.down_conv is not None

    def convs(self):
        return [c for c in (self.conv1, self.conv2, self.down_conv) if c is not None]

    def bns(self):
        return [b for b in (self.bn1, self.bn2, self.down_bn) if b is not None]

    def lifs(self):
        return [l for l in (self.lif_top, self.lif_mid, self.lif_out) if l is not None]

    def path_end_bn(self) -> Optional[TDBN]:
        """BN whose scale gates the whole residual branch (the gamma_2 trick)."""
        if self.kind in (BlockKind.SR_B, BlockKind.PLAIN):
            return None
        return self.bn2

    def parameters(self):
        ps = []
        for c in self.convs():
            ps += c.parameters()
        for b in self.bns():
            ps += b.parameters()
        return ps

    def shortcut(self, x) -> Tensor:
        if self.down_conv is None:
            return x
        if self.pool:
            x = ops.avgpool2x2(x)
        return self.down_bn(self.down_conv(x))

    def path(self, x, timesteps: int, record: Optional[SpikeRecord] = None) -> Tensor:
        """Residual branch up to (and for SR-B excluding) its last BN."""
        h = x
        if self.lif_top is not None:
            h = self.lif_top(h, timesteps, record)
        h = self.lif_mid(self.bn1(self.conv1(h)), timesteps, record)
        h = self.conv2(h)
        if self.kind is BlockKind.SR_B:
            return h
        h = self.bn2(h)
        if self.kind is BlockKind.SR_C:
            h = self.lif_out(h, timesteps, record)
        return h

    def __call__(self, x, timesteps: int, record: Optional[SpikeRecord] = None, residual: bool = True) -> Tensor:
        x = as_tensor(x)
        kind = self.kind
        if kind is BlockKind.PLAIN:
            if not residual:
                return x
            return self.lif_out(self.path(x, timesteps, record), timesteps, record)
        sc = self.shortcut(x)
        if not residual:
            if kind is BlockKind.VANILLA:
                return self.lif_out(sc, timesteps, record)
            if kind is BlockKind.SR_B:
                return self.bn2(sc)
            return sc
        f = self.path(x, timesteps, record)
        if kind is BlockKind.VANILLA:
            return self.lif_out(ops.add(f, sc), timesteps, record)
        if kind is BlockKind.SR_B:
            return self.bn2(ops.add(f, sc))
        return ops.add(sc, f)


class Model:
    """A built network: stem, residual blocks, optional terminal LIF, classifier."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        kind = spec.kind
        cfg = spec.lif
        self.stem = Conv(spec.in_channels, spec.stem_width, spec.stem_kernel, spec.stem_stride,
                         name="stem.conv", category="stem")
        self.stem_bn = TDBN(spec.stem_width, cfg, name="stem.bn")
        self.stem_lif = LIF(cfg, "stem.lif", "stem") if kind in (BlockKind.PLAIN, BlockKind.VANILLA, BlockKind.SR_C) else None
        size = self.stem.out_size(spec.input_size)
        self.stem.in_size = spec.input_size
        self.blocks: list[Block] = []
        cin = spec.stem_width
        for si, st in enumerate(spec.stages):
            for bi in range(st.blocks):
                stride = st.stride if bi == 0 else 1
                blk = Block(kind, cin, st.width, stride, spec, name=f"s{si + 1}.b{bi + 1}")
                for c in blk.convs():
                    c.in_size = size
                blk.conv2.in_size = blk.conv1.out_size(size)
                self.blocks.append(blk)
                size = blk.conv1.out_size(size)
                cin = st.width
        self.final_size = size
        self.terminal_lif = LIF(cfg, "terminal.lif", "terminal") if kind.terminal_lif else None
        self.fc = Linear(cin, spec.num_classes, name="fc")
        self.training = True
        self._check = False
        self.gamma2_zero: Optional[bool] = None

    # -- bookkeeping -------------------------------------------------------
    def convs(self) -> list:
        cs = [self.stem]
        for b in self.blocks:
            cs += b.convs()
        return cs

    def bns(self) -> list:
        bs = [self.stem_bn]
        for b in self.blocks:
            bs += b.bns()
        return bs

    def lifs(self) -> list:
        ls = [self.stem_lif] if self.stem_lif is not None else []
        for b in self.blocks:
            ls += b.lifs()
        if self.terminal_lif is not None:
            ls.append(self.terminal_lif)
        return ls

    def named_parameters(self) -> list:
        """(name, Tensor) pairs in a fixed order (also the checkpoint order)."""
        out = [(self.stem.weight.name, self.stem.weight)]
        out += [(p.name, p) for p in self.stem_bn.parameters()]
        for b in self.blocks:
            out += [(p.name, p) for p in b.parameters()]
        out += [(p.name, p) for p in self.fc.parameters()]
        return out

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def buffers(self) -> list:
        out = []
        for bn in self.bns():
            out.append((f"{bn.name}.running_mean", bn.running_mean))
            out.append((f"{bn.name}.running_var", bn.running_var))
        return out

    def load_buffers(self, values: dict, updates: int = 1):
        for bn in self.bns():
            bn.running_mean = np.array(values[f"{bn.name}.running_mean"], dtype=bn.running_mean.dtype)
            bn.running_var = np.array(values[f"{bn.name}.running_var"], dtype=bn.running_var.dtype)
            bn.updates = max(bn.updates, updates)

    def train(self) -> "Model":
        self.training = True
        for bn in self.bns():
            bn.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        for bn in self.bns():
            bn.training = False
        return self

    @property
    def check_spikes(self) -> bool:
        return self._check

    @check_spikes.setter
    def check_spikes(self, value: bool):
        self._check = bool(value)
        for c in self.convs():
            c.check_spikes = self._check

    @contextlib.contextmanager
    def frozen_stats(self):
        """Snapshot BN running statistics and restore them on exit."""
        saved = [(bn.running_mean.copy(), bn.running_var.copy(), bn.updates) for bn in self.bns()]
        try:
            yield self
        finally:
            for bn, (m, v, u) in zip(self.bns(), saved):
                bn.running_mean, bn.running_var, bn.updates = m, v, u

    # -- forward -----------------------------------------------------------
    def encode(self, x, timesteps: Optional[int] = None, record: Optional[SpikeRecord] = None) -> Tensor:
        """Stem output as a (T*N, C, H, W) stack.

        A 4-D input is a static image batch repeated at every step; a 5-D
        input (N, T, C, H, W) is a pre-aggregated frame sequence.
        """
        T = timesteps or self.spec.timesteps
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=get_dtype())
        if x.ndim == 4:
            h = self.stem_bn(self.stem(Tensor(x)))
            h = ops.tile0(h, T) if T > 1 else h
        elif x.ndim == 5:
            n, tf = x.shape[:2]
            if tf != T:
                raise ValueError(f"input carries {tf} frames but the model runs {T} timesteps")
            frames = np.ascontiguousarray(np.swapaxes(x, 0, 1)).reshape((tf * n,) + x.shape[2:])
            h = self.stem_bn(self.stem(Tensor(frames)))
        else:
            raise ValueError(f"expected (N,C,H,W) images or (N,T,C,H,W) frames, got shape {x.shape}")
        if self.stem_lif is not None:
            h = self.stem_lif(h, T, record)
        return h

    def head(self, h, timesteps: int, record: Optional[SpikeRecord] = None, dropout: float = 0.0,
             rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.terminal_lif is not None:
            h = self.terminal_lif(h, timesteps, record)
        n = h.shape[0] // timesteps
        pooled = ops.mean(h, axis=(2, 3))
        counts = ops.sum(ops.reshape(pooled, (timesteps, n, pooled.shape[1])), axis=0)
        if dropout > 0.0 and self.training:
            counts = ops.dropout(counts, dropout, rng or np.random.default_rng())
        return self.fc(counts)

    def forward(self, x, timesteps: Optional[int] = None, record: Optional[SpikeRecord] = None,
                capture: Optional[list] = None, dropout: float = 0.0,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits (N, classes). ``capture`` collects ``(block, input, output)``."""
        T = timesteps or self.spec.timesteps
        h = self.encode(x, T, record)
        for blk in self.blocks:
            out = blk(h, T, record)
            if capture is not None:
                capture.append((blk, h, out))
            h = out
        return self.head(h, T, record, dropout, rng)

    __call__ = forward


def build_network(spec: NetworkSpec, seed: Optional[int] = 0, gamma2_zero: bool = True) -> Model:
    """Build and initialise a model.

    Blocks compute, with ``F`` the residual branch:

    * plain:    ``o' = LIF(BN(CONV(LIF(BN(CONV(o))))))``
    * vanilla:  ``o' = LIF(F(o) + S(o))``, ``F = BN(CONV(LIF(BN(CONV(o)))))``
    * ms:       ``I' = S(I) + BN(CONV(LIF(BN(CONV(LIF(I))))))``
    * ms-without-path-lif: as ms but without the LIF at the top of the branch
    * sr-b:     ``I' = BN(CONV(LIF(BN(CONV(LIF(I))))) + S(I))``
    * sr-c:     ``I' = S(I) + LIF(BN(CONV(LIF(BN(CONV(I))))))``

    ``S`` is identity or a 1x1 convolution + BN when shape changes. The
    classifier sums globally pooled spikes over T and applies one linear layer.
    """
    model = Model(spec)
    if seed is not None:
        init_weights(model, gamma2_zero=gamma2_zero, seed=seed)
    return model


def init_weights(model: Model, gamma2_zero: bool = True, seed: int = 0, gamma1: float = 1.0) -> Model:
    """Fan-in scaled Gaussian convs, unit BN scales, zero shifts.

    With ``gamma2_zero`` the BN closing each residual branch starts at scale 0,
    so every residual block is an exact identity on its shortcut at init.
    """
    if abs(gamma1) < 0.1:
        raise ValueError(f"gamma_1={gamma1} would silence the first LIF of every branch; refusing")
    rng = np.random.default_rng(seed)
    for conv in model.convs():
        fan_in = conv.cin * conv.kernel * conv.kernel
        conv.weight.data[...] = rng.standard_normal(conv.weight.shape) * math.sqrt(2.0 / fan_in)
    fc = model.fc
    fc.weight.data[...] = rng.standard_normal(fc.weight.shape) / math.sqrt(fc.fin)
    fc.bias.data[...] = 0.0
    for bn in model.bns():
        bn.gamma.data[...] = 1.0
        bn.beta.data[...] = 0.0
    for blk in model.blocks:
        blk.bn1.gamma.data[...] = gamma1
        end = blk.path_end_bn()
        if end is not None and gamma2_zero:
            end.gamma.data[...] = 0.0
    model.gamma2_zero = gamma2_zero
    return model


# -- accounting -------------------------------------------------------------

def count_params(model: Model) -> int:
    return int(sum(p.size for p in model.parameters()))


@dataclass
class FlopReport:
    layers: list  # (name, category, macs)

    def by_category(self) -> dict:
        out: dict = {}
        for _, cat, m in self.layers:
            out[cat] = out.get(cat, 0) + m
        return out

    @property
    def total(self) -> int:
        return sum(m for _, _, m in self.layers)

    @property
    def residual_path(self) -> int:
        return self.by_category().get("residual-path", 0)


def count_flops(model: Model, input_size: Optional[int] = None) -> FlopReport:
    """MACs per sample per timestep, tagged stem / residual-path / shortcut-downsample / classifier."""
    spec = model.spec
    size = input_size or spec.input_size
    layers = [(model.stem.name, "stem", model.stem.macs(size))]
    size = model.stem.out_size(size)
    for blk in model.blocks:
        layers.append((blk.conv1.name, "residual-path", blk.conv1.macs(size)))
        mid = blk.conv1.out_size(size)
        layers.append((blk.conv2.name, "residual-path", blk.conv2.macs(mid)))
        if blk.down_conv is not None:
            dsize = size // 2 if blk.pool else size
            layers.append((blk.down_conv.name, "shortcut-downsample", blk.down_conv.macs(dsize)))
        size = mid
    layers.append((model.fc.name, "classifier", model.fc.fin * model.fc.fout))
    return FlopReport(layers)
