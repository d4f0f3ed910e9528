"""Firing statistics, synaptic-operation counts and the MAC/AC energy estimate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import ops
from ..arch import Model, SpikeIntegrityError, count_flops
from ..autograd import no_tape
from ..neuron import SpikeRecord

E_MAC = 4.6e-12  # J per multiply-accumulate (45 nm)
E_AC = 0.9e-12   # J per accumulate

# Published residual-path FLOPs (MACs per image per step) for the reference nets.
PUBLISHED_FLOPS = {"resnet18": 1.82e9, "resnet34": 3.53e9, "resnet104": 11.79e9, "resnet20-dvs": 40.11e6}


@dataclass
class EnergyReport:
    flops: float
    syops: float
    e_mac: float = E_MAC
    e_ac: float = E_AC
    layers: list = field(default_factory=list)  # dicts: name, macs, rate, syops
    firing: Optional["FiringStats"] = None

    @property
    def e_ann(self) -> float:
        return self.flops * self.e_mac

    @property
    def e_snn(self) -> float:
        return self.syops * self.e_ac

    @property
    def ratio(self) -> float:
        return self.e_ann / self.e_snn if self.e_snn > 0 else math.inf

    def summary(self) -> dict:
        return {
            "flops": self.flops,
            "syops": self.syops,
            "e_ann_joules": self.e_ann,
            "e_snn_joules": self.e_snn,
            "ratio": self.ratio if math.isfinite(self.ratio) else "inf",
            "e_mac_joules": self.e_mac,
            "e_ac_joules": self.e_ac,
        }

    def rows(self) -> list:
        return [dict(r) for r in self.layers]


def energy_from_rate(flops: float, rate: float, timesteps: int) -> EnergyReport:
    """Uniform-rate estimate: SyOPs = FLOPs * T * r."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"firing rate must lie in [0, 1], got {rate}")
    return EnergyReport(flops=flops, syops=flops * timesteps * rate)


def energy_from_counts(flops: float, syops: float) -> EnergyReport:
    return EnergyReport(flops=flops, syops=syops)


# -- firing statistics --------------------------------------------------------

@dataclass
class FiringStats:
    global_rate: float
    spikes: int
    neuron_steps: int
    layers: list  # dicts: name, role, stage, rate, spikes, neuron_steps

    def by_role(self) -> dict:
        """Mean rate per (stage, role), as plotted per stage for the two path LIFs."""
        acc: dict = {}
        for row in self.layers:
            key = (row["stage"], row["role"])
            s, n = acc.get(key, (0, 0))
            acc[key] = (s + row["spikes"], n + row["neuron_steps"])
        return {k: s / n for k, (s, n) in sorted(acc.items())}


def _stage_of(name: str) -> str:
    head = name.split(".")[0]
    return head if head.startswith("s") and head[1:].isdigit() else head


def firing_stats(record: SpikeRecord) -> FiringStats:
    """Exact spike counts per layer; r = #spikes / (#neurons * T) (samples pooled)."""
    rows = []
    total = count = 0
    for name, bits in record.layers.items():
        s = int(np.count_nonzero(bits))
        n = int(bits.size)
        rows.append({"name": name, "role": record.roles.get(name, ""), "stage": _stage_of(name),
                     "rate": s / n if n else 0.0, "spikes": s, "neuron_steps": n})
        total += s
        count += n
    return FiringStats(total / count if count else 0.0, total, count, rows)


def model_firing_stats(model: Model, batch, timesteps: Optional[int] = None) -> FiringStats:
    record = SpikeRecord()
    with no_tape(), model.frozen_stats():
        model.forward(batch, timesteps, record=record)
    return firing_stats(record)


# -- SyOPs --------------------------------------------------------------------

def _literal_accumulates(conv, spikes: np.ndarray) -> int:
    """Accumulates actually triggered: for every output neuron, one AC per
    binary input spike inside its receptive field."""
    ones = np.ones((1, conv.cin, conv.kernel, conv.kernel), dtype=np.float64)
    hits = ops._conv_forward(spikes.astype(np.float64), ones, conv.stride, conv.padding)
    return int(round(float(hits.sum()))) * conv.cout


def syops_count(model: Model, batch, timesteps: Optional[int] = None, literal: bool = False) -> EnergyReport:
    """Per-sample SyOPs over the residual-path convolutions.

    Each eligible layer contributes ``MACs * (input firing rate) * T``; with
    ``literal`` the per-spike accumulate count is reported too. The encoder
    and shortcut downsample convolutions are excluded.
    """
    T = timesteps or model.spec.timesteps
    convs = [c for c in model.convs() if c.category == "residual-path"]
    for c in convs:
        c.keep_input = True
    record = SpikeRecord()
    try:
        with no_tape(), model.frozen_stats():
            model.forward(batch, T, record=record)
        flops = count_flops(model)
        macs = {name: m for name, cat, m in flops.layers if cat == "residual-path"}
        n = np.asarray(batch).shape[0]
        rows = []
        syops = 0.0
        literal_total = 0
        for c in convs:
            x = c.last_input
            if not ((x == 0) | (x == 1)).all():
                raise SpikeIntegrityError(f"{c.name}: counted convolution received non-binary input")
            spikes = int(np.count_nonzero(x))
            rate = spikes / x.size
            s = macs[c.name] * rate * T
            row = {"name": c.name, "macs": macs[c.name], "rate": rate, "syops": s}
            if literal:
                lit = _literal_accumulates(c, x)
                row["syops_literal"] = lit / n
                literal_total += lit
            rows.append(row)
            syops += s
    finally:
        for c in convs:
            c.keep_input = False
            c.last_input = None
    report = EnergyReport(flops=float(sum(macs.values())), syops=syops, layers=rows,
                          firing=firing_stats(record))
    if literal:
        report.layers.append({"name": "total", "macs": report.flops, "rate": "", "syops": syops,
                              "syops_literal": literal_total / n})
    return report


def exact_rate_syops(macs: int, spikes: int, elements: int, timesteps: int):
    """``macs * (spikes/elements) * T`` as an exact rational (per sample)."""
    from fractions import Fraction
    return Fraction(macs * spikes * timesteps, elements)
