"""Spiking residual networks with membrane shortcuts, from scratch on numpy."""

from .autograd import Tensor, Tape, backward, no_tape, precision
from .neuron import LIF, TDBN, LifConfig, SpikeRecord, lif_step, lif_unroll, surrogate_grad
from .arch import (BlockKind, Model, NetworkSpec, StageSpec, build_network, cifar_spec,
                   cifar_spec_for_depth, count_flops, count_params, imagenet_spec, init_weights)

__version__ = "0.1.0"
