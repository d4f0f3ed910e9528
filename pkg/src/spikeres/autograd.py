"""Reverse-mode tape and the dense :class:`Tensor` it records.

Operations in :mod:`spikeres.ops` append one :class:`Node` per call to the
innermost active :class:`Tape`. Because nodes are appended while the forward
pass runs, the node list is already a topological order; :meth:`Tape.backward`
walks it once in reverse. The same list can be replayed forwards with tangents
(:meth:`Tape.jvp`), which the isometry diagnostics use to apply both ``J`` and
``J^T`` of a recorded block.

Outside of any tape nothing is recorded, which doubles as inference mode.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

_uids = itertools.count()
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def get_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with.

    Everything defaults to float32; gradient checks switch to float64 so that
    finite differences are not swamped by rounding.
    """
    previous = get_dtype()
    _local.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _local.dtype = previous


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape():
    """Suspend recording (e.g. for evaluation inside a training step)."""
    stack = _tape_stack()
    saved = stack[:]
    stack.clear()
    try:
        yield
    finally:
        stack[:] = saved


class TapeError(RuntimeError):
    pass


class Tensor:
    """N-dimensional array that can take part in a gradient tape.

    ``data`` is a plain numpy array in row-major order. Leaves created with
    ``requires_grad=True`` receive gradients from :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "uid", "name", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uids)
        self.name = name
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic sugar; the implementations live in spikeres.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded operation.

    ``inputs`` holds uids (``None`` for inputs that need no gradient) so the
    tape does not pin intermediate arrays; whatever the backward rule needs is
    captured by the ``vjp`` closure itself.
    """

    __slots__ = ("op", "inputs", "outputs", "vjp", "jvp")

    def __init__(self, op, inputs, outputs, vjp, jvp):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.vjp = vjp
        self.jvp = jvp


class Gradients(Mapping):
    """Gradient map keyed by tensor handle; values are numpy arrays."""

    def __init__(self, tensors: Mapping[int, Tensor], grads: Mapping[int, np.ndarray]):
        self._tensors = dict(tensors)
        self._grads = dict(grads)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[tensor.uid]
        except KeyError:
            raise KeyError(f"no gradient recorded for {tensor!r}") from None

    def __contains__(self, tensor) -> bool:
        return isinstance(tensor, Tensor) and tensor.uid in self._grads

    def __iter__(self):
        return (self._tensors[u] for u in self._grads)

    def __len__(self) -> int:
        return len(self._grads)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
            grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, Tensor] = {}
        self.produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.release()
        return False

    def release(self):
        for leaf in self.leaves.values():
            if leaf._tape is self:
                leaf._tape = None

    def __len__(self) -> int:
        return len(self.nodes)

    # -- recording ---------------------------------------------------------
    def record(self, op: str, inputs: Sequence[Optional[Tensor]], outputs: Sequence[Tensor],
               vjp: Callable, jvp: Callable):
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        uids = []
        for t in inputs:
            if t is None or not t.requires_grad:
                uids.append(None)
                continue
            if t.uid not in self.produced:
                owner = t._tape
                if owner is not None and owner is not self and not owner.consumed and owner in _tape_stack():
                    raise TapeError(f"{t!r} already participates in another active tape")
                t._tape = self
                self.leaves[t.uid] = t
            uids.append(t.uid)
        for out in outputs:
            out.requires_grad = True
            out._tape = self
            self.produced.add(out.uid)
        self.nodes.append(Node(op, tuple(uids), tuple(o.uid for o in outputs), vjp, jvp))

    # -- reverse mode ------------------------------------------------------
    def _reverse(self, seeds: dict, keep: set) -> dict:
        grads = dict(seeds)
        kept = {}
        for node in reversed(self.nodes):
            gs = []
            for u in node.outputs:
                g = grads.pop(u, None)
                if g is not None and u in keep:
                    kept[u] = g
                gs.append(g)
            if all(g is None for g in gs):
                continue
            in_grads = node.vjp(gs if len(gs) > 1 else gs[0])
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for u, g in zip(node.inputs, in_grads):
                if u is None or g is None:
                    continue
                prev = grads.get(u)
                grads[u] = g if prev is None else prev + g
        grads.update(kept)
        return grads

    def vjp(self, outputs: Sequence[Tensor], cotangents: Sequence, inputs: Sequence[Tensor]) -> list:
        """Return ``J^T c`` for each requested input; the tape is kept."""
        seeds = {}
        for o, c in zip(outputs, cotangents):
            c = np.asarray(c, dtype=o.dtype)
            if c.shape != o.shape:
                raise ValueError(f"cotangent shape {c.shape} does not match output {o.shape}")
            seeds[o.uid] = c
        keep = {t.uid for t in inputs}
        grads = self._reverse(seeds, keep)
        return [grads.get(t.uid, np.zeros(t.shape, t.dtype)) for t in inputs]

    def jvp(self, inputs: Sequence[Tensor], tangents: Sequence, outputs: Sequence[Tensor]) -> list:
        """Replay the tape forwards and return ``J v`` for each requested output."""
        tan = {}
        for t, v in zip(inputs, tangents):
            v = np.asarray(v, dtype=t.dtype)
            if v.shape != t.shape:
                raise ValueError(f"tangent shape {v.shape} does not match input {t.shape}")
            tan[t.uid] = v
        for node in self.nodes:
            ins = [None if u is None else tan.get(u) for u in node.inputs]
            if all(v is None for v in ins):
                continue
            res = node.jvp(ins)
            if not isinstance(res, tuple):
                res = (res,)
            for u, v in zip(node.outputs, res):
                if v is not None:
                    tan[u] = v
        return [tan.get(o.uid, np.zeros(o.shape, o.dtype)) for o in outputs]

    def backward(self, loss: Tensor) -> Gradients:
        """Gradients of a scalar loss w.r.t. every leaf; consumes the tape."""
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward")
        if loss._tape is not self or loss.uid not in self.produced:
            raise TapeError("loss is not recorded on this tape (detached tensor?)")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = self._reverse({loss.uid: np.ones(loss.shape, loss.dtype)}, set())
        out = {u: grads[u] for u in self.leaves if u in grads}
        result = Gradients(self.leaves, out)
        self.consumed = True
        self.nodes = []
        self.release()
        return result


def backward(loss: Tensor) -> Gradients:
    """Run reverse mode on the tape ``loss`` was recorded on."""
    tape = loss._tape
    if tape is None or not loss.requires_grad:
        raise TapeError("loss is detached from any tape")
    return tape.backward(loss)


def record(op: str, inputs: Iterable[Optional[Tensor]], outputs: Sequence[Tensor], vjp, jvp):
    """Record on the active tape if any input needs a gradient."""
    tape = active_tape()
    if tape is None:
        return
    inputs = tuple(inputs)
    if not any(t is not None and t.requires_grad for t in inputs):
        return
    tape.record(op, inputs, outputs, vjp, jvp)
