"""Dense tensor with tape-based reverse-mode automatic differentiation.

Ops record onto the tape that is active on the current thread (``with Tape():``)
whenever one of their inputs requires a gradient. Outside a tape nothing is
recorded, which is how inference runs.
"""
import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ContractError

logger = logging.getLogger(__name__)

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops; inputs always precede their outputs."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", backward: BackwardFn) -> None:
        output.tape_id = len(self.nodes)
        output._tape = self
        self.nodes.append(Node(op, inputs, output, backward))

    def reset(self) -> None:
        for node in self.nodes:
            node.output.tape_id = None
            node.output._tape = None
        self.nodes = []
        self.consumed = False

    def backward(self, loss: "Tensor") -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss is not connected to this tape")
        if self.consumed:
            raise ContractError("backward already ran on this tape; call reset() first")
        self.consumed = True

        leaves = {}
        for node in self.nodes:
            for tensor in node.inputs:
                if tensor.requires_grad and tensor._tape is not self:
                    leaves[id(tensor)] = tensor

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.tape_id + 1]):
            grad = grads.pop(id(node.output), None)
            if grad is None:
                continue
            node.output.grad = grad
            for tensor, g in zip(node.inputs, node.backward(grad)):
                if g is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                grads[key] = grads[key] + g if key in grads else g

        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        logger.debug("backward over %d nodes, %d leaves", loss.tape_id + 1, len(leaves))


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(loss: "Tensor") -> None:
    """Populate ``grad`` on every tensor that fed ``loss`` through its tape."""
    if loss._tape is None:
        raise ContractError("loss was not computed under an active tape")
    loss._tape.backward(loss)


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op: str, macs: int) -> None:
        self.total += macs
        self.by_op[op] = self.by_op.get(op, 0) + macs


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates issued by matmul, einsum and conv2d."""
    counter = MacCounter()
    if not hasattr(_local, "counters"):
        _local.counters = []
    _local.counters.append(counter)
    try:
        yield counter
    finally:
        _local.counters.pop()


def add_macs(op: str, macs: int) -> None:
    for counter in getattr(_local, "counters", ()):
        counter.add(op, int(macs))


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data, dtype=dtype)
        if dtype is None and array.dtype.kind != "f":
            array = array.astype(np.float32)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    # --- introspection ------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operators ----------------------------------------------------------
    def __add__(self, other):
        return F.add(self, other)

    def __radd__(self, other):
        return F.add(other, self)

    def __sub__(self, other):
        return F.sub(self, other)

    def __rsub__(self, other):
        return F.sub(other, self)

    def __mul__(self, other):
        return F.mul(self, other)

    def __rmul__(self, other):
        return F.mul(other, self)

    def __truediv__(self, other):
        return F.div(self, other)

    def __rtruediv__(self, other):
        return F.div(other, self)

    def __neg__(self):
        return F.mul(self, -1.0)

    def __pow__(self, exponent: float):
        return F.power(self, exponent)

    def __matmul__(self, other):
        return F.matmul(self, other)

    def __getitem__(self, index):
        return F.index(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return F.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    """Wrap ``out`` in a tensor and record the op if any input needs a gradient."""
    inputs = tuple(inputs)
    needs_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(op, inputs, result, backward_fn)
    return result


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or np.float32))


from brain import functional as F  # noqa: E402
