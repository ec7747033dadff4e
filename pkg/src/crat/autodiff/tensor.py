"""Dense float32 tensors with a reverse-mode tape.

Every differentiable op creates its output through :func:`make_result`, which
stamps it with a monotonically increasing sequence number.  Since a node's
inputs always exist before the node itself, sorting the reachable nodes by
descending sequence number yields exactly the reverse execution order, and
that is the order :meth:`Tensor.backward` visits them.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPE = np.float32
_compute_dtype = DTYPE

_seq_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def compute_dtype():
    return _compute_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Run ops in ``dtype`` inside the block (float64 for gradient oracles)."""
    global _compute_dtype
    prev = _compute_dtype
    _compute_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _compute_dtype = prev


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=_compute_dtype)
    arr.flags.writeable = False
    return arr


class Tensor:
    """Row-major float32 array plus optional gradient tracking.

    The wrapped array is read-only; ops and optimizers always produce new
    arrays.  Leaf tensors created with ``requires_grad=True`` accumulate
    gradients into ``.grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _frozen(np.array(data, dtype=_compute_dtype))
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self._seq = next(_seq_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def set_data(self, arr: np.ndarray) -> None:
        """Replace the value (used by optimizers and checkpoint loading)."""
        arr = np.asarray(arr, dtype=_compute_dtype)
        if arr.shape != self.data.shape:
            from ..errors import DimensionError

            raise DimensionError(f"cannot assign shape {arr.shape} to tensor of shape {self.data.shape}")
        self.data = _frozen(arr.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar, implemented in ops
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from .ops import mul

        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)

    def backward(self, grad=None, trace: Optional[list] = None) -> None:
        """Back-propagate from this tensor.

        ``grad`` defaults to ones for scalar outputs.  Passing a ``trace``
        list records the op names in the order their backward rules ran.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=_compute_dtype).reshape(self.shape)
        if self._backward is None:
            if self.requires_grad:
                self.grad = grad.copy() if self.grad is None else self.grad + grad
            return

        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        order = sorted((n for n in nodes.values() if n._backward is not None), key=lambda n: n._seq, reverse=True)

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if trace is not None:
                trace.append(node.op)
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=_compute_dtype)
                if parent._backward is None:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result, recording the backward rule when any input needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = _frozen(data)
    out.grad = None
    out._seq = next(_seq_counter)
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out
