"""Dense tensors and a reverse-mode tape.

Operations record themselves only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = F.sum(F.sigmoid(w))
    tape.backward(loss)       # w.grad is now populated

Outside a tape every op is plain numpy, which keeps inference cheap.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import DetachedLoss, NotScalarLoss

_state = threading.local()


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def active_tape():
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def astype(self, dtype):
        return Tensor(self.data, self.requires_grad, dtype=dtype, name=self.name)

    def backward(self):
        if self._tape is None:
            raise DetachedLoss("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def make_result(data, parents, backward):
    """Wrap an op output and record it on the active tape when needed.

    ``backward`` maps the output gradient to one gradient (or None) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._tape = None
    out._parents = ()
    out._backward = None
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._tape = tape
        tape.nodes.append(out)
    return out


class Tape:
    """Ordered record of executed ops; each node's inputs precede it."""

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

        Gradients add to whatever is already stored, so calling this twice
        without zeroing doubles them.
        """
        if loss.size != 1:
            raise NotScalarLoss(f"loss has shape {loss.shape}")
        if loss._tape is not self:
            raise DetachedLoss("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)
