"""Reverse-mode autodiff: a dynamically built per-forward tape.

A ``GradTape`` is entered as a context manager; kernels in ops.py append one
node per executed op when any input requires grad. ``backward`` walks the
node list once, in reverse execution order. Tapes are confined to a single
thread (thread-local active stack); tensors with ``requires_grad=False``
never accumulate gradients.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import InvalidShapeError

_tls = threading.local()


def _stack():
    if not hasattr(_tls, "tapes"):
        _tls.tapes = []
    return _tls.tapes


def active_tape():
    """The innermost open tape on this thread, or None (inference mode)."""
    st = _stack()
    return st[-1] if st else None


class Tensor:
    """Dense n-d array of reals plus grad bookkeeping.

    ``data`` is always a numpy array (float32 in training, float64 under
    gradient checking). ``grad`` is populated by ``GradTape.backward`` for
    tensors with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def param(data, dtype=np.float32) -> Tensor:
    """Leaf tensor that training updates."""
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of executed kernels with what backward needs."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.visited = 0  # nodes processed by the last backward()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        assert st and st[-1] is self, "tape stack corrupted (tapes are single-threaded)"
        st.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, inputs, backward_fn):
        out.requires_grad = True
        self._nodes.append(_Node(out, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
        if loss.data.size != 1:
            raise InvalidShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        self.visited = 0
        for node in reversed(self._nodes):
            g = node.out.grad
            if g is None:  # branch not connected to the loss
                continue
            grads = node.backward_fn(g)
            for t, gt in zip(node.inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                t.grad = gt if t.grad is None else t.grad + gt
            node.out.grad = None  # op outputs are single-producer; free eagerly
            self.visited += 1
        self._nodes.clear()
