"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a float64 or complex128 ndarray and remembers how it was
produced. Running an operation records a backprop closure; calling
``backward()`` on a scalar result replays the recorded graph in reverse
topological order, accumulating gradients on every tensor that requires
them.

Gradient convention for complex intermediates: the stored gradient of a
complex tensor z is dL/dRe(z) + 1j*dL/dIm(z). For a C-linear map y = A x
this makes the backward rule simply g_x = A^H g_y; when a real tensor feeds
a complex operation, the accumulated gradient is the real part of that
product. All losses are real scalars.
"""
from __future__ import annotations

import os

import numpy as np

REAL = np.float64
COMPLEX = np.complex128


def check_finite_enabled() -> bool:
    """Checked mode: validate every created tensor for NaN/Inf."""
    return os.environ.get("MIFNO_CHECK_FINITE", "0") not in ("0", "", "false", "False")


class Tensor:
    """Dense array node of a computation graph.

    Parameters
    ----------
    data : array-like
        Values; coerced to float64 (real input) or complex128.
    requires_grad : bool
        Mark as a trainable leaf. Derived tensors inherit the flag from
        their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "name")

    def __init__(self, data, requires_grad=False, parents=(), name=None):
        arr = np.asarray(data)
        arr = arr.astype(COMPLEX if np.iscomplexobj(arr) else REAL, copy=False)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if check_finite_enabled() and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor" + (f" {name!r}" if name else ""))
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backprop = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        """Add a cotangent to this tensor's gradient buffer.

        Real tensors flowing into complex operations receive the real part
        (the imaginary direction does not exist for them).
        """
        if not self.requires_grad:
            return
        if self.data.dtype == REAL and np.iscomplexobj(g):
            g = np.real(g)
        if self.grad is None:
            gdtype = COMPLEX if self.data.dtype == COMPLEX else REAL
            if isinstance(g, np.ndarray) and g.shape == self.data.shape and g.dtype == gdtype:
                # first touch: a private copy beats zero-fill plus add
                self.grad = g.copy()
                return
            self.grad = np.zeros(self.data.shape, dtype=gdtype)
        self.grad += g

    def backward(self, seed=None):
        """Backpropagate from this tensor.

        Without a seed the tensor must hold a single element (a scalar
        loss) and is seeded with one. Gradients accumulate into ``.grad``
        of every reachable tensor with ``requires_grad``.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        tape = GradientTape(self)
        tape.replay_backward(np.asarray(seed))


class GradientTape:
    """Topologically ordered view of the graph that produced a tensor.

    Construction walks the parent links once (iteratively, so arbitrarily
    deep graphs are fine); ``replay_backward`` then visits every node
    exactly once in reverse order.
    """

    def __init__(self, root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.nodes = order  # parents precede consumers
        self.root = root

    def replay_backward(self, seed):
        if not self.root.requires_grad:
            # nothing trainable feeds this value
            return
        self.root.accumulate(seed)
        for node in reversed(self.nodes):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)


def make_op(data, parents, backprop, name=None):
    """Record one primitive: result tensor plus its backprop closure.

    When no parent is differentiable the closure and parent links are
    dropped so inference builds no graph.
    """
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, parents=parents if req else (), name=name)
    if req:
        out._backprop = backprop
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def gradients(loss: Tensor, params) -> dict:
    """Gradient map for named parameters of a scalar loss.

    Parameters never touched by the loss get zero gradients, matching the
    contract that every trainable leaf receives a value.
    """
    for p in params.values():
        p.zero_grad()
    loss.backward()
    out = {}
    for name, p in params.items():
        if p.grad is None:
            gdtype = COMPLEX if p.data.dtype == COMPLEX else REAL
            out[name] = np.zeros(p.data.shape, dtype=gdtype)
        else:
            out[name] = p.grad
    return out
