"""Tensor and reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a ``with Tape():`` block nothing
is recorded, which is how inference runs.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericError, UsageError

_active_tapes: list["Tape"] = []


def _as_float_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense float array with an optional gradient slot.

    ``Tensor(data)`` is an ingestion boundary and rejects NaN/Inf.
    Operation outputs are created through :meth:`_wrap`, which skips that scan.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = _as_float_array(data, dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.retains_grad = False

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t.retains_grad = False
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def retain_grad(self):
        """Keep this intermediate's gradient after backward."""
        self.retains_grad = True
        return self

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; implementations live in ops
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
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __pow__(self, exponent):
        from . import ops
        return ops.power(self, exponent)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(_as_float_array(x, dtype))


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of executed primitives.

    Nodes are appended in execution order, so every node's inputs were
    produced by earlier nodes (or are leaves). :meth:`backward` walks the
    record in reverse exactly once; a second call needs :meth:`reset`.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y)
    >>> float(x.grad)
    6.0
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, vjp):
        self.nodes.append(_Node(out, inputs, vjp))

    def reset(self):
        self.nodes = []
        self.consumed = False

    def backward(self, output, seed=None):
        """Accumulate d(output)/d(t) into ``t.grad`` for every recorded tensor.

        Leaf tensors accumulate onto an existing ``grad``. Intermediates only
        keep theirs when flagged with :meth:`Tensor.retain_grad`.
        """
        if self.consumed:
            raise UsageError("tape already replayed; call reset() before a second backward")
        if seed is None:
            if output.size != 1:
                raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
            seed = np.ones_like(output.data)
        grads = {id(output): np.asarray(seed, dtype=output.dtype).reshape(output.shape)}
        refs = {id(output): output}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            refs.pop(id(node.out), None)
            if g is None:
                continue
            if node.out.retains_grad:
                node.out.grad = g
            for inp, ig in zip(node.inputs, node.vjp(g)):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                    refs[key] = inp
        # whatever is left was never produced on this tape: leaves
        for key, g in grads.items():
            leaf = refs[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        self.consumed = True


def current_tape():
    return _active_tapes[-1] if _active_tapes else None


def backward(tape, output):
    """Functional form of :meth:`Tape.backward`."""
    tape.backward(output)
