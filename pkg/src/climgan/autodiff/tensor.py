"""Dense tensors recorded on an append-only tape.

Every differentiable operation appends a :class:`Node` to the active
:class:`Tape`.  Because nodes are appended in execution order, walking the
tape backwards is already a valid topological order for the reverse sweep.
Vector-Jacobian products are themselves written with tape operations, so
running the sweep with ``create_graph=True`` records the backward pass and
its results can be differentiated again.
"""
from __future__ import annotations

import threading
import warnings
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _stack() -> list:
    st = getattr(_state, "stack", None)
    if st is None:
        st = _state.stack = []
    return st


class Node:
    __slots__ = ("out", "inputs", "vjp", "needs", "tape", "index")

    def __init__(self, out, inputs, vjp, needs, tape, index):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp
        self.needs = needs
        self.tape = tape
        self.index = index


class Tape:
    """Append-only operation record.

    Use as a context manager; operations executed inside the ``with`` block
    whose inputs are tracked get recorded.  ``mode`` is ``"first-order"`` by
    default and switches to ``"graph-retaining"`` while a backward pass with
    ``create_graph=True`` is appending its own nodes.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.recording = True
        self.mode = "first-order"

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        st.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.out.node = None
        self.nodes = []


def active_tape() -> Tape | None:
    st = _stack()
    if not st:
        return None
    tape = st[-1]
    if tape is None or not tape.recording:
        return None
    return tape


@contextmanager
def no_grad():
    st = _stack()
    st.append(None)
    try:
        yield
    finally:
        st.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # -- metadata -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implemented in ops) ----------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    if dtype is None and not isinstance(x, np.ndarray):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def is_tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t.node is not None and t.node.tape is tape)


def record(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap ``data`` as the output of an operation, appending a node if needed."""
    out = Tensor(data)
    tape = active_tape()
    if tape is None:
        return out
    needs = tuple(is_tracked(t, tape) for t in inputs)
    if any(needs):
        out.node = Node(out, tuple(inputs), vjp, needs, tape, len(tape.nodes))
        tape.nodes.append(out.node)
    return out


def _accumulate(store: dict, key: int, g: Tensor, create_graph: bool) -> None:
    prev = store.get(key)
    if prev is None:
        store[key] = g
    elif create_graph:
        from . import ops
        store[key] = ops.add(prev, g)
    else:
        store[key] = Tensor(prev.data + g.data)


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    retain_graph: bool = False,
    grad_output: Tensor | np.ndarray | None = None,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Return d(output)/d(input) for every input.

    With ``retain_graph`` the reverse sweep is itself recorded on the
    output's tape, so the returned gradients can be differentiated again.
    Inputs that the output does not depend on get a zero gradient and a
    warning (silenced by ``allow_unused``, e.g. for blocks skipped by
    stochastic depth).
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ValueError(f"grad of non-scalar output with shape {output.shape} needs grad_output")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = as_tensor(grad_output, like=output)

    wanted = {id(t) for t in inputs}
    found: dict[int, Tensor] = {}
    if output.node is None:
        if id(output) in wanted:
            found[id(output)] = seed
    else:
        tape = output.node.tape
        pending: dict[int, Tensor] = {id(output): seed}
        stop = output.node.index
        nodes = tape.nodes[: stop + 1]
        prev_recording, prev_mode = tape.recording, tape.mode
        tape.recording = retain_graph
        tape.mode = "graph-retaining" if retain_graph else "first-order"
        st = _stack()
        st.append(tape)
        try:
            for node in reversed(nodes):
                g = pending.pop(id(node.out), None)
                if g is None:
                    continue
                if id(node.out) in wanted:
                    found[id(node.out)] = g
                in_grads = node.vjp(g, node.needs)
                for inp, need, ig in zip(node.inputs, node.needs, in_grads):
                    if not need or ig is None:
                        continue
                    if inp.node is None or inp.node.tape is not tape:
                        if id(inp) in wanted:
                            _accumulate(found, id(inp), ig, retain_graph)
                    else:
                        _accumulate(pending, id(inp), ig, retain_graph)
        finally:
            st.pop()
            tape.recording, tape.mode = prev_recording, prev_mode

    result = []
    for t in inputs:
        g = found.get(id(t))
        if g is None:
            if not allow_unused:
                warnings.warn("input is not reachable from output; returning zero gradient", stacklevel=2)
            g = Tensor(np.zeros_like(t.data))
        result.append(g)
    return result
