"""Dense tensors with reverse-mode automatic differentiation on a recorded tape.

The computation graph is rebuilt on every forward pass (define-by-run): each
differentiable operation appends one node to the active ``Graph``, so append
order is a topological order and the backward sweep is a single reverse walk
over the node list. The tape is meant to be short-lived: record a forward
pass, call :func:`backward` once, then drop it via :func:`reset_graph` or
:func:`fresh_graph`.

Everything runs single-threaded on numpy, so gradient accumulation order is
fixed by construction and two runs from the same seed are bit-identical.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class AutogradError(RuntimeError):
    pass


class ShapeMismatch(AutogradError):
    pass


class NonFiniteError(AutogradError):
    pass


class Tensor:
    """N-dimensional array with optional gradient storage.

    A tensor is immutable after construction except for its ``grad`` buffer.
    ``node_id`` points at the graph node that produced it (None for leaves).
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "graph", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.graph: "Graph | None" = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutogradError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        nm = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{nm})"

    # Small operator sugar; the real API is the module-level functions.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return affine(self, 1.0, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return affine(self, 1.0, -float(other))

    def sum(self) -> "Tensor":
        return reduce_sum(self)


class Node:
    """One recorded operation: inputs, output, and its forward/backward rules."""

    __slots__ = ("id", "op", "inputs", "input_ids", "output", "fwd", "bwd")

    def __init__(self, node_id, op, inputs, input_ids, output, fwd, bwd):
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.input_ids = input_ids
        self.output = output
        self.fwd = fwd
        self.bwd = bwd


class Graph:
    """Append-only tape of recorded operations.

    Node inputs always precede the node itself, so ``nodes`` is already
    topologically sorted. ``checkpoints`` maps instrumentation labels to node
    ids for later inspection.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.checkpoints: dict[str, int] = {}
        self._backward_ran = False

    def record(self, op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
               fwd: Callable[[], np.ndarray], bwd: Callable[[np.ndarray], None]) -> Tensor:
        out = Tensor(out_data, requires_grad=True)
        out.graph = self
        out.node_id = len(self.nodes)
        input_ids = tuple(t.node_id if t.graph is self else None for t in inputs)
        self.nodes.append(Node(out.node_id, op, tuple(inputs), input_ids, out, fwd, bwd))
        return out

    def mark(self, label: str, tensor: Tensor) -> None:
        if tensor.graph is not self or tensor.node_id is None:
            raise AutogradError(f"cannot checkpoint {label!r}: tensor was not recorded on this graph")
        self.checkpoints[label] = tensor.node_id

    def backward(self, loss: Tensor, blocked: Iterable[Tensor] = ()) -> None:
        if self._backward_ran:
            raise AutogradError("backward already ran on this graph; record a fresh forward pass first")
        if loss.graph is not self or loss.node_id is None:
            raise AutogradError("loss tensor is not connected to this graph")
        if loss.data.size != 1:
            raise AutogradError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
        self._backward_ran = True

        blocked_ids = {id(t) for t in blocked}
        loss.grad = np.ones_like(loss.data)
        for i in range(loss.node_id, -1, -1):
            node = self.nodes[i]
            g = node.output.grad
            if g is None:
                continue
            if id(node.output) in blocked_ids:
                continue
            node.bwd(g)

    def replay(self) -> list[np.ndarray]:
        """Re-execute every node's forward rule from its recorded inputs."""
        return [node.fwd() for node in self.nodes]

    def check_finite(self) -> None:
        for node in self.nodes:
            if not np.isfinite(node.output.data).all():
                raise NonFiniteError(f"non-finite values produced by op {node.op!r} (node {node.id})")


_ACTIVE = Graph()
_RECORDING = True


def active_graph() -> Graph:
    return _ACTIVE


def reset_graph() -> Graph:
    """Discard the active tape and start a new one."""
    global _ACTIVE
    _ACTIVE = Graph()
    return _ACTIVE


@contextlib.contextmanager
def fresh_graph():
    """Record onto a temporary tape, restoring the previous one on exit."""
    global _ACTIVE
    saved = _ACTIVE
    _ACTIVE = Graph()
    try:
        yield _ACTIVE
    finally:
        _ACTIVE = saved


@contextlib.contextmanager
def no_record():
    """Compute values without recording nodes (inference / finite differences)."""
    global _RECORDING
    saved = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = saved


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution into a tensor's grad buffer."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def record_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              fwd: Callable[[], np.ndarray], bwd: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result: records a node when grads are needed, else a plain tensor."""
    if _RECORDING and any(t.requires_grad for t in inputs):
        return _ACTIVE.record(op, inputs, out_data, fwd, bwd)
    return Tensor(out_data)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shape {tuple(a.shape)} does not match {tuple(b.shape)}")
    if a.dtype != b.dtype:
        raise ShapeMismatch(f"{op}: dtype {a.dtype} does not match {b.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def bwd(g):
        accumulate(a, g)
        accumulate(b, g)

    return record_op("add", (a, b), a.data + b.data, lambda: a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def bwd(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return record_op("mul", (a, b), a.data * b.data, lambda: a.data * b.data, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def bwd(g):
        accumulate(a, g * s)

    return record_op("scale", (a,), a.data * s, lambda: a.data * s, bwd)


def affine(a: Tensor, m: float, c: float) -> Tensor:
    """Element-wise m*a + c with scalar m, c."""
    m = a.data.dtype.type(m)
    c = a.data.dtype.type(c)

    def bwd(g):
        accumulate(a, g * m)

    return record_op("affine", (a,), a.data * m + c, lambda: a.data * m + c, bwd)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all elements, returned as a shape-(1,) tensor."""
    out = np.array([a.data.sum()], dtype=a.data.dtype)

    def bwd(g):
        accumulate(a, np.full_like(a.data, g[0]))

    return record_op("reduce_sum", (a,), out, lambda: np.array([a.data.sum()], dtype=a.data.dtype), bwd)


def backward(loss: Tensor, blocked: Iterable[Tensor] = ()) -> None:
    """Populate grads of every tensor reachable from ``loss``.

    ``blocked`` suppresses propagation out of the given tensors: they still
    receive their own gradient but are treated as constants with respect to
    everything upstream of them.
    """
    if loss.graph is None:
        raise AutogradError("loss tensor is not connected to a recorded graph")
    loss.graph.backward(loss, blocked)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central finite differences.

    Returns the max over elements of |analytic - numeric| / max(|analytic|,
    |numeric|, 1e-12). Requires float64 input; raises on non-finite
    intermediates, naming the offending op node.
    """
    if x.dtype != np.float64:
        raise AutogradError(f"grad_check requires a float64 tensor, got {x.dtype}")
    x.grad = None
    with fresh_graph() as g:
        out = f(x)
        if out.data.size != 1:
            raise AutogradError(f"grad_check needs a scalar-valued function, got shape {tuple(out.shape)}")
        g.check_finite()
        if out.graph is g and out.node_id is not None:
            g.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with fresh_graph(), no_record():
            fp = float(f(x).data.reshape(-1)[0])
        flat[i] = orig - eps
        with fresh_graph(), no_record():
            fm = float(f(x).data.reshape(-1)[0])
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
