"""
Reverse-mode automatic differentiation over float64 numpy arrays.

Operations on tensors are appended to a ``CompGraph`` in execution order, so the
append order is a topological order and backpropagation is a single reverse
sweep. Every backward rule is itself written with tensor operations: running a
backward sweep with ``create_graph=True`` records the gradient computation in
the same graph, which makes gradients of gradients available. The meta-gradient
through a policy update and the ranker gradient penalty both depend on that.

Example:
    >>> pv = ParamVector({"w": [1.0, 2.0]})
    >>> grad(lambda p: (p["w"] * p["w"]).sum() / 2.0, pv)["w"]
    array([1., 2.])
"""

import contextlib
import threading
from collections.abc import Mapping
from typing import (
    Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union,
)

import numpy as np

from .exceptions import NumericalError, StructureError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]

_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate operations as constants without recording them."""
    previous = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = previous


@contextlib.contextmanager
def enable_grad() -> Iterator[None]:
    """Re-enable recording inside a ``no_grad`` block."""
    previous = _recording()
    _state.recording = True
    try:
        yield
    finally:
        _state.recording = previous


def _check_finite(value: np.ndarray, op: str, index: Optional[int]) -> None:
    if not np.all(np.isfinite(value)):
        where = f"node #{index} ({op})" if index is not None else f"constant op ({op})"
        raise NumericalError(f"Non-finite value produced by {where}", node_index=index, op=op)


class Tensor:
    """
    A float64 array, optionally attached to a computation graph.

    Tensors created outside a graph (or under ``no_grad``) are constants.
    """

    __slots__ = ("value", "graph", "index")
    # Make numpy defer to our reflected operators (ndarray + Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, value: ArrayLike, graph: Optional["CompGraph"] = None, index: Optional[int] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.graph = graph
        self.index = index

    @property
    def requires_grad(self) -> bool:
        return self.graph is not None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return int(self.value.size)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.value.size != 1:
            raise StructureError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return summation(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis=axis)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Any) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Any) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Any) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Any) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> "Tensor":
        return matmul(other, self)

    def __repr__(self) -> str:
        tag = f", node=#{self.index}" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"


TensorLike = Union[Tensor, np.ndarray, float, int]

# backward(g, out, needs) -> one gradient (or None) per parent
BackwardFn = Callable[[Tensor, Tensor, Tuple[bool, ...]], Sequence[Optional[Tensor]]]


class Node:
    """One recorded primitive operation."""

    __slots__ = ("index", "op", "parents", "backward", "output")

    def __init__(self, index: int, op: str, parents: Tuple[Tensor, ...],
                 backward: Optional[BackwardFn]):
        self.index = index
        self.op = op
        self.parents = parents
        self.backward = backward
        self.output: Optional[Tensor] = None

    def __repr__(self) -> str:
        return f"Node(#{self.index}, {self.op}, parents={[p.index for p in self.parents]})"


class CompGraph:
    """
    Append-only record of primitive operations.

    A graph is used by one thread at a time; separate graphs share nothing.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value: ArrayLike, name: str = "leaf") -> Tensor:
        """Create a differentiable input."""
        value = np.array(value, dtype=np.float64)
        return self._record(f"leaf:{name}", value, (), None)

    def watch(self, params: "ParamVector", prefix: str = "") -> Dict[str, Tensor]:
        """Create one leaf per parameter segment."""
        return {name: self.leaf(value, name=f"{prefix}{name}") for name, value in params.items()}

    def _record(self, op: str, value: np.ndarray, parents: Tuple[Tensor, ...],
                backward: Optional[BackwardFn]) -> Tensor:
        index = len(self.nodes)
        _check_finite(value, op, index)
        node = Node(index, op, parents, backward)
        out = Tensor(value, self, index)
        node.output = out
        self.nodes.append(node)
        return out

    def gradients(self, output: TensorLike, wrt: Sequence[Tensor],
                  create_graph: bool = False) -> List[Tensor]:
        """
        Backpropagate a scalar output to the given tensors.

        Args:
            output: Scalar tensor recorded in this graph
            wrt: Tensors to differentiate with respect to
            create_graph: Record the backward sweep so its results are differentiable

        Returns:
            One gradient per entry of ``wrt`` (zeros where there is no dependence)
        """
        output = as_tensor(output)
        if output.size != 1:
            raise StructureError(f"gradients need a scalar output, got shape {output.shape}")
        for t in wrt:
            if t.requires_grad and t.graph is not self:
                raise StructureError("gradient requested for a tensor of another graph")

        found: Dict[int, Tensor] = {}
        if output.requires_grad:
            if output.graph is not self:
                raise StructureError("output belongs to another graph")
            wanted = {t.index for t in wrt if t.requires_grad}
            grads: Dict[int, Tensor] = {output.index: Tensor(np.ones(output.shape))}
            context = contextlib.nullcontext() if create_graph else no_grad()
            with context:
                for i in range(output.index, -1, -1):
                    g = grads.pop(i, None)
                    if g is None:
                        continue
                    if i in wanted:
                        found[i] = g
                    node = self.nodes[i]
                    if node.backward is None:
                        continue
                    needs = tuple(p.graph is self for p in node.parents)
                    if not any(needs):
                        continue
                    parent_grads = node.backward(g, node.output, needs)
                    for parent, pg, need in zip(node.parents, parent_grads, needs):
                        if not need or pg is None:
                            continue
                        if parent.index in grads:
                            grads[parent.index] = grads[parent.index] + pg
                        else:
                            grads[parent.index] = pg

        return [
            found[t.index] if t.requires_grad and t.index in found else Tensor(np.zeros(t.shape))
            for t in wrt
        ]

    def grad(self, output: TensorLike, wrt: Mapping, create_graph: bool = False) -> Dict[str, Tensor]:
        """Dictionary form of ``gradients``."""
        names = list(wrt.keys())
        values = self.gradients(output, [wrt[n] for n in names], create_graph=create_graph)
        return dict(zip(names, values))


def as_tensor(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _apply(op: str, value: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    tracked = [p for p in parents if p.requires_grad]
    if not tracked or not _recording():
        _check_finite(value, op, None)
        return Tensor(value)
    graph = tracked[0].graph
    for p in tracked[1:]:
        if p.graph is not graph:
            raise StructureError(f"{op}: operands belong to different graphs")
    return graph._record(op, np.asarray(value, dtype=np.float64), parents, backward)


def _normalize_axes(axis: Union[int, Tuple[int, ...]], ndim: int) -> Tuple[int, ...]:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def _unbroadcast(g: Tensor, shape: Tuple[int, ...]) -> Tensor:
    """Sum a broadcast gradient back down to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = summation(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = summation(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, out, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    with np.errstate(all="ignore"):
        value = a.value + b.value
    return _apply("add", value, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, out, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(neg(g), b.shape) if needs[1] else None)

    with np.errstate(all="ignore"):
        value = a.value - b.value
    return _apply("sub", value, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, out, needs):
        return (_unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                _unbroadcast(mul(g, a), b.shape) if needs[1] else None)

    with np.errstate(all="ignore"):
        value = a.value * b.value
    return _apply("mul", value, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, out, needs):
        return (_unbroadcast(div(g, b), a.shape) if needs[0] else None,
                _unbroadcast(neg(div(mul(g, out), b)), b.shape) if needs[1] else None)

    with np.errstate(all="ignore"):
        value = a.value / b.value
    return _apply("div", value, (a, b), backward)


def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _apply("neg", -a.value, (a,), lambda g, out, needs: (neg(g),))


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise StructureError(f"matmul supports 2-D operands only, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise StructureError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g, out, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return _apply("matmul", a.value @ b.value, (a, b), backward)


def transpose(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise StructureError(f"transpose supports 2-D tensors only, got {a.shape}")
    return _apply("transpose", a.value.T.copy(), (a,), lambda g, out, needs: (transpose(g),))


def reshape(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _apply("reshape", a.value.reshape(shape), (a,),
                  lambda g, out, needs: (reshape(g, original),))


def broadcast_to(a: TensorLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    value = np.broadcast_to(a.value, shape).copy()
    return _apply("broadcast_to", value, (a,),
                  lambda g, out, needs: (_unbroadcast(g, original),))


def summation(a: TensorLike, axis: Optional[Union[int, Tuple[int, ...]]] = None,
              keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    if axis is None:
        kept_shape = (1,) * len(original)
    else:
        axes = _normalize_axes(axis, len(original))
        kept_shape = tuple(1 if i in axes else n for i, n in enumerate(original))

    def backward(g, out, needs):
        return (broadcast_to(reshape(g, kept_shape), original),)

    return _apply("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: TensorLike, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return div(summation(a, axis=axis), float(max(count, 1)))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _apply("tanh", np.tanh(a.value), (a,),
                  lambda g, out, needs: (mul(g, sub(1.0, mul(out, out))),))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        value = np.exp(a.value)
    return _apply("exp", value, (a,), lambda g, out, needs: (mul(g, out),))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        value = np.log(a.value)
    return _apply("log", value, (a,), lambda g, out, needs: (div(g, a),))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        value = np.sqrt(a.value)
    return _apply("sqrt", value, (a,), lambda g, out, needs: (div(mul(g, 0.5), out),))


def clip(a: TensorLike, low: float, high: float) -> Tensor:
    """Clip values; the pass-through mask is a constant, so clipped entries get zero gradient."""
    a = as_tensor(a)
    mask = ((a.value >= low) & (a.value <= high)).astype(np.float64)
    return _apply("clip", np.clip(a.value, low, high), (a,),
                  lambda g, out, needs: (mul(g, mask),))


def logsumexp(a: TensorLike) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor, returning shape (rows,)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise StructureError(f"logsumexp expects a 2-D tensor, got {a.shape}")
    peak = np.max(a.value, axis=1, keepdims=True)
    value = (peak + np.log(np.sum(np.exp(a.value - peak), axis=1, keepdims=True)))[:, 0]
    rows = a.shape[0]

    def backward(g, out, needs):
        soft = exp(sub(a, reshape(out, (rows, 1))))
        return (mul(reshape(g, (rows, 1)), soft),)

    return _apply("logsumexp", value, (a,), backward)


def concat(tensors: Sequence[TensorLike], axis: int = 1) -> Tensor:
    """Concatenate 2-D tensors along columns (``axis=1``) or rows (``axis=0``)."""
    parts = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g, out, needs):
        return tuple(
            slice_axis(g, int(bounds[k]), int(bounds[k + 1]), axis) if needs[k] else None
            for k in range(len(parts))
        )

    value = np.concatenate([p.value for p in parts], axis=axis)
    return _apply("concat", value, tuple(parts), backward)


def slice_axis(a: TensorLike, start: int, stop: int, axis: int = 1) -> Tensor:
    """Take ``[start:stop]`` along one axis of a 2-D tensor."""
    a = as_tensor(a)
    total = a.shape[axis]

    def backward(g, out, needs):
        pieces = []
        other = a.shape[1 - axis]
        if start > 0:
            pieces.append(np.zeros((other, start) if axis == 1 else (start, other)))
        pieces.append(g)
        if stop < total:
            width = total - stop
            pieces.append(np.zeros((other, width) if axis == 1 else (width, other)))
        return (concat(pieces, axis=axis) if len(pieces) > 1 else g,)

    index = (slice(None), slice(start, stop)) if axis == 1 else (slice(start, stop), slice(None))
    return _apply("slice", a.value[index].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def sigmoid(a: TensorLike) -> Tensor:
    # tanh form stays finite for arbitrarily large inputs
    return mul(add(tanh(mul(a, 0.5)), 1.0), 0.5)


def log_softmax(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return sub(a, reshape(logsumexp(a), (a.shape[0], 1)))


def softmax(a: TensorLike) -> Tensor:
    return exp(log_softmax(a))


def square(a: TensorLike) -> Tensor:
    return mul(a, a)


def dot(a: TensorLike, b: TensorLike) -> Tensor:
    return summation(mul(a, b))


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------

class ParamVector(Mapping):
    """
    Ordered, immutable collection of named float64 parameter segments.

    Args:
        segments: Mapping or sequence of ``(name, array)`` pairs; names must be unique
    """

    def __init__(self, segments: Union[Mapping, Iterable[Tuple[str, ArrayLike]]] = ()):
        items = list(segments.items()) if isinstance(segments, Mapping) else list(segments)
        self._segments: Dict[str, np.ndarray] = {}
        for name, value in items:
            if name in self._segments:
                raise StructureError(f"Duplicate segment name: {name}", {"segment": name})
            array = np.array(value.value if isinstance(value, Tensor) else value, dtype=np.float64)
            array.setflags(write=False)
            self._segments[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._segments)

    def __len__(self) -> int:
        return len(self._segments)

    @property
    def total_len(self) -> int:
        return int(sum(v.size for v in self._segments.values()))

    def structure(self) -> Tuple[Tuple[str, Tuple[int, ...]], ...]:
        return tuple((name, value.shape) for name, value in self._segments.items())

    def check_same_structure(self, other: Mapping, what: str = "parameter vectors") -> None:
        theirs = tuple((n, tuple(np.shape(other[n].value if isinstance(other[n], Tensor) else other[n])))
                       for n in other)
        if self.structure() != theirs:
            raise StructureError(
                f"Structure mismatch between {what}",
                {"expected": self.structure(), "got": theirs},
            )

    def flatten(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._segments.values()])

    def unflatten(self, flat: ArrayLike) -> "ParamVector":
        """Build a vector with this structure from a flat array."""
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != self.total_len:
            raise StructureError(f"Flat length {flat.size} does not match {self.total_len}")
        out, offset = [], 0
        for name, value in self._segments.items():
            out.append((name, flat[offset:offset + value.size].reshape(value.shape)))
            offset += value.size
        return ParamVector(out)

    def zeros_like(self) -> "ParamVector":
        return ParamVector((n, np.zeros_like(v)) for n, v in self._segments.items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamVector":
        return ParamVector((n, fn(v)) for n, v in self._segments.items())

    def combine(self, other: Mapping, fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ParamVector":
        self.check_same_structure(other)
        return ParamVector((n, fn(v, np.asarray(other[n]))) for n, v in self._segments.items())

    def equals(self, other: "ParamVector") -> bool:
        """Bit-exact equality of structure and values."""
        return (self.structure() == other.structure()
                and all(np.array_equal(v, other[n]) for n, v in self._segments.items()))

    def to_records(self, group: str) -> List[Dict[str, Any]]:
        """JSON-ready segment records, floats kept bit-exact by ``repr`` round-tripping."""
        return [
            {"group": group, "name": name, "shape": list(value.shape), "data": value.ravel().tolist()}
            for name, value in self._segments.items()
        ]

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "ParamVector":
        items = []
        for record in records:
            shape = tuple(record["shape"])
            data = np.asarray(record["data"], dtype=np.float64)
            if data.size != int(np.prod(shape)):
                raise StructureError(f"Segment {record['name']} has {data.size} values for shape {shape}")
            items.append((record["name"], data.reshape(shape)))
        return cls(items)

    def __repr__(self) -> str:
        return f"ParamVector({len(self)} segments, total_len={self.total_len})"


def to_param_vector(tensors: Mapping) -> ParamVector:
    return ParamVector((name, as_tensor(t).value) for name, t in tensors.items())


LossFn = Callable[[Dict[str, Tensor]], TensorLike]


def value_and_grad(loss: LossFn, at: ParamVector) -> Tuple[float, ParamVector]:
    """Evaluate ``loss`` and its gradient at ``at`` in a fresh graph."""
    graph = CompGraph()
    leaves = graph.watch(at)
    out = as_tensor(loss(leaves))
    grads = graph.grad(out, leaves)
    return out.item(), to_param_vector(grads)


def grad(loss: LossFn, at: ParamVector) -> ParamVector:
    """Gradient of a scalar loss, with the same segment structure as ``at``."""
    return value_and_grad(loss, at)[1]


def mixed_second_vjp(v: ParamVector, loss: Callable[[Dict[str, Tensor], Dict[str, Tensor]], TensorLike],
                     theta: ParamVector, psi: ParamVector) -> ParamVector:
    """
    Compute d/dpsi [ v . grad_theta loss(theta, psi) ].

    This is the product of ``v`` with the mixed second-derivative block of the loss.
    """
    theta.check_same_structure(v, "v and theta")
    graph = CompGraph()
    t_leaves = graph.watch(theta, prefix="theta.")
    p_leaves = graph.watch(psi, prefix="psi.")
    out = loss(t_leaves, p_leaves)
    g_theta = graph.grad(out, t_leaves, create_graph=True)
    inner = sum((dot(g_theta[n], v[n]) for n in theta), Tensor(0.0))
    return to_param_vector(graph.grad(inner, p_leaves))


def finite_diff_grad(loss: LossFn, at: ParamVector, step: float = 1e-5) -> ParamVector:
    """Central-difference gradient, one coordinate at a time."""
    if step <= 0:
        raise ValueError("finite difference step must be positive")
    flat = at.flatten()
    out = np.zeros_like(flat)

    def evaluate(x: np.ndarray) -> float:
        params = at.unflatten(x)
        with no_grad():
            return as_tensor(loss({n: Tensor(v) for n, v in params.items()})).item()

    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        out[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
    return at.unflatten(out)


def relative_error(a: Union[ParamVector, ArrayLike], b: Union[ParamVector, ArrayLike]) -> float:
    """Max-norm relative error ``|a - b|_inf / max(|a|_inf, |b|_inf, 1e-12)``."""
    x = a.flatten() if isinstance(a, ParamVector) else np.asarray(a, dtype=np.float64).ravel()
    y = b.flatten() if isinstance(b, ParamVector) else np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise StructureError(f"Cannot compare shapes {x.shape} and {y.shape}")
    if x.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(x))), float(np.max(np.abs(y))), 1e-12)
    return float(np.max(np.abs(x - y))) / scale
