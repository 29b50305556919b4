"""Dense tensors with reverse-mode automatic differentiation."""
import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_SEQUENCE = itertools.count()
_STATE = threading.local()
_DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Operands of a primitive do not conform."""

    def __init__(self, op: str, *shapes: Tuple[int, ...], detail: str = ""):
        shape_text = ", ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = shapes


class GradientError(RuntimeError):
    pass


def set_default_dtype(dtype) -> None:
    """Select float64 (gradient checks) or float32 (experiments)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported dtype: {dtype}")

    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = previous


def are_parameters_frozen() -> bool:
    return getattr(_STATE, "frozen", False)


@contextmanager
def frozen_parameters() -> Iterator[None]:
    """Treat masked parameters as constants on the current thread.

    Inputs still record gradients; attack passes rely on that.
    """
    previous = are_parameters_frozen()
    _STATE.frozen = True
    try:
        yield
    finally:
        _STATE.frozen = previous


@dataclass
class Node:
    """One recorded primitive application."""

    seq: int
    op: str
    parents: Tuple["Tensor", ...]
    backward: BackwardFn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data

        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE

        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -------------------------------------------------------------------------

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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, (), detail="expected a single element")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------------------

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Populate grads of every reachable tensor that requires them."""
        if self.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {self.shape}")

        tape = Tape.record(self)
        if not tape:
            raise GradientError("backward called on a tensor with an empty tape")

        if seed is None:
            seed = np.ones_like(self.data)

        tape.backward(self, seed)

    # -------------------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return add(other, neg(self))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self) -> "Tensor":
        return relu(self)


class Tape:
    """Ordered record of the nodes reachable from a root tensor.

    Nodes are kept in recording order; sequence numbers only grow, so a
    consumer is always recorded after its producers and replaying the record
    in reverse is a valid topological order for the adjoint pass.
    """

    def __init__(self, entries: List[Tuple[Tensor, Node]], leaves: List[Tensor]):
        self.entries = entries
        self.leaves = leaves

    def __len__(self) -> int:
        return len(self.entries)

    @staticmethod
    def record(root: Tensor) -> "Tape":
        entries: List[Tuple[Tensor, Node]] = []
        leaves: List[Tensor] = []
        seen = set()
        stack = [root]
        while stack:
            tensor = stack.pop()
            if id(tensor) in seen:
                continue

            seen.add(id(tensor))
            if tensor._node is None:
                if tensor.requires_grad:
                    leaves.append(tensor)
                continue

            entries.append((tensor, tensor._node))
            stack.extend(tensor._node.parents)

        entries.sort(key=lambda entry: entry[1].seq)
        return Tape(entries, leaves)

    def backward(self, root: Tensor, seed: np.ndarray) -> None:
        grads: Dict[int, np.ndarray] = {id(root): np.asarray(seed, dtype=root.dtype)}
        for tensor, node in reversed(self.entries):
            upstream = grads.get(id(tensor))
            if upstream is None:
                continue

            parent_grads = node.backward(upstream)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if (parent_grad is None) or (not parent.requires_grad):
                    continue

                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

        targets = [tensor for tensor, _node in self.entries if tensor.requires_grad]
        targets.extend(self.leaves)
        for tensor in targets:
            grad = grads.get(id(tensor))
            if grad is None:
                grad = np.zeros_like(tensor.data)
            else:
                grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)

            tensor.grad = grad if tensor.grad is None else tensor.grad + grad


# -----------------------------------------------------------------------------


def _as_tensor(value: ArrayLike, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value

    return Tensor(value, dtype=dtype)


def record(
    data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str
) -> Tensor:
    """Wrap a primitive's output and record it when any parent needs gradients."""
    out = Tensor(data, dtype=data.dtype if isinstance(data, np.ndarray) else None)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(next(_SEQUENCE), op, tuple(parents), backward)

    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)

    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)

    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeError(op, a.shape, b.shape) from err


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("add", a, b)

    def backward(g: np.ndarray):
        return (
            unbroadcast(g, a.shape) if a.requires_grad else None,
            unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return record(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a.dtype)
    _broadcast_shape("mul", a, b)

    def backward(g: np.ndarray):
        return (
            unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return record(a.data * b.data, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g: np.ndarray):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return record(a.data @ b.data, (a, b), backward, "matmul")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    def backward(g: np.ndarray):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]

    def backward(g: np.ndarray):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record(np.asarray(a.data.mean(axis=axis)), (a,), backward, "mean")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as err:
        raise ShapeError("reshape", a.shape, tuple(shape)) from err

    return record(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return record(
        np.where(active, a.data, 0).astype(a.dtype),
        (a,),
        lambda g: (g * active,),
        "relu",
    )
