"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active, every
operation with at least one differentiable input appends a node to it;
:func:`backward` walks that record in reverse. With no active tape nothing is
recorded, which is how frozen feature extraction and inference run.

Only the primitives the models and losses need are provided: dense layers,
relu/tanh/sigmoid/clamp01, add/sub/mul, concat, log-softmax, the two
cross-entropies, row norms, means and sums, width fitting, and gradient
reversal.
"""
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from src.utils.exceptions import DimensionError, LabelError, NumericalError, UsageError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_local = threading.local()


def _tape_stack() -> List[Optional["Tape"]]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self):
        self.nodes: List["Node"] = []

    def record(self, node: "Node") -> None:
        node.index = len(self.nodes)
        node.tape = self
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class no_tape:
    """Suspend recording; operations inside produce constants."""

    def __enter__(self) -> None:
        _tape_stack().append(None)

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional["Node"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    fn: type
    ctx: Dict[str, Any]
    inputs: Tuple[Tensor, ...]
    output: Tensor
    index: int = -1
    tape: Optional[Tape] = field(default=None, repr=False)


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"{where} produced non-finite values")


class Function:
    """A differentiable primitive: ``forward`` on arrays, ``backward`` as a VJP."""

    name = "op"

    @staticmethod
    def forward(ctx: Dict[str, Any], *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx: Dict[str, Any], grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        ctx: Dict[str, Any] = {}
        out = cls.forward(ctx, *(t.data for t in tensors), **kwargs)
        _check_finite(out, cls.name)
        result = Tensor(out)
        tape = current_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            result.requires_grad = True
            node = Node(cls, ctx, tensors, result)
            tape.record(node)
            result._node = node
        return result


def _is_scalar(a: np.ndarray) -> bool:
    return a.size == 1


def _check_elementwise(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def _out_shape(a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    return b.shape if _is_scalar(a) else a.shape


def _scalar_or_array(a: np.ndarray, other: np.ndarray) -> np.ndarray:
    # a size-1 operand against a larger one behaves as a scalar
    if _is_scalar(a) and a.shape != other.shape:
        return a.reshape(())
    return a


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _check_elementwise("add", a, b)
        ctx["shapes"] = (a.shape, b.shape)
        return (_scalar_or_array(a, b) + _scalar_or_array(b, a)).reshape(_out_shape(a, b))

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _check_elementwise("sub", a, b)
        ctx["shapes"] = (a.shape, b.shape)
        return (_scalar_or_array(a, b) - _scalar_or_array(b, a)).reshape(_out_shape(a, b))

    @staticmethod
    def backward(ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _check_elementwise("mul", a, b)
        ctx["a"], ctx["b"] = a, b
        return (_scalar_or_array(a, b) * _scalar_or_array(b, a)).reshape(_out_shape(a, b))

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        ga = grad * _scalar_or_array(b, a)
        gb = grad * _scalar_or_array(a, b)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return grad @ b.T, a.T @ grad


class Linear(Function):
    """Dense layer ``x @ W + b`` with the bias broadcast over rows."""

    name = "linear"

    @staticmethod
    def forward(ctx, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise DimensionError(f"linear: input {x.shape} does not fit weight {w.shape}")
        if b.shape != (w.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} does not fit weight {w.shape}")
        ctx["x"], ctx["w"] = x, w
        return x @ w + b

    @staticmethod
    def backward(ctx, grad):
        x, w = ctx["x"], ctx["w"]
        return grad @ w.T, x.T @ grad, grad.sum(axis=0)


class ReLU(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, x):
        ctx["mask"] = x > 0
        return np.where(ctx["mask"], x, 0.0)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["mask"],)


class Tanh(Function):
    name = "tanh"

    @staticmethod
    def forward(ctx, x):
        y = np.tanh(x)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        return (grad * (1.0 - ctx["y"] ** 2),)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, x):
        y = special.expit(x)
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, grad):
        y = ctx["y"]
        return (grad * y * (1.0 - y),)


class Clamp01(Function):
    name = "clamp01"

    @staticmethod
    def forward(ctx, x):
        ctx["inside"] = (x > 0.0) & (x < 1.0)
        return np.clip(x, 0.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        return (grad * ctx["inside"],)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
            raise DimensionError(f"concat: row counts differ for {a.shape} and {b.shape}")
        ctx["split"] = a.shape[1]
        return np.concatenate([a, b], axis=1)

    @staticmethod
    def backward(ctx, grad):
        p = ctx["split"]
        return grad[:, :p], grad[:, p:]


class LogSoftmax(Function):
    name = "log_softmax"

    @staticmethod
    def forward(ctx, x):
        if x.ndim != 2:
            raise DimensionError(f"log_softmax: expected a matrix, got {x.shape}")
        y = special.log_softmax(x, axis=1)
        ctx["p"] = np.exp(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        return (grad - ctx["p"] * grad.sum(axis=1, keepdims=True),)


class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, x):
        if x.ndim != 2:
            raise DimensionError(f"softmax: expected a matrix, got {x.shape}")
        p = special.softmax(x, axis=1)
        ctx["p"] = p
        return p

    @staticmethod
    def backward(ctx, grad):
        p = ctx["p"]
        return (p * (grad - (grad * p).sum(axis=1, keepdims=True)),)


class SoftmaxCrossEntropy(Function):
    """Batch mean of ``-log softmax(logits)[label]``."""

    name = "softmax_cross_entropy"

    @staticmethod
    def forward(ctx, logits, labels):
        if logits.ndim != 2 or logits.shape[0] == 0:
            raise DimensionError(f"softmax_cross_entropy: expected non-empty m×C logits, got {logits.shape}")
        m, n_classes = logits.shape
        if n_classes < 2:
            raise LabelError(f"softmax_cross_entropy needs at least 2 classes, got {n_classes}")
        labels = np.asarray(labels)
        if labels.shape != (m,):
            raise DimensionError(f"softmax_cross_entropy: {labels.shape} labels for {m} rows")
        if np.any(labels < 0) or np.any(labels >= n_classes) or not np.all(labels == np.floor(labels)):
            raise LabelError(f"labels must be class ids in [0, {n_classes})")
        idx = labels.astype(np.int64)
        logp = special.log_softmax(logits, axis=1)
        ctx["p"], ctx["idx"] = np.exp(logp), idx
        return np.array(-logp[np.arange(m), idx].mean())

    @staticmethod
    def backward(ctx, grad):
        p, idx = ctx["p"], ctx["idx"]
        m = p.shape[0]
        g = p.copy()
        g[np.arange(m), idx] -= 1.0
        return g * (grad / m), None


class BinaryCrossEntropy(Function):
    """Batch mean of the logistic loss, evaluated in logit form."""

    name = "binary_cross_entropy"

    @staticmethod
    def forward(ctx, z, target):
        if z.ndim != 2 or z.shape[1] != 1 or z.shape[0] == 0:
            raise DimensionError(f"binary_cross_entropy: expected non-empty m×1 logits, got {z.shape}")
        if target.shape not in ((), (1,), (1, 1), z.shape):
            raise DimensionError(f"binary_cross_entropy: targets {target.shape} for logits {z.shape}")
        t = np.broadcast_to(target.reshape(()) if target.size == 1 else target, z.shape)
        if not np.all((t == 0.0) | (t == 1.0)):
            raise LabelError("binary_cross_entropy targets must be 0 or 1")
        ctx["z"], ctx["t"] = z, t
        losses = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
        return np.array(losses.mean())

    @staticmethod
    def backward(ctx, grad):
        z, t = ctx["z"], ctx["t"]
        return (special.expit(z) - t) * (grad / z.shape[0]), None


class Mean(Function):
    name = "mean"

    @staticmethod
    def forward(ctx, x):
        if x.size == 0:
            raise DimensionError("mean of an empty tensor")
        ctx["shape"] = x.shape
        return np.array(x.mean())

    @staticmethod
    def backward(ctx, grad):
        shape = ctx["shape"]
        return (np.full(shape, float(grad) / int(np.prod(shape))),)


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, x):
        ctx["shape"] = x.shape
        return np.array(x.sum())

    @staticmethod
    def backward(ctx, grad):
        return (np.full(ctx["shape"], float(grad)),)


class RowNorm(Function):
    """Per-row Euclidean norm (or squared norm) of an m×n matrix, shape (m,)."""

    name = "row_norm"

    @staticmethod
    def forward(ctx, x, squared=False):
        if x.ndim != 2:
            raise DimensionError(f"row_norm: expected a matrix, got {x.shape}")
        sq = (x * x).sum(axis=1)
        ctx["x"], ctx["squared"] = x, squared
        if squared:
            return sq
        norm = np.sqrt(sq)
        ctx["norm"] = norm
        return norm

    @staticmethod
    def backward(ctx, grad):
        x = ctx["x"]
        if ctx["squared"]:
            return (2.0 * x * grad[:, None],)
        norm = ctx["norm"]
        # subgradient 0 at the origin
        safe = np.where(norm > 0.0, norm, 1.0)
        scale = np.where(norm > 0.0, grad / safe, 0.0)
        return (x * scale[:, None],)


class ChunkRows(Function):
    """Map m×n features to (m·c)×width rows, c = ceil(n / width).

    Each row is cut into consecutive column chunks of ``width`` (the last one
    zero-padded) and the chunks are stacked as rows, row i's chunks first.
    A head of input ``width`` then scores every chunk on its own.
    """

    name = "chunk_rows"

    @staticmethod
    def forward(ctx, x, width=1):
        if x.ndim != 2 or width < 1:
            raise DimensionError(f"chunk_rows: cannot map {x.shape} to width {width}")
        m, n = x.shape
        chunks = max(1, -(-n // width))
        padded = np.zeros((m, chunks * width))
        padded[:, :n] = x
        ctx["shape"] = (m, n)
        return padded.reshape(m * chunks, width)

    @staticmethod
    def backward(ctx, grad):
        m, n = ctx["shape"]
        return (grad.reshape(m, -1)[:, :n],)


class GradReverse(Function):
    """Identity forward; multiplies the incoming gradient by ``-scale``."""

    name = "grad_reverse"

    @staticmethod
    def forward(ctx, x, scale=1.0):
        ctx["scale"] = scale
        return x.copy()

    @staticmethod
    def backward(ctx, grad):
        return (-ctx["scale"] * grad,)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(a, b)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: ArrayLike, w: Tensor, b: Tensor) -> Tensor:
    return Linear.apply(x, w, b)


def relu(x: ArrayLike) -> Tensor:
    return ReLU.apply(x)


def tanh(x: ArrayLike) -> Tensor:
    return Tanh.apply(x)


def sigmoid(x: ArrayLike) -> Tensor:
    return Sigmoid.apply(x)


def clamp01(x: ArrayLike) -> Tensor:
    return Clamp01.apply(x)


def concat_features(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Concat.apply(a, b)


def log_softmax(x: ArrayLike) -> Tensor:
    return LogSoftmax.apply(x)


def softmax(x: ArrayLike) -> Tensor:
    return Softmax.apply(x)


def softmax_cross_entropy(logits: ArrayLike, labels: Sequence[int]) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=np.asarray(labels))


def binary_cross_entropy(logit: ArrayLike, target: Union[float, np.ndarray]) -> Tensor:
    return BinaryCrossEntropy.apply(logit, target=np.asarray(target, dtype=np.float64))


def uniform_cross_entropy(logits: ArrayLike) -> Tensor:
    """Cross-entropy of softmax(logits) against the uniform distribution.

    Batch mean of ``-(1/C) Σ_c log p_c``; minimum ``ln C`` at uniform predictions.
    """
    return mul(Mean.apply(log_softmax(logits)), -1.0)


def mean(x: ArrayLike) -> Tensor:
    return Mean.apply(x)


def sum_all(x: ArrayLike) -> Tensor:
    return Sum.apply(x)


def row_norm(x: ArrayLike, squared: bool = False) -> Tensor:
    return RowNorm.apply(x, squared=squared)


def chunk_rows(x: ArrayLike, width: int) -> Tensor:
    return ChunkRows.apply(x, width=int(width))


def grad_reverse(x: ArrayLike, scale: float = 1.0) -> Tensor:
    return GradReverse.apply(x, scale=scale)


_ELEMENTWISE: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "clamp01": clamp01,
}


def elementwise(op: str, *inputs: ArrayLike) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    return fn(*inputs)


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> Dict[str, np.ndarray]:
    """Gradients of a scalar loss for every named parameter.

    Parameters the loss does not depend on get a zero gradient. The tape is
    only read, so calling this twice on the same loss gives the same result.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.tape is None:
        raise UsageError("loss was not recorded on a tape; compute it inside `with Tape():`")

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for current in reversed(node.tape.nodes[: node.index + 1]):
        grad = adjoints.pop(id(current.output), None)
        if grad is None:
            continue
        input_grads = current.fn.backward(current.ctx, grad)
        for tensor, g in zip(current.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            _check_finite(g, f"{current.fn.name} backward")
            key = id(tensor)
            adjoints[key] = adjoints[key] + g if key in adjoints else g

    grads: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        g = adjoints.get(id(param))
        g = np.zeros_like(param.data) if g is None else np.array(g, dtype=np.float64).reshape(param.shape)
        param.grad = g
        grads[name] = g
    return grads
