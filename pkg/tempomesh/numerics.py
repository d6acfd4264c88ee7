"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive is a small class with a ``forward`` and a ``backward`` rule that
work on numpy arrays. Operations run while a :class:`Tape` is open, and touching
at least one tensor that requires gradients, are recorded in execution order.
That order is a valid topological order, so :func:`backward` simply walks it in
reverse.

Training runs in 32-bit floats; gradient checks cast to 64-bit. Every primitive
rejects non-finite output with :class:`~tempomesh.errors.NonFiniteError`.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from tempomesh.errors import NonFiniteError, ShapeError

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """A numpy array that can take part in differentiation.

    Tensors compare by identity, so they can be used as dictionary keys for
    gradients.
    """

    __slots__ = ("data", "requires_grad", "name")
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: Optional[str] = None,
    ):
        array = np.asarray(data, dtype=dtype)
        if array.dtype not in _FLOAT_DTYPES:
            array = array.astype(TRAIN_DTYPE)
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        obj = cls.__new__(cls)
        obj.data = array
        obj.requires_grad = requires_grad
        obj.name = None
        return obj

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    """One recorded primitive application."""

    op: type
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    saved: Any


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Records primitive applications for reverse-mode differentiation.

    Use as a context manager. Tapes nest; operations go to the innermost one.
    Each thread has its own stack of open tapes.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc_info) -> bool:
        _state.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> bool:
        """Recompute every recorded node and compare against the stored output.

        Returns:
            bool: True when each recomputed output is bit-identical to the
            recorded one.
        """
        for node in self.nodes:
            out, _ = node.op.forward(*(t.data for t in node.inputs), **node.attrs)
            recorded = node.output.data
            if out.shape != recorded.shape or out.dtype != recorded.dtype:
                return False
            if not np.array_equal(out, recorded):
                return False
        return True


def _apply(op: type, *inputs: Tensor, **attrs) -> Tensor:
    out, saved = op.forward(*(t.data for t in inputs), **attrs)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op.name} produced non-finite values (shape {out.shape})")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        tape.nodes.append(Node(op, inputs, result, attrs, saved))
    return result


def _const(value: ArrayLike, dtype: np.dtype) -> Tensor:
    return Tensor._wrap(np.asarray(value, dtype=dtype), False)


def as_tensor(value: Union[Tensor, ArrayLike], dtype: np.dtype = TRAIN_DTYPE) -> Tensor:
    """Wrap ``value`` as a constant tensor unless it already is one."""
    if isinstance(value, Tensor):
        return value
    return _const(value, dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a_is, b_is = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_is and b_is:
        if a.dtype == b.dtype:
            return a, b
        if not b.requires_grad:
            return a, _const(b.data, a.dtype)
        if not a.requires_grad:
            return _const(a.data, b.dtype), b
        raise TypeError(f"mixed precision operands: {a.dtype} and {b.dtype}")
    if a_is:
        return a, _const(b, a.dtype)
    if b_is:
        return _const(a, b.dtype), b
    raise TypeError("at least one operand must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap_last(array: np.ndarray) -> np.ndarray:
    return np.swapaxes(array, -1, -2)


# Primitives


class _Add:
    name = "add"

    @staticmethod
    def forward(a, b):
        return a + b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class _Sub:
    name = "sub"

    @staticmethod
    def forward(a, b):
        return a - b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class _Mul:
    name = "mul"

    @staticmethod
    def forward(a, b):
        return a * b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class _Div:
    name = "div"

    @staticmethod
    def forward(a, b):
        return a / b, None

    @staticmethod
    def backward(g, saved, a, b):
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class _Neg:
    name = "neg"

    @staticmethod
    def forward(a):
        return -a, None

    @staticmethod
    def backward(g, saved, a):
        return (-g,)


class _Pow:
    name = "pow"

    @staticmethod
    def forward(a, exponent):
        return a**exponent, None

    @staticmethod
    def backward(g, saved, a, exponent):
        return (g * exponent * a ** (exponent - 1),)


class _Exp:
    name = "exp"

    @staticmethod
    def forward(a):
        out = np.exp(a)
        return out, out

    @staticmethod
    def backward(g, out, a):
        return (g * out,)


class _Log:
    name = "log"

    @staticmethod
    def forward(a):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(a), None

    @staticmethod
    def backward(g, saved, a):
        return (g / a,)


class _Sqrt:
    name = "sqrt"

    @staticmethod
    def forward(a):
        with np.errstate(invalid="ignore"):
            out = np.sqrt(a)
        return out, out

    @staticmethod
    def backward(g, out, a):
        return (g * 0.5 / out,)


class _Tanh:
    name = "tanh"

    @staticmethod
    def forward(a):
        out = np.tanh(a)
        return out, out

    @staticmethod
    def backward(g, out, a):
        return (g * (1 - out * out),)


class _Sigmoid:
    name = "sigmoid"

    @staticmethod
    def forward(a):
        out = expit(a)
        return out, out

    @staticmethod
    def backward(g, out, a):
        return (g * out * (1 - out),)


_GELU_C = math.sqrt(2.0 / math.pi)


class _Gelu:
    """Tanh approximation of GELU."""

    name = "gelu"

    @staticmethod
    def forward(a):
        t = np.tanh(_GELU_C * (a + 0.044715 * a**3))
        return 0.5 * a * (1 + t), t

    @staticmethod
    def backward(g, t, a):
        du = _GELU_C * (1 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1 + t) + 0.5 * a * (1 - t * t) * du),)


class _Sin:
    name = "sin"

    @staticmethod
    def forward(a):
        return np.sin(a), None

    @staticmethod
    def backward(g, saved, a):
        return (g * np.cos(a),)


class _Cos:
    name = "cos"

    @staticmethod
    def forward(a):
        return np.cos(a), None

    @staticmethod
    def backward(g, saved, a):
        return (-g * np.sin(a),)


class _Sum:
    name = "sum"

    @staticmethod
    def forward(a, axis, keepdims):
        return np.asarray(a.sum(axis=axis, keepdims=keepdims)), None

    @staticmethod
    def backward(g, saved, a, axis, keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)


class _Reshape:
    name = "reshape"

    @staticmethod
    def forward(a, shape):
        return a.reshape(shape), None

    @staticmethod
    def backward(g, saved, a, shape):
        return (g.reshape(a.shape),)


class _Transpose:
    name = "transpose"

    @staticmethod
    def forward(a, axes):
        return np.transpose(a, axes), None

    @staticmethod
    def backward(g, saved, a, axes):
        return (np.transpose(g, np.argsort(axes)),)


class _Concat:
    name = "concat"

    @staticmethod
    def forward(*arrays, axis):
        return np.concatenate(arrays, axis=axis), None

    @staticmethod
    def backward(g, saved, *arrays, axis):
        cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


class _Stack:
    name = "stack"

    @staticmethod
    def forward(*arrays, axis):
        return np.stack(arrays, axis=axis), None

    @staticmethod
    def backward(g, saved, *arrays, axis):
        return tuple(np.take(g, i, axis=axis) for i in range(len(arrays)))


class _GetItem:
    name = "getitem"

    @staticmethod
    def forward(a, index):
        return np.array(a[index], copy=True), None

    @staticmethod
    def backward(g, saved, a, index):
        grad = np.zeros_like(a)
        np.add.at(grad, index, g)
        return (grad,)


class _MatMul:
    name = "matmul"

    @staticmethod
    def forward(a, b):
        return np.matmul(a, b), None

    @staticmethod
    def backward(g, saved, a, b):
        ga = np.matmul(g, _swap_last(b))
        gb = np.matmul(_swap_last(a), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class _Softmax:
    name = "softmax"

    @staticmethod
    def forward(a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=-1, keepdims=True)
        return out, out

    @staticmethod
    def backward(g, out, a):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


class _LayerNorm:
    name = "layer_norm"

    @staticmethod
    def forward(x, gain, bias, eps):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std
        return xhat * gain + bias, (xhat, inv_std)

    @staticmethod
    def backward(g, saved, x, gain, bias, eps):
        xhat, inv_std = saved
        lead = tuple(range(x.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gx_hat = g * gain
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gain, g_bias


class _BceWithLogits:
    name = "bce_with_logits"

    @staticmethod
    def forward(x, y):
        return np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x))), None

    @staticmethod
    def backward(g, saved, x, y):
        return g * (expit(x) - y), None


# Functional API


def add(a, b) -> Tensor:
    return _apply(_Add, *_pair(a, b))


def sub(a, b) -> Tensor:
    return _apply(_Sub, *_pair(a, b))


def mul(a, b) -> Tensor:
    return _apply(_Mul, *_pair(a, b))


def div(a, b) -> Tensor:
    return _apply(_Div, *_pair(a, b))


def neg(a: Tensor) -> Tensor:
    return _apply(_Neg, a)


def power(a: Tensor, exponent: float) -> Tensor:
    return _apply(_Pow, a, exponent=float(exponent))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def exp(a: Tensor) -> Tensor:
    return _apply(_Exp, a)


def log(a: Tensor) -> Tensor:
    return _apply(_Log, a)


def sqrt(a: Tensor) -> Tensor:
    return _apply(_Sqrt, a)


def tanh(a: Tensor) -> Tensor:
    return _apply(_Tanh, a)


def sigmoid(a: Tensor) -> Tensor:
    return _apply(_Sigmoid, a)


def gelu(a: Tensor) -> Tensor:
    return _apply(_Gelu, a)


def sin(a: Tensor) -> Tensor:
    return _apply(_Sin, a)


def cos(a: Tensor) -> Tensor:
    return _apply(_Cos, a)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply(_Sum, a, axis=axis, keepdims=keepdims)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    total = tsum(a, axis=axis, keepdims=keepdims)
    count = a.size // max(total.size, 1) if a.size else 1
    return mul(total, 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        np.empty(a.shape, dtype=np.bool_).reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from e
    return _apply(_Reshape, a, shape=shape)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) % a.ndim for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for a tensor of rank {a.ndim}")
    return _apply(_Transpose, a, axes=axes)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0]
    tensors = [ref] + [_pair(ref, t)[1] for t in tensors[1:]]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat extents disagree: {ref.shape} vs {t.shape} on axis {axis}")
    return _apply(_Concat, *tensors, axis=ax)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    ref = tensors[0]
    tensors = [ref] + [_pair(ref, t)[1] for t in tensors[1:]]
    for t in tensors[1:]:
        if t.shape != ref.shape:
            raise ShapeError(f"stack extents disagree: {ref.shape} vs {t.shape}")
    return _apply(_Stack, *tensors, axis=axis)


def getitem(a: Tensor, index) -> Tensor:
    return _apply(_GetItem, a, index=index)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul batch extents disagree: {a.shape} @ {b.shape}") from e
    return _apply(_MatMul, a, b)


def softmax_lastdim(a: Tensor) -> Tensor:
    return _apply(_Softmax, a)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm affine extents {gain.shape}/{bias.shape} do not match input {x.shape}"
        )
    _, gain = _pair(x, gain)
    _, bias = _pair(x, bias)
    return _apply(_LayerNorm, x, gain, bias, eps=eps)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    scale: Optional[float] = None,
    bias: Optional[ArrayLike] = None,
) -> Tensor:
    """softmax(q kᵀ · scale + bias) v over the last two axes.

    Raises:
        ShapeError: If the head dimensions of q and k differ or k and v disagree
            on the key count.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention head dimension mismatch: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention key count mismatch: k {k.shape} vs v {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = mul(matmul(q, swap_last(k)), scale)
    if bias is not None:
        scores = add(scores, bias)
    return matmul(softmax_lastdim(scores), v)


def bce_with_logits(logits: Tensor, targets: ArrayLike) -> Tensor:
    """Elementwise binary cross-entropy on logits; targets may be soft labels."""
    logits, targets = _pair(logits, targets)
    if logits.shape != targets.shape:
        raise ShapeError(f"bce targets {targets.shape} do not match logits {logits.shape}")
    return _apply(_BceWithLogits, logits, targets)


# Differentiation


def backward(
    tape: Tape, loss: Tensor, wrt: Optional[Iterable[Tensor]] = None
) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` starting at the scalar ``loss``.

    Args:
        tape: Tape that recorded the computation of ``loss``.
        loss: Scalar tensor.
        wrt: Tensors to return gradients for. Defaults to every leaf that
            requires gradients and appears on the tape.

    Returns:
        dict[Tensor, np.ndarray]: Gradients keyed by tensor. Leaves that do not
        influence the loss get zeros.

    Raises:
        ShapeError: If ``loss`` is not a scalar.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves.setdefault(id(t), t)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        contributions = node.op.backward(
            g, node.saved, *(t.data for t in node.inputs), **node.attrs
        )
        for t, gi in zip(node.inputs, contributions):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = gi if key not in grads else grads[key] + gi

    targets = list(wrt) if wrt is not None else list(leaves.values())
    if loss.requires_grad and id(loss) not in produced and loss in targets:
        grads.setdefault(id(loss), np.ones_like(loss.data))
    return {t: np.asarray(grads.get(id(t), np.zeros_like(t.data))) for t in targets}


def global_norm(grads: Union[Mapping[Any, np.ndarray], Iterable[np.ndarray]]) -> float:
    """Euclidean norm over all gradient arrays."""
    arrays = grads.values() if isinstance(grads, Mapping) else grads
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in arrays))


def finite_diff_check(
    f: Callable[[Tensor], Tensor], x: Union[Tensor, np.ndarray], h: float = 1e-4
) -> float:
    """Largest relative error between tape gradients and central differences.

    The check runs in 64-bit. The relative error of each element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    Args:
        f: Function from a tensor to a scalar tensor.
        x: Point at which to compare gradients.
        h: Central difference step.

    Returns:
        float: Maximum relative error over all elements.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=CHECK_DTYPE)
    leaf = Tensor(base.copy(), requires_grad=True, dtype=CHECK_DTYPE)
    with Tape() as tape:
        out = f(leaf)
    analytic = backward(tape, out, wrt=[leaf])[leaf]

    numeric = np.zeros_like(base)
    for index in np.ndindex(base.shape):
        plus = base.copy()
        plus[index] += h
        minus = base.copy()
        minus[index] -= h
        f_plus = f(Tensor(plus, dtype=CHECK_DTYPE)).item()
        f_minus = f(Tensor(minus, dtype=CHECK_DTYPE)).item()
        numeric[index] = (f_plus - f_minus) / (2 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used for every random draw in tempomesh."""
    return np.random.Generator(np.random.Philox(int(seed)))
