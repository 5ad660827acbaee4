"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous float32/float64 numpy array.  Every
operation is a :class:`Primitive` exposing a forward evaluation and a
vector-Jacobian product; :meth:`Tensor.backward` composes the recorded VJPs
in reverse topological order.  There is no symbolic or forward-mode
machinery, and no dependency on an ML framework.

Conventions:

* float32 is the training/storage dtype, float64 the verification dtype.
* mixing dtypes between two tensors is an error; python scalars are cast
  to the tensor's dtype.
* values are immutable once constructed; mutable state (batch-norm running
  moments, RNG counters) lives outside the graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import Rng

FLOAT_DTYPES = (np.float32, np.float64)


def _contiguous(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d arrays to shape (1,)
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return _contiguous(arr)


class Tensor:
    """Row-major numeric array plus gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = ""

    # -- basic views ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}"
        if self._op:
            head += f", op={self._op}"
        return head + ")"

    # -- autodiff ---------------------------------------------------------

    def backward(self, cotangent: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf.

        ``cotangent`` defaults to ones and must match this tensor's shape;
        for non-scalar outputs it is the vector of the vector-Jacobian
        product.
        """
        if cotangent is None:
            cotangent = np.ones_like(self.data)
        else:
            cotangent = np.asarray(cotangent, dtype=self.data.dtype)
            if cotangent.shape != self.data.shape:
                raise ValueError(
                    f"cotangent shape {cotangent.shape} != output shape {self.data.shape}")

        order = self._toposort()
        flowing: dict[int, np.ndarray] = {id(self): cotangent}
        for node in order:
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg

    def _toposort(self) -> list["Tensor"]:
        # iterative post-order DFS; reversed result visits consumers first
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        order.reverse()
        return order

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, tuple(axes))

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=True)


# ---------------------------------------------------------------------------
# primitive machinery
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    """A differentiable operation: forward plus its vector-Jacobian product.

    ``forward(*arrays, **kw) -> array`` evaluates the op on raw numpy data.
    ``vjp(cotangent, out, *arrays, **kw) -> tuple`` returns one cotangent
    per input (``None`` for non-differentiable inputs), each shaped like the
    corresponding input.
    """

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]


def apply(prim: Primitive, *inputs: Tensor, **kw) -> Tensor:
    arrays = tuple(t.data for t in inputs)
    out_data = prim.forward(*arrays, **kw)
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(out_data)
    out.grad = None
    out._op = prim.name
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = inputs

        def _vjp(cot, _arrays=arrays, _out=out.data, _kw=kw):
            return prim.vjp(cot, _out, *_arrays, **_kw)

        out._vjp = _vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _check_same_dtype(name: str, *arrays: np.ndarray) -> None:
    first = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != first:
            raise TypeError(f"{name}: dtype mismatch ({first.name} vs {a.dtype.name})")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _fw_add(a, b):
    _check_same_dtype("add", a, b)
    return a + b


ADD = Primitive(
    "add",
    _fw_add,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
)


def _fw_sub(a, b):
    _check_same_dtype("sub", a, b)
    return a - b


SUB = Primitive(
    "sub",
    _fw_sub,
    lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
)


def _fw_mul(a, b):
    _check_same_dtype("mul", a, b)
    return a * b


MUL = Primitive(
    "mul",
    _fw_mul,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
)


def _fw_div(a, b):
    _check_same_dtype("div", a, b)
    return a / b


DIV = Primitive(
    "div",
    _fw_div,
    lambda g, out, a, b: (
        _unbroadcast(g / b, a.shape),
        _unbroadcast(-g * a / (b * b), b.shape),
    ),
)

NEG = Primitive("neg", lambda a: -a, lambda g, out, a: (-g,))


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply(ADD, a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply(SUB, a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply(MUL, a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    return apply(DIV, a, b)


def neg(a: Tensor) -> Tensor:
    return apply(NEG, a)


# ---------------------------------------------------------------------------
# matmul / einsum
# ---------------------------------------------------------------------------


def _fw_matmul(a, b):
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    return a @ b


def _vjp_matmul(g, out, a, b):
    at = np.swapaxes(a, -1, -2)
    bt = np.swapaxes(b, -1, -2)
    return (_unbroadcast(g @ bt, a.shape), _unbroadcast(at @ g, b.shape))


MATMUL = Primitive("matmul", _fw_matmul, _vjp_matmul)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply(MATMUL, a, b)


def _parse_einsum(spec: str) -> tuple[str, str, str]:
    lhs, out = spec.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    for part, label in ((a_sub, "first operand"), (b_sub, "second operand"), (out, "output")):
        if len(set(part)) != len(part):
            raise ValueError(f"einsum2 {spec!r}: repeated index in {label}")
    if not set(out) <= set(a_sub) | set(b_sub):
        raise ValueError(f"einsum2 {spec!r}: output index missing from operands")
    # the VJP swaps output with one operand, so every operand index must be
    # recoverable from the other operand plus the output
    if not set(a_sub) <= set(out) | set(b_sub) or not set(b_sub) <= set(out) | set(a_sub):
        raise ValueError(f"einsum2 {spec!r}: operand index summed away on one side only")
    return a_sub, b_sub, out


def _fw_einsum2(a, b, *, spec):
    _check_same_dtype("einsum2", a, b)
    return np.einsum(spec, a, b, optimize=True)


def _vjp_einsum2(g, out, a, b, *, spec):
    a_sub, b_sub, out_sub = _parse_einsum(spec)
    da = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b, optimize=True)
    db = np.einsum(f"{a_sub},{out_sub}->{b_sub}", a, g, optimize=True)
    return (da, db)


EINSUM2 = Primitive("einsum2", _fw_einsum2, _vjp_einsum2)


def einsum2(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; indices may not repeat within an operand."""
    _parse_einsum(spec)
    return apply(EINSUM2, a, b, spec=spec)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def _fw_reshape(a, *, shape):
    out = a.reshape(shape)
    if out.size != a.size:
        raise ValueError(f"reshape cannot change size: {a.shape} -> {shape}")
    return out


RESHAPE = Primitive(
    "reshape",
    _fw_reshape,
    lambda g, out, a, *, shape: (g.reshape(a.shape),),
)


def reshape(a: Tensor, shape) -> Tensor:
    return apply(RESHAPE, a, shape=tuple(shape))


def _vjp_transpose(g, out, a, *, axes):
    inverse = tuple(np.argsort(axes))
    return (g.transpose(inverse),)


TRANSPOSE = Primitive(
    "transpose",
    lambda a, *, axes: a.transpose(axes),
    _vjp_transpose,
)


def transpose(a: Tensor, axes) -> Tensor:
    return apply(TRANSPOSE, a, axes=tuple(axes))


def _fw_concat(*arrays, axis):
    _check_same_dtype("concat", *arrays)
    return np.concatenate(arrays, axis=axis)


def _vjp_concat(g, out, *arrays, axis):
    sizes = [a.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))


CONCAT = Primitive("concat", _fw_concat, _vjp_concat)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    return apply(CONCAT, *tensors, axis=axis)


def _vjp_narrow(g, out, a, *, axis, start, length):
    pad = np.zeros_like(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    pad[tuple(sl)] = g
    return (pad,)


NARROW = Primitive(
    "narrow",
    lambda a, *, axis, start, length: a[
        tuple(slice(start, start + length) if i == axis else slice(None) for i in range(a.ndim))
    ],
    _vjp_narrow,
)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` extents along ``axis``."""
    return apply(NARROW, a, axis=axis, start=start, length=length)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % ndim for a in axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"duplicate reduction axis in {axes}")
    return axes


def _fw_reduce_sum(a, *, axes, keepdims):
    axes = _norm_axes(axes, a.ndim)
    if not axes:
        return a.copy()
    return a.sum(axis=axes, keepdims=keepdims)


def _vjp_reduce_sum(g, out, a, *, axes, keepdims):
    axes = _norm_axes(axes, a.ndim)
    if not axes:
        return (g,)
    if not keepdims:
        expand = list(g.shape)
        for ax in sorted(axes):
            expand.insert(ax, 1)
        g = g.reshape(expand)
    return (np.broadcast_to(g, a.shape).copy(),)


REDUCE_SUM = Primitive("reduce_sum", _fw_reduce_sum, _vjp_reduce_sum)


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    return apply(REDUCE_SUM, a, axes=axes, keepdims=keepdims)


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes_n = _norm_axes(axes, a.ndim)
    count = 1
    for ax in axes_n:
        count *= a.shape[ax]
    return reduce_sum(a, axes, keepdims) * (1.0 / max(count, 1))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def _fw_softmax(a, *, axis):
    if np.isnan(a).any():
        raise ValueError("softmax: NaN in input")
    shifted = a - a.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _vjp_softmax(g, out, a, *, axis):
    inner = (g * out).sum(axis=axis, keepdims=True)
    return ((g - inner) * out,)


SOFTMAX = Primitive("softmax", _fw_softmax, _vjp_softmax)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    return apply(SOFTMAX, a, axis=axis)


def _fw_sigmoid(a):
    # two-branch form: never exponentiates a positive argument
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ena = np.exp(a[~pos])
    out[~pos] = ena / (1.0 + ena)
    return out


SIGMOID = Primitive("sigmoid", _fw_sigmoid, lambda g, out, a: (g * out * (1.0 - out),))


def sigmoid(a: Tensor) -> Tensor:
    return apply(SIGMOID, a)


RELU = Primitive(
    "relu",
    lambda a: np.maximum(a, 0),
    lambda g, out, a: (g * (a > 0),),
)


def relu(a: Tensor) -> Tensor:
    return apply(RELU, a)


def _fw_softplus(a):
    return np.maximum(a, 0) + np.log1p(np.exp(-np.abs(a)))


SOFTPLUS = Primitive("softplus", _fw_softplus, lambda g, out, a: (g * _fw_sigmoid(a),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) without overflow; d/dx = sigmoid(x)."""
    return apply(SOFTPLUS, a)


EXP = Primitive("exp", np.exp, lambda g, out, a: (g * out,))
LOG = Primitive("log", np.log, lambda g, out, a: (g / a,))
SQRT = Primitive("sqrt", np.sqrt, lambda g, out, a: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    return apply(EXP, a)


def log(a: Tensor) -> Tensor:
    return apply(LOG, a)


def sqrt(a: Tensor) -> Tensor:
    return apply(SQRT, a)


CLIP_MIN = Primitive(
    "clip_min",
    lambda a, *, lo: np.maximum(a, lo),
    lambda g, out, a, *, lo: (g * (a > lo),),
)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(x, lo) elementwise; gradient passes only where x > lo."""
    return apply(CLIP_MIN, a, lo=lo)


# ---------------------------------------------------------------------------
# l2 normalization
# ---------------------------------------------------------------------------


def _fw_l2_normalize(a, *, axis, eps):
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    return a / np.maximum(norm, eps)


def _vjp_l2_normalize(g, out, a, *, axis, eps):
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    inner = (g * out).sum(axis=axis, keepdims=True)
    # in the clamped region the denominator is the constant eps
    da = np.where(norm > eps, (g - out * inner) / denom, g / denom)
    return (da,)


L2_NORMALIZE = Primitive("l2_normalize", _fw_l2_normalize, _vjp_l2_normalize)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm; zero slices stay zero."""
    if eps <= 0:
        raise ValueError(f"l2_normalize eps must be > 0, got {eps}")
    return apply(L2_NORMALIZE, a, axis=axis, eps=eps)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """Running first/second moments, owned by exactly one trainer."""

    def __init__(self, num_features: int, dtype=np.float32):
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray, momentum: float) -> None:
        self.running_mean = momentum * self.running_mean + (1.0 - momentum) * batch_mean
        self.running_var = momentum * self.running_var + (1.0 - momentum) * batch_var

    def copy(self) -> "BatchNormState":
        out = BatchNormState.__new__(BatchNormState)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.9


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
) -> Tensor:
    """Normalize (batch, features) by batch stats (training) or running stats.

    Training mode updates ``state`` in place with momentum; the update is
    detached from the graph.  Built from differentiable pieces, so gradients
    flow through the batch statistics.
    """
    if x.ndim != 2:
        raise ValueError(f"batch_norm expects (batch, features), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("batch_norm: empty batch")
    if x.shape[1] != gamma.size:
        raise ValueError(f"batch_norm: {x.shape[1]} features vs {gamma.size} params")
    if training:
        mu = mean(x, axes=0, keepdims=True)
        centered = x - mu
        var = mean(centered * centered, axes=0, keepdims=True)
        state.update(mu.data.reshape(-1), var.data.reshape(-1), momentum)
        normed = centered / sqrt(var + eps)
    else:
        rm = Tensor(state.running_mean.astype(x.dtype))
        inv = Tensor((1.0 / np.sqrt(state.running_var + eps)).astype(x.dtype))
        normed = (x - rm) * inv
    return normed * gamma + beta


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def _fw_dropout(a, *, mask, scale):
    return a * mask * scale


DROPOUT = Primitive(
    "dropout",
    _fw_dropout,
    lambda g, out, a, *, mask, scale: (g * mask * scale,),
)


def dropout(x: Tensor, rate: float, rng: Rng, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by
    1/(1-rate).  Inference mode returns the input unchanged and draws
    nothing from ``rng``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= rate).astype(x.dtype)
    return apply(DROPOUT, x, mask=keep, scale=x.dtype.type(1.0 / (1.0 - rate)))
