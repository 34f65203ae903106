"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a C-contiguous float64 array. Operations build an
implicit DAG through parent links; :meth:`Tensor.backward` walks it once in
reverse topological order and accumulates adjoints additively, so fan-out
sums path contributions. Leaf tensors created with ``requires_grad=True``
carry a zero-initialized gradient accumulator from birth; results of
operations require gradients exactly when one of their inputs does, and
operations whose inputs are all gradient-free record no parents at all,
which detaches frozen computations for free.

Execution order is the insertion order of operations, so a forward pass is
bit-deterministic for fixed inputs.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import DegenerateInputError, DimensionError, EvaluationError

__all__ = [
    "Tensor",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "slice_axis",
    "reshape",
    "swapaxes",
    "broadcast_to",
    "softmax",
    "layernorm",
    "gelu",
    "l2_normalize",
    "log",
    "exp",
    "clamp_min",
    "tensor_sum",
    "tensor_mean",
    "logsumexp",
    "take_diagonal",
    "toposort",
    "finite_difference_check",
]


class Tensor:
    """A float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.size != 1:
            raise DimensionError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        """A defensive copy of the underlying array."""
        return self.data.copy()

    def detach(self):
        """A gradient-free tensor sharing this tensor's values."""
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable gradient.

        Only scalar roots are supported; each graph node's backward hook
        runs exactly once, in reverse insertion order.
        """
        if self.size != 1:
            raise DimensionError(f"backward requires a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = toposort(self)
        self.grad[...] = 1.0
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are lifted to constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("tensor division is only supported by scalars")

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _from_op(data, parents, backward_fn, op_name):
    """Build an operation result; drops the graph when no parent needs gradients."""
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.requires_grad = any(p.requires_grad for p in parents)
    out.op = op_name
    if out.requires_grad:
        out.grad = np.zeros_like(out.data)
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.grad = None
        out._parents = ()
        out._backward_fn = None
    return out


def toposort(root):
    """Graph nodes in topological order (parents first), visiting each once."""
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if id(parent) not in seen:
                seen.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeezed = tuple(
        i for i, (gdim, sdim) in enumerate(zip(g.shape, shape)) if sdim == 1 and gdim != 1
    )
    if squeezed:
        g = g.sum(axis=squeezed, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _from_op(data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _from_op(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.shape)

    return _from_op(data, (a, b), backward, "mul")


def scale(a, factor):
    """Multiply by a Python scalar."""
    factor = float(factor)

    def backward(g):
        if a.requires_grad:
            a.grad += g * factor

    return _from_op(a.data * factor, (a,), backward, "scale")


def matmul(a, b):
    """Matrix product; supports a 2-d right operand or equal-batch operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        data = np.matmul(a.data, b.data)

        def backward(g):
            if a.requires_grad:
                a.grad += np.matmul(g, b.data.T)
            if b.requires_grad:
                k = a.shape[-1]
                m = b.shape[-1]
                b.grad += np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, m))

    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:
        data = np.matmul(a.data, b.data)

        def backward(g):
            if a.requires_grad:
                a.grad += np.matmul(g, np.swapaxes(b.data, -1, -2))
            if b.requires_grad:
                b.grad += np.matmul(np.swapaxes(a.data, -1, -2), g)

    else:
        raise DimensionError(f"unsupported matmul batching: {a.shape} @ {b.shape}")
    return _from_op(data, (a, b), backward, "matmul")


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, extent in zip(tensors, extents):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + extent)
                t.grad += g[tuple(index)]
            offset += extent

    return _from_op(data, tuple(tensors), backward, "concat")


def slice_axis(x, axis, start, stop):
    """Contiguous slice along one axis; exact inverse of concat on that range."""
    x = _as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = x.data[index].copy()

    def backward(g):
        if x.requires_grad:
            x.grad[index] += g

    return _from_op(data, (x,), backward, "slice")


def reshape(x, shape):
    x = _as_tensor(x)
    data = x.data.reshape(shape).copy()

    def backward(g):
        if x.requires_grad:
            x.grad += g.reshape(x.shape)

    return _from_op(data, (x,), backward, "reshape")


def swapaxes(x, axis1, axis2):
    x = _as_tensor(x)
    data = np.swapaxes(x.data, axis1, axis2).copy()

    def backward(g):
        if x.requires_grad:
            x.grad += np.swapaxes(g, axis1, axis2)

    return _from_op(data, (x,), backward, "swapaxes")


def broadcast_to(x, shape):
    x = _as_tensor(x)
    data = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        if x.requires_grad:
            x.grad += _unbroadcast(g, x.shape)

    return _from_op(data, (x,), backward, "broadcast")


# ---------------------------------------------------------------------------
# nonlinear primitives
# ---------------------------------------------------------------------------

def _move_last(x, axis):
    return np.ascontiguousarray(np.moveaxis(x, axis, -1))


def softmax(x, axis=-1):
    """Numerically stable softmax along `axis`."""
    x = _as_tensor(x)
    axis = axis % x.ndim
    last = x.ndim - 1
    xm = _move_last(x.data, axis) if axis != last else x.data
    ym = kernels.softmax_lastaxis(xm)
    data = np.moveaxis(ym, -1, axis) if axis != last else ym

    def backward(g):
        if x.requires_grad:
            gm = _move_last(g, axis) if axis != last else g
            gxm = kernels.softmax_lastaxis_grad(ym, gm)
            x.grad += np.moveaxis(gxm, -1, axis) if axis != last else gxm

    return _from_op(data, (x,), backward, "softmax")


def layernorm(x, gamma, beta, eps=1e-5):
    """Layer normalization over the last axis with learnable scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    dim = x.shape[-1]
    if gamma.shape != (dim,) or beta.shape != (dim,):
        raise DimensionError(
            f"layernorm scale/shift must have shape ({dim},), got {gamma.shape} and {beta.shape}"
        )
    data, mean, rstd = kernels.layernorm_lastaxis(x.data, gamma.data, beta.data, eps)

    def backward(g):
        gx, ggamma, gbeta = kernels.layernorm_lastaxis_grad(
            x.data, gamma.data, mean, rstd, g
        )
        if x.requires_grad:
            x.grad += gx
        if gamma.requires_grad:
            gamma.grad += ggamma
        if beta.requires_grad:
            beta.grad += gbeta

    return _from_op(data, (x, gamma, beta), backward, "layernorm")


def gelu(x):
    """Exact erf-based GELU."""
    x = _as_tensor(x)
    data = kernels.gelu(x.data)

    def backward(g):
        if x.requires_grad:
            x.grad += kernels.gelu_grad(x.data, g)

    return _from_op(data, (x,), backward, "gelu")


def l2_normalize(x, axis=-1):
    """Scale vectors along `axis` to unit Euclidean norm."""
    x = _as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    data = x.data / norms

    def backward(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            x.grad += (g - data * inner) / norms

    return _from_op(data, (x,), backward, "l2_normalize")


def log(x):
    x = _as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x.grad += g / x.data

    return _from_op(data, (x,), backward, "log")


def exp(x):
    x = _as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x.grad += g * data

    return _from_op(data, (x,), backward, "exp")


def clamp_min(x, floor):
    """Elementwise max(x, floor); gradient passes only where x exceeds the floor."""
    x = _as_tensor(x)
    floor = float(floor)
    data = np.maximum(x.data, floor)
    mask = x.data > floor

    def backward(g):
        if x.requires_grad:
            x.grad += g * mask

    return _from_op(data, (x,), backward, "clamp_min")


def tensor_sum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            if axis is None:
                x.grad += g.reshape(()) * np.ones_like(x.data)
            else:
                gk = g if keepdims else np.expand_dims(g, axis)
                x.grad += np.broadcast_to(gk, x.shape)

    return _from_op(data, (x,), backward, "sum")


def tensor_mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(x, axis=-1):
    """log of the sum of exponentials along `axis`, computed max-subtracted."""
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    data = (np.log(total) + m).squeeze(axis=axis)
    soft = shifted / total

    def backward(g):
        if x.requires_grad:
            x.grad += np.expand_dims(g, axis) * soft

    return _from_op(data, (x,), backward, "logsumexp")


def take_diagonal(x):
    """Diagonal of a square matrix as a vector."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diagonal requires a square matrix, got {x.shape}")
    n = x.shape[0]
    data = np.diagonal(x.data).copy()

    def backward(g):
        if x.requires_grad:
            x.grad[np.arange(n), np.arange(n)] += g

    return _from_op(data, (x,), backward, "diagonal")


# ---------------------------------------------------------------------------
# finite-difference gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Outcome of comparing an autodiff gradient against central differences."""

    max_rel_error: float
    passed: bool
    tolerance: float
    step: float
    autodiff_grad: np.ndarray
    numeric_grad: np.ndarray

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"grad-check {status}: max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:.1e})"


# Relative errors use this absolute floor so near-zero gradients do not blow up.
REL_ERROR_FLOOR = 1e-8


def finite_difference_check(f, x, step=1e-5, tolerance=1e-6):
    """Verify the autodiff gradient of a scalar-valued function at `x`.

    `f` must deterministically map a Tensor to a scalar Tensor. The autodiff
    gradient is compared elementwise against central differences of size
    `step`; the check passes when the maximum relative error (floored at
    ``REL_ERROR_FLOOR``) is at most `tolerance`.
    """
    if step <= 0:
        raise EvaluationError(f"finite-difference step must be positive, got {step}")
    base = np.ascontiguousarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    param = Tensor(base.copy(), requires_grad=True)
    value = f(param)
    if value.size != 1:
        raise DimensionError(f"gradient check requires a scalar function, got shape {value.shape}")
    if not np.isfinite(value.data).all():
        raise EvaluationError("function value is not finite at the check point")
    value.backward()
    autodiff_grad = param.grad.copy()

    def evaluate(values):
        out = f(Tensor(values))
        v = float(out.data.reshape(-1)[0])
        if not np.isfinite(v):
            raise EvaluationError("function value is not finite at a perturbed point")
        return v

    numeric_grad = np.empty_like(base)
    flat = base.reshape(-1)
    numeric_flat = numeric_grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        plus = base.copy().reshape(-1)
        plus[i] = original + step
        minus = base.copy().reshape(-1)
        minus[i] = original - step
        f_plus = evaluate(plus.reshape(base.shape))
        f_minus = evaluate(minus.reshape(base.shape))
        numeric_flat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(REL_ERROR_FLOOR, np.maximum(np.abs(autodiff_grad), np.abs(numeric_grad)))
    max_rel_error = float(np.max(np.abs(autodiff_grad - numeric_grad) / denom))
    return GradCheckReport(
        max_rel_error=max_rel_error,
        passed=max_rel_error <= tolerance,
        tolerance=tolerance,
        step=step,
        autodiff_grad=autodiff_grad,
        numeric_grad=numeric_grad,
    )
