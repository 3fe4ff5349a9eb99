"""Dense tensors with reverse-mode automatic differentiation.

Every kernel computes its forward value with numpy and, when an input
tracks gradients, records a vector-Jacobian closure so :func:`backward`
can fill ``.grad`` buffers by walking the graph in reverse topological
order. Kernels never write to their inputs' data; the only mutation a
tensor ever sees is gradient accumulation inside :func:`backward`.

Training runs in float32 by default. Gradient checking and the oracle
tests switch to float64 via :func:`set_default_dtype` (the 1e-4
finite-difference tolerance is unreachable in single precision).
"""

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_ALLOWED_DTYPES = (np.float32, np.float64)
_default_dtype = np.float32
_grad_enabled = True


def set_default_dtype(dtype):
    """Set the dtype used when tensors are built from plain python data."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _ALLOWED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


@contextmanager
def default_dtype(dtype):
    """Temporarily change the default dtype (used by grad checks)."""
    global _default_dtype
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = old


@contextmanager
def no_grad():
    """Disable graph recording; forwards inside run as plain numpy."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _coerce(data, dtype=None):
    if dtype is None:
        # ndarrays and numpy scalars keep their precision; reductions
        # produce numpy scalars and must not fall back to the default
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype.type in _ALLOWED_DTYPES:
            return np.asarray(data)
        return np.asarray(data, dtype=_default_dtype)
    dtype = np.dtype(dtype).type
    if dtype not in _ALLOWED_DTYPES:
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    return np.asarray(data, dtype=dtype)


class Tensor:
    """Shape-carrying dense array node of the autodiff graph.

    ``grad`` stays ``None`` until :func:`backward` runs over a scalar
    root that reaches this tensor; repeated backward calls accumulate
    into it (call :meth:`zero_grad` between steps).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._vjp = None

    # -- basic introspection -------------------------------------------------

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

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad}{tag})"

    def label(self):
        return self.name if self.name else f"tensor{self.shape}"

    # -- gradient bookkeeping ------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Same data, outside the graph."""
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype):
        return Tensor(self.data.astype(np.dtype(dtype).type), requires_grad=False)

    def backward(self):
        backward(self)

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zeros(shape, dtype=None, requires_grad=False, name=None):
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad, name=name)


def ones(shape, dtype=None, requires_grad=False, name=None):
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad, name=name)


def scalar(value, dtype=None):
    return Tensor(np.asarray(value, dtype=dtype or _default_dtype))


# -- graph plumbing ------------------------------------------------------------


def _result(data, parents, vjp):
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._vjp = vjp
        return out
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _shape_err(op, a, b):
    return ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def backward(root):
    """Fill ``.grad`` of every requires_grad tensor reachable from ``root``.

    ``root`` must hold a single element. Grads accumulate across calls.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor root")
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return

    # Iterative topological order (graphs are deep enough to overflow recursion).
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flows = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            flows[key] = pg if key not in flows else flows[key] + pg


# -- elementwise kernels -------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise _shape_err("add", a, b) from None
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise _shape_err("mul", a, b) from None
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise _shape_err("div", a, b) from None
    return _result(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * np.asarray(c, dtype=a.dtype), (a,), lambda g: (g * np.asarray(c, dtype=a.dtype),))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def sqrt(a):
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _result(data, (a,), lambda g: (g * (0.5 / data),))


def clamp_min(a, floor):
    """Elementwise max(a, floor); gradient flows only where a > floor."""
    a = as_tensor(a)
    floor = float(floor)
    data = np.maximum(a.data, np.asarray(floor, dtype=a.dtype))
    mask = (a.data > floor).astype(a.dtype.type)
    return _result(data, (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact erf formulation: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * np.asarray(_INV_SQRT2, dtype=a.dtype)))
    data = (x * cdf).astype(a.dtype.type, copy=False)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * np.asarray(_INV_SQRT_2PI, dtype=a.dtype)
        return (g * (cdf + x * pdf),)

    return _result(data, (a,), vjp)


# -- shape kernels ---------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _result(data, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tuple(tensors), vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along ``axis``."""
    a = as_tensor(a)
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ValueError(f"narrow: [{start}, {start + length}) outside axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index], (a,), vjp)


def gather_rows(a, indices, axis=0):
    """Select positions along ``axis``; duplicate indices accumulate grads."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(a.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _result(data, (a,), vjp)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy(),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, tuple(ax % a.ndim for ax in axes))
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), vjp)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b):
    """Matrix product with numpy batching; leading axes may broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise _shape_err("matmul", a, b) from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (ga, gb)

    return _result(data, (a, b), vjp)


# -- normalization and distribution kernels ----------------------------------------


def softmax_t(logits, axis=-1, temperature=1.0):
    """Temperature softmax along ``axis``, stabilized by max-subtraction."""
    logits = as_tensor(logits)
    if temperature <= 0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    if not np.isfinite(logits.data).all():
        raise ValueError(f"softmax_t: non-finite values in {logits.label()}")
    inv_t = np.asarray(1.0 / temperature, dtype=logits.dtype)
    z = logits.data * inv_t
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y * inv_t,)

    return _result(y, (logits,), vjp)


def l2_normalize_rows(x, eps=1e-8):
    """Scale each last-axis vector to unit Euclidean norm.

    Rows with norm <= ``eps`` are rejected: a direction cannot be
    recovered from a near-zero vector.
    """
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norm <= eps).any():
        raise ValueError(f"l2_normalize_rows: row norm below {eps} in {x.label()}")
    y = x.data / norm

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * inner) / norm,)

    return _result(y, (x,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the affine pair.

    The variance is floored by ``eps``, so a constant vector maps to the
    zero vector before gamma/beta are applied.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ValueError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match feature dim {x.shape[-1:]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = centered * inv_std
    data = xhat * gamma.data + beta.data

    def vjp(g):
        d = x.shape[-1]
        dxhat = g * gamma.data
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * inv_std
        lead = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return (dx, dgamma, dbeta)

    return _result(data, (x, gamma, beta), vjp)


CROSS_ENTROPY_EPS = 1e-12  # log clamp; teacher sharpening produces near-zero probabilities


def cross_entropy_rows(target, prediction, eps=CROSS_ENTROPY_EPS):
    """Mean over last-axis rows of -sum(target * log(prediction)).

    Predictions are clamped below by ``eps`` before the log. Both inputs
    are expected to be row-stochastic along the last axis.
    """
    target, prediction = as_tensor(target), as_tensor(prediction)
    if target.shape != prediction.shape:
        raise ValueError(f"cross_entropy_rows: shape mismatch {target.shape} vs {prediction.shape}")
    if (target.data < 0).any():
        raise ValueError("cross_entropy_rows: negative entries in target")
    if (prediction.data < 0).any():
        raise ValueError("cross_entropy_rows: negative entries in prediction")
    per_row = scale(tensor_sum(mul(target, log(clamp_min(prediction, eps))), axis=-1), -1.0)
    return tensor_mean(per_row)
