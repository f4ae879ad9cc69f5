"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the model is a :class:`Tensor`.  Operations record a backward
rule on their output when any input requires a gradient; :meth:`Tensor.backward`
walks the recorded graph once, in reverse topological order, and accumulates
gradients into the leaf tensors.

Operations also report their floating-point cost to any active
:func:`count_flops` context.  The convention is fixed here and mirrored by the
closed-form profiler in :mod:`dynperceiver.flops`:

* multiply-accumulate = 2 FLOPs (matmul, linear, conv)
* bias add, residual add, scaling, activation = 1 FLOP per output element
* softmax = 2 FLOPs per element (exp + div)
* layer norm = 7 FLOPs per element
* average pooling / mean = (n - 1) adds + 1 div per output, i.e. n per output
"""

from __future__ import annotations

import contextlib
import hashlib
from collections import Counter
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericalError, ShapeError

NORM_FLOPS_PER_ELEMENT = 7
SOFTMAX_FLOPS_PER_ELEMENT = 2

_grad_enabled = True
_counters: list["FlopCounter"] = []


class FlopCounter:
    """Tally of FLOPs reported by operations while the counter is active."""

    def __init__(self):
        self.total = 0
        self.by_op: Counter = Counter()

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] += int(n)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(op: str, n: int) -> None:
    for c in _counters:
        c.add(op, n)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(graph_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def graph_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through gradient-carrying edges, parents first."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise

def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    data = a.data + b.data
    _tally("add", data.size)
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    data = a.data - b.data
    _tally("sub", data.size)
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    data = a.data * b.data
    _tally("mul", data.size)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    data = a.data / b.data
    _tally("div", data.size)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    _tally("neg", a.size)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data ** exponent
    _tally("pow", a.size)
    return _result(data, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)
    _tally("exp", a.size)
    return _result(data, (a,), lambda g: (g * data,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    _tally("log", a.size)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    _tally("act", a.size)
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    _tally("act", a.size)

    def backward(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _result(x * cdf, (a,), backward, "gelu")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "neg": neg, "exp": exp, "log": log, "relu": relu, "gelu": gelu,
}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name (binary when ``b`` is given)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a) if b is None else fn(a, b)


# ---------------------------------------------------------------------------
# reductions and layout

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    _tally("sum", a.size - data.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    data = a.data.sum(axis=axes, keepdims=keepdims) / count
    _tally("pool", a.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(data, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def expand(a, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (copying, no arithmetic)."""
    a = _as_tensor(a)
    shape = tuple(shape)
    if _broadcast_shape(a.shape, shape) != shape:
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    data = np.broadcast_to(a.data, shape).copy()
    return _result(data, (a,), lambda g: (_unbroadcast(g, a.shape),), "expand")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad permutation {axes} for shape {a.shape}")
    inverse = tuple(sorted(range(len(axes)), key=axes.__getitem__))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul needs equal-rank operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    _tally("matmul", 2 * m * n * k * int(np.prod(a.shape[:-2], dtype=np.int64)))

    def backward(g):
        return (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _result(data, (a, b), backward, "matmul")


def linear(x, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    x = _as_tensor(x)
    out_f, in_f = weight.shape
    if x.shape[-1] != in_f:
        raise ShapeError(f"linear expects last dim {in_f}, got input shape {x.shape}")
    x2 = x.data.reshape(-1, in_f)
    y = x2 @ weight.data.T
    n = x2.shape[0]
    _tally("linear", 2 * n * in_f * out_f)
    if bias is not None:
        y = y + bias.data
        _tally("bias", n * out_f)
    data = y.reshape(x.shape[:-1] + (out_f,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, out_f)
        gx = (g2 @ weight.data).reshape(x.shape)
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(data, parents, backward, "linear")


def conv2d(x, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-d cross-correlation of ``x[B, C, H, W]`` with ``weight[O, C/groups, kh, kw]``."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    O, cg, kh, kw = weight.shape
    if C % groups or O % groups or cg != C // groups:
        raise ShapeError(f"conv2d weight {weight.shape} incompatible with input {x.shape} and groups={groups}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kh or Wp < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    og = O // groups
    if padding:
        xp = np.zeros((B, C, Hp, Wp))
        xp[:, :, padding:padding + H, padding:padding + W] = x.data
    else:
        xp = x.data
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    depthwise = cg == 1 and og == 1
    if depthwise:
        wd = weight.data[:, 0]
        out = np.zeros((B, C, Ho, Wo))
        for u in range(kh):
            for v in range(kw):
                out += xp[:, :, u:u + hs:stride, v:v + ws:stride] * wd[None, :, u, v, None, None]
    elif groups == 1:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
        wmat = weight.data.reshape(O, C * kh * kw)
        out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = win.reshape(B, groups, cg, Ho, Wo, kh, kw)
        wg = weight.data.reshape(groups, og, cg, kh, kw)
        out = np.einsum("bgchwuv,gocuv->bgohw", cols, wg).reshape(B, O, Ho, Wo)
    _tally("conv", 2 * kh * kw * cg * O * Ho * Wo * B)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
        _tally("bias", B * O * Ho * Wo)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gxp = np.zeros_like(xp)
        if depthwise:
            gw = np.zeros_like(weight.data)
            for u in range(kh):
                for v in range(kw):
                    patch = xp[:, :, u:u + hs:stride, v:v + ws:stride]
                    gw[:, 0, u, v] = (g * patch).sum(axis=(0, 2, 3))
                    gxp[:, :, u:u + hs:stride, v:v + ws:stride] += g * wd[None, :, u, v, None, None]
        else:
            if groups == 1:
                g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
                gw = (g2.T @ cols).reshape(weight.shape)
                gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            else:
                gg = g.reshape(B, groups, og, Ho, Wo)
                gw = np.einsum("bgohw,bgchwuv->gocuv", gg, cols).reshape(weight.shape)
                gcols = np.einsum("bgohw,gocuv->bgchwuv", gg, wg).reshape(B, C, Ho, Wo, kh, kw)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, :, u:u + hs:stride, v:v + ws:stride] += gcols[..., u, v]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# pooling, normalisation, softmax

def _pool_matrix(n: int, out: int) -> np.ndarray:
    m = np.zeros((out, n))
    for i in range(out):
        lo, hi = (i * n) // out, ((i + 1) * n) // out
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x, out: int) -> Tensor:
    """Average ``x[B, C, H, W]`` over ``out x out`` bins ``[floor(i*H/out), floor((i+1)*H/out))``."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d expects [B,C,H,W], got {x.shape}")
    H, W = x.shape[2:]
    if H < out or W < out:
        raise ShapeError(f"cannot pool {H}x{W} down to {out}x{out}")
    if H == out and W == out:
        _tally("pool", x.size)
        return _result(x.data.copy(), (x,), lambda g: (g,), "pool")
    ph, pw = _pool_matrix(H, out), _pool_matrix(W, out)
    data = ph @ x.data @ pw.T
    _tally("pool", x.size)
    return _result(data, (x,), lambda g: (ph.T @ g @ pw,), "pool")


def layer_norm(x, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = _as_tensor(x)
    d = x.shape[-1]
    if weight.shape != (d,):
        raise ShapeError(f"layer_norm weight {weight.shape} does not match last dim of {x.shape}")
    xc = x.data - x.data.sum(axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) / d + eps)
    xhat = xc * inv
    _tally("norm", NORM_FLOPS_PER_ELEMENT * x.size)

    def backward(g):
        gxhat = g * weight.data
        gx = inv * (gxhat - gxhat.sum(axis=-1, keepdims=True) / d
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / d)
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(xhat * weight.data + bias.data, (x, weight, bias), backward, "layer_norm")


def _check_nan(x: np.ndarray, where: str) -> None:
    if np.isnan(x).any():
        raise NumericalError(f"NaN input to {where}")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_nan(x.data, "softmax")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    _tally("softmax", SOFTMAX_FLOPS_PER_ELEMENT * x.size)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_nan(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    _tally("softmax", SOFTMAX_FLOPS_PER_ELEMENT * x.size)

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# gradient checking

def _scalar(t: Tensor) -> float:
    v = float(np.asarray(t.data).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericalError(f"objective is not finite ({v})")
    return v


def gradient_errors(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None) -> list[float]:
    """Per-parameter maximum relative error between backprop and central differences.

    ``max_entries`` limits the check to that many evenly spaced entries per parameter.
    """
    if not 0.0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ContractError("gradient_check parameters must be finite")
        p.grad = None
    loss = f()
    _scalar(loss)
    loss.backward()
    errors = []
    with no_grad():
        for p in params:
            analytic = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.size)
            flat = p.data.reshape(-1)
            worst = 0.0
            idx = range(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.unique(np.linspace(0, flat.size - 1, max_entries).round().astype(int))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(f())
                flat[i] = orig - eps
                fm = _scalar(f())
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                a = analytic[i]
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
            errors.append(worst)
    return errors


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                   max_entries: int | None = None) -> float:
    return max(gradient_errors(f, params, eps, max_entries), default=0.0)


# ---------------------------------------------------------------------------
# deterministic initialisation

def param_rng(seed: int, path: str) -> np.random.Generator:
    """Counter-based generator keyed by (global seed, parameter path)."""
    digest = hashlib.sha256(f"{int(seed)}/{path}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def trunc_normal(rng: np.random.Generator, shape: Iterable[int], std: float) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within two standard deviations."""
    out = rng.normal(0.0, std, size=tuple(shape))
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out
