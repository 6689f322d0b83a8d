"""Reverse-mode autodiff over numpy arrays.

The graph is built dynamically: each op returns a `Var` holding its forward
value, its parents, and a closure that routes the incoming gradient to those
parents. Calling `backward(loss)` walks the tape (the topological order of
the graph below `loss`) once and accumulates gradients into every reachable
node with `requires_grad`.

Complex features take the R^2 view: a `ComplexVar` is two independent real
`Var` planes. Every loss in the library is a real-valued function of those
planes, so plain real backprop is exact and no Wirtinger machinery is needed.

Branchy ops (maximum, pooling selection) differentiate through the branch
chosen in the forward pass; ties select deterministically (first operand,
lowest row-major index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


class Var:
    """Node in the computation graph: a numpy value plus gradient plumbing."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None, requires_grad=None):
        self.data = np.asarray(data)
        self.grad = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Var":
        return Var(self.data, requires_grad=False)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_var(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sumv(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return meanv(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Var):
    """Trainable leaf with a stable name for checkpointing."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.asarray(data), requires_grad=trainable)
        self.name = name
        self.trainable = trainable


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x), requires_grad=False)


def _accum(p: Var, g: np.ndarray):
    if not p.requires_grad:
        return
    if p.grad is None:
        p.grad = np.array(g, dtype=p.data.dtype)
    else:
        p.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def topo_order(root: Var) -> list[Var]:
    """Tape below `root`: parents precede children."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Var) -> None:
    """Accumulate d(loss)/d(node) into every reachable node requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Var(a.data + b.data, (a, b), bwd)


def neg(a) -> Var:
    a = as_var(a)
    return Var(-a.data, (a,), lambda g: _accum(a, -g))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Var(a.data * b.data, (a, b), bwd)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out / b.data, b.data.shape))

    return Var(out, (a, b), bwd)


def pow_const(a, p) -> Var:
    a = as_var(a)
    out = a.data ** p
    return Var(out, (a,), lambda g: _accum(a, g * p * a.data ** (p - 1)))


def square(a) -> Var:
    a = as_var(a)
    return Var(a.data * a.data, (a,), lambda g: _accum(a, g * 2.0 * a.data))


def sqrt(a) -> Var:
    a = as_var(a)
    out = np.sqrt(a.data)
    return Var(out, (a,), lambda g: _accum(a, g * 0.5 / out))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)
    return Var(out, (a,), lambda g: _accum(a, g * out))


def log(a) -> Var:
    a = as_var(a)
    return Var(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def sigmoid(a) -> Var:
    a = as_var(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Var(out, (a,), lambda g: _accum(a, g * out * (1.0 - out)))


def maximum(a, b) -> Var:
    """Elementwise max; ties route the gradient to the first operand."""
    a, b = as_var(a), as_var(b)
    take_a = a.data >= b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return Var(np.where(take_a, a.data, b.data), (a, b), bwd)


def relu(a) -> Var:
    a = as_var(a)
    mask = a.data > 0
    return Var(a.data * mask, (a,), lambda g: _accum(a, g * mask))


def leaky_relu(a, slope: float = 0.2) -> Var:
    a = as_var(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return Var(a.data * scale, (a,), lambda g: _accum(a, g * scale))


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Var(a.data @ b.data, (a, b), bwd)


def sumv(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return Var(out, (a,), bwd)


def meanv(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / out.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / count)

    return Var(out, (a,), bwd)


def reshape(a, shape) -> Var:
    a = as_var(a)
    return Var(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.data.shape)))


def concat(parts, axis=1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            _accum(p, piece)

    return Var(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bwd)


def take_batch(a, idx) -> Var:
    """Gather along axis 0 (used for in-batch fooling partners)."""
    a = as_var(a)
    idx = np.asarray(idx)

    def bwd(g):
        if a.requires_grad:
            da = np.zeros_like(a.data)
            np.add.at(da, idx, g)
            _accum(a, da)

    return Var(a.data[idx], (a,), bwd)


def pad_spatial(a, pt: int, pb: int, pl: int, pr: int) -> Var:
    """Zero-pad the two trailing spatial axes of (N,C,H,W)."""
    a = as_var(a)
    out = np.pad(a.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    h, w = a.data.shape[2], a.data.shape[3]

    def bwd(g):
        _accum(a, g[:, :, pt:pt + h, pl:pl + w])

    return Var(out, (a,), bwd)


def crop_spatial(a, top: int, left: int, h: int, w: int) -> Var:
    a = as_var(a)

    def bwd(g):
        da = np.zeros_like(a.data)
        da[:, :, top:top + h, left:left + w] = g
        _accum(a, da)

    return Var(a.data[:, :, top:top + h, left:left + w], (a,), bwd)


def upsample2x(a) -> Var:
    """Nearest-neighbour 2x spatial upsampling."""
    a = as_var(a)
    out = a.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        _accum(a, g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return Var(out, (a,), bwd)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Var:
    """Bias-free convolution of Var (N,C,H,W) with kernel Var (F,C,kh,kw)."""
    x, w = as_var(x), as_var(w)
    n, c, h, wd = x.data.shape
    f, cw, kh, kw = w.data.shape
    if cw != c:
        raise ValueError(f"kernel expects {cw} input channels, input has {c}")
    oh, ow = T.conv_out_hw(h, wd, kh, kw, stride, padding)
    cols = T.im2col(x.data, kh, kw, stride, padding)
    wflat = w.data.reshape(f, -1)
    out = (cols @ wflat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def bwd(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if w.requires_grad:
            _accum(w, (gcols.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            _accum(x, T.col2im(gcols @ wflat, x.data.shape, kh, kw, stride, padding))

    return Var(out, (x, w), bwd)


def pool_select(x, weights: np.ndarray, window: int, stride: int) -> Var:
    """Weighted window reduction: out[.,i,j] = sum_t win[.,i,j,t] * weights[.,i,j,t].

    `weights` is a fixed (non-differentiable) array: a one-hot selection for
    max-style pooling, a constant 1/window^2 for average pooling. The
    gradient scatters back through the chosen window taps only.
    """
    x = as_var(x)
    win = T.pool_windows(x.data, window, stride)
    out = (win * weights).sum(axis=-1)

    def bwd(g):
        if not x.requires_grad:
            return
        gwin = g[..., None] * weights
        n, c, oh, ow, _ = gwin.shape
        gwin = gwin.reshape(n, c, oh, ow, window, window)
        dx = np.zeros_like(x.data)
        for ki in range(window):
            for kj in range(window):
                dx[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += gwin[:, :, :, :, ki, kj]
        _accum(x, dx)

    return Var(out, (x,), bwd)


def log_softmax(a) -> Var:
    """Row-stable log-softmax over the last axis of (N,K) logits."""
    a = as_var(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        _accum(a, g - soft * g.sum(axis=-1, keepdims=True))

    return Var(out, (a,), bwd)


def select_rows(a, idx) -> Var:
    """out[n] = a[n, idx[n]] for integer labels idx."""
    a = as_var(a)
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])

    def bwd(g):
        da = np.zeros_like(a.data)
        da[rows, idx] = g
        _accum(a, da)

    return Var(a.data[rows, idx], (a,), bwd)


# ---------------------------------------------------------------------------
# complex pair
# ---------------------------------------------------------------------------

@dataclass
class ComplexVar:
    """Complex graph value as two real planes."""

    re: Var
    im: Var

    @property
    def shape(self):
        return self.re.data.shape

    def __add__(self, other: "ComplexVar") -> "ComplexVar":
        return ComplexVar(self.re + other.re, self.im + other.im)

    def rotate(self, theta) -> "ComplexVar":
        """Multiply by exp(i*theta); theta is a constant scalar or array."""
        theta = np.asarray(theta, dtype=self.re.data.dtype)
        c, s = np.cos(theta), np.sin(theta)
        return ComplexVar(self.re * c - self.im * s, self.im * c + self.re * s)

    def magnitude_sq(self) -> Var:
        return square(self.re) + square(self.im)

    def magnitude(self, guard: float = 0.0) -> Var:
        """Elementwise |f|; `guard` is added under the root to keep the
        gradient finite at exact zeros (dropout output feeding a nonlinearity)."""
        m2 = self.magnitude_sq()
        return sqrt(m2 + guard) if guard else sqrt(m2)

    def detach(self) -> "ComplexVar":
        return ComplexVar(self.re.detach(), self.im.detach())

    def to_tensor(self) -> T.ComplexTensor:
        return T.ComplexTensor(self.re.data.copy(), self.im.data.copy())


def cvar(x: T.ComplexTensor, requires_grad: bool = False) -> ComplexVar:
    return ComplexVar(Var(x.re, requires_grad=requires_grad),
                      Var(x.im, requires_grad=requires_grad))


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def grad_check(fn, inputs: list[Var], step: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued `fn` against central
    finite differences, coordinate by coordinate.

    Returns the max over all coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Inputs should be f64 and positioned away from branch boundaries.
    """
    for v in inputs:
        v.zero_grad()
    loss = fn(inputs)
    backward(loss)
    analytic = [np.zeros_like(v.data) if v.grad is None else v.grad.copy() for v in inputs]

    worst = 0.0
    for v, ana in zip(inputs, analytic):
        flat = v.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn(inputs).data)
            flat[i] = orig - step
            down = float(fn(inputs).data)
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            a = float(ana.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-8))
    return worst
