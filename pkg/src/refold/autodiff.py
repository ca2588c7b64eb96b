"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Every op returns a :class:`Tensor` whose ``_backward`` closure pushes the incoming
gradient into its parents. ``Tensor.backward`` walks the tape in reverse
topological order. Each forward value is checked for NaN/Inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if p.requires_grad)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents, backward) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out.name = ""
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """tanh approximation; smooth, so finite-difference checks hold everywhere."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by the constant ``value`` (no gradient there)."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _make(np.where(mask, float(value), x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


# -- shape ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# -- reductions ----------------------------------------------------------------------

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ---------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of an operand must appear in the output or in
    the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        if len(set(own)) != len(own) or any(c not in out_sub and c not in other for c in own):
            raise ValueError(f"einsum {subscripts!r} not supported by the backward rule")
    out = np.einsum(subscripts, a.data, b.data)
    return _make(out, (a, b), lambda g: (np.einsum(f"{out_sub},{sb}->{sa}", g, b.data),
                                         np.einsum(f"{out_sub},{sa}->{sb}", g, a.data)))


def embedding_lookup(weight, indices) -> Tensor:
    """Rows of ``weight`` (V, d) gathered by an integer array of any shape."""
    weight = as_tensor(weight)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ValueError("embedding index out of range")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(weight.data[idx], (weight,), backward)


def masked_depthwise_conv1d(x, kernel, mask=None) -> Tensor:
    """Per-channel convolution along the length axis with 'same' zero padding.

    ``x`` is (..., L, d), ``kernel`` (d, w) with odd width w, ``mask`` (..., L) marks the
    positions that exist. Missing positions are zero-filled on input and zeroed on output.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    d, width = kernel.shape
    if width % 2 != 1:
        raise ValueError("kernel width must be odd")
    if x.shape[-1] != d:
        raise ValueError(f"channel mismatch: input has {x.shape[-1]}, kernel has {d}")
    length = x.shape[-2]
    pad = width // 2
    m = np.ones(x.shape[:-1], dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), x.shape[:-1])
    mf = m[..., None].astype(np.float64)
    xm = x.data * mf
    widths = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(xm, widths)
    # windows[..., l, c, k] = xp[..., l + k, c]
    windows = np.stack([xp[..., k:k + length, :] for k in range(width)], axis=-1)
    out = np.einsum("...lck,ck->...lc", windows, kernel.data) * mf

    def backward(g):
        g = g * mf
        gk = np.einsum("nlc,nlck->ck", g.reshape(-1, length, d), windows.reshape(-1, length, d, width))
        gp = np.zeros_like(xp)
        for k in range(width):
            gp[..., k:k + length, :] += g * kernel.data[:, k]
        gx = gp[..., pad:pad + length, :] * mf
        return gx, gk

    return _make(out, (x, kernel), backward)


def pointwise_conv(x, weight, bias=None) -> Tensor:
    """Kernel-1 convolution: a shared linear map over the channel axis."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- normalisation and losses --------------------------------------------------------------

def _mask_for(x, axis, mask):
    if mask is None:
        return None
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(np.any(m, axis=axis)):
        raise ValueError("softmax over an axis whose entries are all masked")
    return m


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is false get probability 0."""
    x = as_tensor(x)
    m = _mask_for(x, axis, mask)
    z = x.data if m is None else np.where(m, x.data, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _make(p, (x,), backward)


def log_softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Log-softmax along ``axis``; masked entries read 0 and carry no gradient."""
    x = as_tensor(x)
    m = _mask_for(x, axis, mask)
    z = x.data if m is None else np.where(m, x.data, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=axis, keepdims=True))
    out = x.data - lse
    if m is not None:
        out = np.where(m, out, 0.0)
    p = np.exp(np.where(m, out, -np.inf)) if m is not None else np.exp(out)

    def backward(g):
        if m is not None:
            g = np.where(m, g, 0.0)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits, targets, position_mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(``logits``)
    over the positions selected by ``position_mask``."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != t.shape:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    keep = np.ones(t.shape, bool) if position_mask is None else np.asarray(position_mask, bool)
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy over an empty position mask")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    loss = -np.sum(picked[keep]) / n

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], axis=-1) - 1.0, axis=-1)
        grad *= keep[..., None] / n
        return (grad * g,)

    return _make(np.array(loss), (logits,), backward)


def binary_cross_entropy_with_logits(logits, targets) -> Tensor:
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    loss = np.mean(np.logaddexp(0.0, z) - y * z)

    def backward(g):
        s = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * (s - y) / z.size,)

    return _make(np.array(loss), (logits,), backward)


# -- checking ------------------------------------------------------------------------------

def grad_check(f, params, eps: float = 1e-5, max_coords: int | None = None, rng=None,
               stencil: str = "central") -> float:
    """Largest |analytic - numeric| / max(1e-8, |analytic| + |numeric|) over checked
    coordinates. ``max_coords`` samples that many coordinates per parameter (all when None).

    ``stencil="central"`` is the two-point difference with step ``eps``. Its roundoff
    (about machine-eps * |f| / eps) swamps coordinates whose gradient is below ~1e-7;
    ``stencil="richardson"`` uses the four-point O(eps^4) formula, which tolerates a
    step around 1e-2 and resolves those coordinates.
    """
    if stencil not in ("central", "richardson"):
        raise ValueError(f"unknown stencil {stencil!r}")
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [p.grad.copy() for p in params]
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]

            def at(delta):
                flat[c] = orig + delta
                return f().item()

            if stencil == "central":
                num = (at(eps) - at(-eps)) / (2 * eps)
            else:
                num = (at(-2 * eps) - 8 * at(-eps) + 8 * at(eps) - at(2 * eps)) / (12 * eps)
            flat[c] = orig
            a = ga.reshape(-1)[c]
            worst = max(worst, abs(a - num) / max(1e-8, abs(a) + abs(num)))
    return worst


# -- optimisation ----------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def effective_lr(self) -> float:
        return self.lr * min(1.0, (self.step + 1) / max(self.warmup_steps, 1))


def adam_step(state: OptimizerState, params: list, grads: list) -> list:
    """One Adam update with linear warm-up; arrays in ``params`` are updated in place."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    lr = state.effective_lr()
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step += 1
    return params


class Adam:
    """Adam over a list of :class:`Tensor` parameters."""

    def __init__(self, params, lr: float = 1e-3, warmup_steps: int = 500):
        self.params = list(params)
        self.state = OptimizerState(lr=lr, warmup_steps=warmup_steps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, scale: float = 1.0):
        grads = [p.grad * scale for p in self.params]
        adam_step(self.state, [p.data for p in self.params], grads)
