"""Dense float tensors with reverse-mode automatic differentiation.

Everything the model computes runs through this module: 2-D matmul, row
softmax, layer norm, the temporal patch convolution, linear resizing,
GELU, cross entropy, and the shape plumbing (reshape, concat, slicing).
Every op that touches a tensor with ``requires_grad`` records a backward
closure; ``Tensor.backward`` replays the recorded ops in exact reverse
execution order (creation stamps are monotonically increasing, so sorting
the reachable subgraph by stamp descending is the reverse of the order in
which the ops ran).

Default precision is float64 so finite-difference checks are meaningful;
``set_default_dtype(np.float32)`` trades that for speed.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError, UsageError

_dtype = np.float64
_stamp_counter = itertools.count()

INV_SQRT2 = 1.0 / math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype):
    """Set the float width used for new tensors (float64 or float32)."""
    global _dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported default dtype {dt}")
    _dtype = dt.type


def default_dtype():
    return _dtype


class Tensor:
    """A dense array plus the bookkeeping needed to backpropagate into it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_stamp")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._stamp = next(_stamp_counter)

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
        return float(self.data)

    def detach(self):
        """A view of the same data that no gradient flows through."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable parameter."""
        if self.data.size != 1:
            raise UsageError("backward expects a scalar loss tensor")
        if not self.requires_grad:
            raise UsageError("backward on a tensor detached from any gradient tape")
        nodes = []
        stack = [self]
        seen = {id(self)}
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._stamp, reverse=True)
        self.grad = np.ones_like(self.data)
        for t in nodes:
            if t._backward_fn is not None and t.grad is not None:
                t._backward_fn(t.grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


def _accumulate(t, g):
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    # Sum the gradient back down to `shape` after numpy broadcasting.
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    """Elementwise sum; shapes must match or be broadcastable by size-1 axes."""
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g, b.data.shape))
        out._backward_fn = backward
    return out


def mul(a, b):
    """Elementwise product; accepts python scalars and scalar tensors."""
    a, b = as_tensor(a), as_tensor(b)
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(g * a.data, b.data.shape))
        out._backward_fn = backward
    return out


def matmul(a, b):
    """2-D matrix product. dA = dC @ B^T, dB = A^T @ dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} @ {b.data.shape}")
    out = _result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accumulate(a, g @ b.data.T)
            if b.requires_grad:
                _accumulate(b, a.data.T @ g)
        out._backward_fn = backward
    return out


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {x.data.shape}")
    out = _result(x.data.T.copy(), (x,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accumulate(x, g.T)
    return out


def reshape(x, shape):
    x = as_tensor(x)
    out = _result(x.data.reshape(shape), (x,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accumulate(x, g.reshape(x.data.shape))
    return out


def broadcast_to(x, shape):
    """Expand size-1 axes to `shape`; backward sums over the expanded axes."""
    x = as_tensor(x)
    out = _result(np.broadcast_to(x.data, shape).copy(), (x,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accumulate(x, _unbroadcast(g, x.data.shape))
    return out


def sum_all(x):
    x = as_tensor(x)
    out = _result(np.asarray(x.data.sum()), (x,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
    return out


def mean_axis(x, axis, keepdims=False):
    """Arithmetic mean over one listed axis."""
    x = as_tensor(x)
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.data.shape}")
    axis = axis % x.data.ndim
    n = x.data.shape[axis]
    out = _result(x.data.mean(axis=axis, keepdims=keepdims), (x,))
    if out.requires_grad:
        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(x, np.broadcast_to(g / n, x.data.shape).copy())
        out._backward_fn = backward
    return out


def concat(tensors, axis):
    """Concatenate along one axis (used for heads on the last axis and token unions on rows)."""
    tensors = [as_tensor(t) for t in tensors]
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    _accumulate(t, g[tuple(idx)])
        out._backward_fn = backward
    return out


def slice_axis(x, axis, start, stop):
    """Contiguous slice along one axis; backward scatters into zeros."""
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _result(x.data[idx].copy(), (x,))
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(x.data)
            full[idx] = g
            _accumulate(x, full)
        out._backward_fn = backward
    return out


def permute_rows(x, perm):
    """Reorder rows of a 2-D tensor: out[i] = x[perm[i]]."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"permute_rows expects a 2-D tensor, got {x.data.shape}")
    perm = np.asarray(perm, dtype=np.intp)
    if sorted(perm.tolist()) != list(range(x.data.shape[0])):
        raise ShapeError("perm must be a permutation of the row indices")
    out = _result(x.data[perm].copy(), (x,))
    if out.requires_grad:
        inv = np.argsort(perm)
        out._backward_fn = lambda g: _accumulate(x, g[inv])
    return out


def softmax_rows(x):
    """Row softmax of a 2-D tensor, stabilized by row-max subtraction."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D tensor, got {x.data.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows input contains NaN or Inf")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = _result(y, (x,))
    if out.requires_grad:
        def backward(g):
            dot = (g * y).sum(axis=1, keepdims=True)
            _accumulate(x, (g - dot) * y)
        out._backward_fn = backward
    return out


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"layer_norm parameters must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _result(xhat * gamma.data + beta.data, (x, gamma, beta))
    if out.requires_grad:
        def backward(g):
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
            if beta.requires_grad:
                _accumulate(beta, g.reshape(-1, d).sum(axis=0))
            if x.requires_grad:
                gg = g * gamma.data
                m1 = gg.mean(axis=-1, keepdims=True)
                m2 = (gg * xhat).mean(axis=-1, keepdims=True)
                _accumulate(x, (gg - m1 - xhat * m2) * inv)
        out._backward_fn = backward
    return out


def gelu(x):
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * INV_SQRT2))
    out = _result(x.data * cdf, (x,))
    if out.requires_grad:
        def backward(g):
            pdf = np.exp(-0.5 * x.data * x.data) * INV_SQRT_2PI
            _accumulate(x, g * (cdf + x.data * pdf))
        out._backward_fn = backward
    return out


def _conv_operands(x, kernel):
    xd = x.data if x.data.ndim == 3 else x.data[:, :, None]
    kd = kernel.data if kernel.data.ndim == 4 else kernel.data[:, :, :, None]
    t, p, c = xd.shape
    dout, kp, kq, kc = kd.shape
    if kp != p or kq != p:
        raise ShapeError(f"kernel spatial size {kp}x{kq} must equal input width {p}")
    if kc != c:
        raise ShapeError(f"kernel channels {kc} != input channels {c}")
    return xd, kd, t, p, c, dout


def conv_steps(t, p, stride, padding):
    """Number of temporal output steps: ceil((T + 2*padding - P + 1) / stride)."""
    span = t + 2 * padding - p + 1
    return -(-span // stride)


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Temporal patch convolution: a P x P (x C) kernel slides along the frame axis.

    Input is T x P (x C); zero padding is applied symmetrically on the
    temporal axis only. Output is L x D_out with
    L = ceil((T + 2*padding - P + 1) / stride).
    """
    if stride < 1:
        raise ConfigError("conv2d stride must be >= 1")
    if padding < 0:
        raise ConfigError("conv2d padding must be >= 0")
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, kd, t, p, c, dout = _conv_operands(x, kernel)
    ell = conv_steps(t, p, stride, padding)
    if ell < 1:
        raise ConfigError(f"conv2d yields {ell} output steps for T={t}, P={p}, "
                          f"stride={stride}, padding={padding}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.data.shape != (dout,):
            raise ShapeError(f"bias must have shape ({dout},)")
    xpad = np.pad(xd, ((padding, padding), (0, 0), (0, 0))) if padding else xd
    # windows[j] covers padded frames [j*stride, j*stride + P)
    windows = np.stack([xpad[j * stride:j * stride + p] for j in range(ell)])
    y = np.einsum("jpqc,dpqc->jd", windows, kd)
    if bias is not None:
        y = y + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _result(y, parents)
    if out.requires_grad:
        def backward(g):
            if kernel.requires_grad:
                gk = np.einsum("jd,jpqc->dpqc", g, windows)
                _accumulate(kernel, gk.reshape(kernel.data.shape))
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=0))
            if x.requires_grad:
                gpad = np.zeros_like(xpad)
                gwin = np.einsum("jd,dpqc->jpqc", g, kd)
                for j in range(ell):
                    gpad[j * stride:j * stride + p] += gwin[j]
                gx = gpad[padding:padding + t] if padding else gpad
                _accumulate(x, gx.reshape(x.data.shape))
        out._backward_fn = backward
    return out


def resize_weights(source, target):
    """Align-corners interpolation matrix W (target x source), rows summing to 1."""
    if source < 1 or target < 1:
        raise ShapeError("resize extents must be >= 1")
    w = np.zeros((target, source))
    if source == 1:
        w[:, 0] = 1.0
        return w
    if target == 1:
        w[0, 0] = 1.0
        return w
    for i in range(target):
        pos = i * (source - 1) / (target - 1)
        j0 = min(int(pos), source - 2)
        frac = pos - j0
        w[i, j0] = 1.0 - frac
        w[i, j0 + 1] = frac
    return w


def linear_interp_resize(x, target):
    """Resize the middle (joint) axis of a T x J x C tensor to `target` points.

    Align-corners convention: output i samples source coordinate
    i*(J-1)/(target-1); endpoints are preserved exactly and J = 1
    broadcasts the single joint.
    """
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"linear_interp_resize expects T x J x C, got {x.data.shape}")
    w = resize_weights(x.data.shape[1], target)
    out = _result(np.einsum("pj,tjc->tpc", w, x.data), (x,))
    if out.requires_grad:
        out._backward_fn = lambda g: _accumulate(x, np.einsum("pj,tpc->tjc", w, g))
    return out


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer class labels under softmax(logits)."""
    logits = as_tensor(logits)
    ld = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    if not np.isfinite(ld).all():
        raise NumericError("cross_entropy logits contain NaN or Inf")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    n, c = ld.shape
    if labels.shape != (n,):
        raise ShapeError(f"need {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"label out of range for {c} classes")
    z = ld - ld.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    out = _result(np.asarray(loss), (logits,))
    if out.requires_grad:
        def backward(g):
            grad = np.exp(logp)
            grad[np.arange(n), labels] -= 1.0
            grad *= float(g) / n
            _accumulate(logits, grad.reshape(logits.data.shape))
        out._backward_fn = backward
    return out


def linear(x, w, b=None):
    """x @ w (+ row-broadcast bias)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def dropout(x, rate, rng):
    """Inverted dropout with a caller-supplied generator (off when rate == 0)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    x = as_tensor(x)
    mask = (rng.uniform(size=x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


def sgd_nesterov_step(params, grads, state, lr, momentum=0.9):
    """One Nesterov-momentum SGD update, in place on the parameter arrays.

    Per parameter: v <- momentum*v + g ; w <- w - lr*(g + momentum*v).
    `state` holds the velocity array for each parameter and is updated in place.
    """
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if not (len(params) == len(grads) == len(state)):
        raise ShapeError("params, grads and state must have equal length")
    for w, g, v in zip(params, grads, state):
        wd = w.data if isinstance(w, Tensor) else w
        if g.shape != wd.shape or v.shape != wd.shape:
            raise ShapeError(f"param/grad/state shapes disagree: {wd.shape}, {g.shape}, {v.shape}")
        v *= momentum
        v += g
        wd -= lr * (g + momentum * v)
    return params, state
