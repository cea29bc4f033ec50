"""Dense tensors with reverse-mode automatic differentiation on numpy.

The networks are built from the primitives here: a small autograd tape over
numpy arrays (f32 for training, f64 for verification), 2-D convolution and
its transpose, batch normalization, dropout driven by counter-based random
streams, and the Adam optimizer.  Forward ops are pure functions of their
inputs; the tape is confined to whichever thread built it.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Tensor extents incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""


_grad_enabled = True


class no_grad:
    """Context manager that suppresses tape construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float array, optionally recording ops for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        if data.dtype == np.float32 or data.dtype == np.float64:
            pass
        elif np.issubdtype(data.dtype, np.integer) or data.dtype == np.bool_:
            data = data.astype(np.float64)
        else:
            raise TypeError(f"unsupported element kind {data.dtype}; use f32 or f64")
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- tape -------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar; accumulates .grad on leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no graph attached")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node.grad = None  # intermediates are not kept

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = _coerce(other, self.dtype)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                _acc(self, _unbroadcast(g, self.data.shape))
            if other.requires_grad:
                _acc(other, _unbroadcast(g, other.data.shape))

        return _from_op(out_data, (self, other), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _coerce(other, self.dtype)
        out_data = self.data - other.data

        def bw(g):
            if self.requires_grad:
                _acc(self, _unbroadcast(g, self.data.shape))
            if other.requires_grad:
                _acc(other, _unbroadcast(-g, other.data.shape))

        return _from_op(out_data, (self, other), bw)

    def __rsub__(self, other):
        return _coerce(other, self.dtype) - self

    def __mul__(self, other):
        other = _coerce(other, self.dtype)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                _acc(self, _unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                _acc(other, _unbroadcast(g * self.data, other.data.shape))

        return _from_op(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _coerce(other, self.dtype)
        out_data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                _acc(self, _unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                _acc(other, _unbroadcast(-g * self.data / (other.data * other.data),
                                         other.data.shape))

        return _from_op(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return _coerce(other, self.dtype) / self

    def __neg__(self):
        def bw(g):
            if self.requires_grad:
                _acc(self, -g)

        return _from_op(-self.data, (self,), bw)

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** n

        def bw(g):
            if self.requires_grad:
                _acc(self, g * n * self.data ** (n - 1))

        return _from_op(out_data, (self,), bw)

    def __matmul__(self, other):
        other = _coerce(other, self.dtype)
        out_data = self.data @ other.data

        def bw(g):
            if self.requires_grad:
                _acc(self, _unbroadcast(g @ np.swapaxes(other.data, -1, -2),
                                        self.data.shape))
            if other.requires_grad:
                _acc(other, _unbroadcast(np.swapaxes(self.data, -1, -2) @ g,
                                         other.data.shape))

        return _from_op(out_data, (self, other), bw)

    # -- reductions and views ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if not self.requires_grad:
                return
            if axis is None:
                _acc(self, np.broadcast_to(g, self.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            _acc(self, np.broadcast_to(g, self.data.shape).copy())

        return _from_op(out_data, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in axes:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bw(g):
            if self.requires_grad:
                _acc(self, g.reshape(self.data.shape))

        return _from_op(out_data, (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)

        def bw(g):
            if self.requires_grad:
                _acc(self, g.transpose(inv))

        return _from_op(self.data.transpose(axes), (self,), bw)

    # -- elementwise -------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)

        def bw(g):
            if self.requires_grad:
                _acc(self, g * out_data)

        return _from_op(out_data, (self,), bw)

    def log(self):
        def bw(g):
            if self.requires_grad:
                _acc(self, g / self.data)

        return _from_op(np.log(self.data), (self,), bw)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bw(g):
            if self.requires_grad:
                _acc(self, g * (0.5 / out_data))

        return _from_op(out_data, (self,), bw)

    def abs(self):
        def bw(g):
            if self.requires_grad:
                _acc(self, g * np.sign(self.data))

        return _from_op(np.abs(self.data), (self,), bw)

    def clip(self, lo, hi):
        """Clamp values; gradient is 1 inside [lo, hi] and 0 outside."""
        out_data = np.clip(self.data, lo, hi)

        def bw(g):
            if self.requires_grad:
                inside = (self.data >= lo) & (self.data <= hi)
                _acc(self, g * inside.astype(g.dtype))

        return _from_op(out_data, (self,), bw)


def _coerce(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _acc(t, g):
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    # adjoint of numpy broadcasting: sum g down to `shape`
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _from_op(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _needs_grad(*parents):
    return _grad_enabled and any(p is not None and p.requires_grad for p in parents)


# -- activations -----------------------------------------------------------

ACTIVATION_KINDS = ("relu", "leaky_relu_0.2", "tanh", "sigmoid")


def activation(x, kind):
    """Elementwise nonlinearity; `kind` is one of ACTIVATION_KINDS."""
    if kind == "relu":
        out_data = np.maximum(x.data, 0)

        def bw(g):
            if x.requires_grad:
                _acc(x, g * (x.data > 0).astype(g.dtype))

    elif kind == "leaky_relu_0.2":
        out_data = np.where(x.data >= 0, x.data, x.data * x.dtype.type(0.2))

        def bw(g):
            if x.requires_grad:
                slope = np.where(x.data >= 0, g.dtype.type(1.0), g.dtype.type(0.2))
                _acc(x, g * slope)

    elif kind == "tanh":
        out_data = np.tanh(x.data)

        def bw(g):
            if x.requires_grad:
                _acc(x, g * (1.0 - out_data * out_data))

    elif kind == "sigmoid":
        out_data = _sigmoid(x.data)

        def bw(g):
            if x.requires_grad:
                _acc(x, g * out_data * (1.0 - out_data))

    else:
        raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATION_KINDS}")
    return _from_op(out_data, (x,), bw)


def _sigmoid(v):
    # stable in both tails
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softmax(x, axis=-1):
    """Softmax along `axis`, computed with max subtraction."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            _acc(x, s * (g - dot))

    return _from_op(s, (x,), bw)


# -- structural ops ----------------------------------------------------------


def concat(tensors, axis=1):
    """Concatenate along `axis`; backward splits the gradient."""
    tensors = tuple(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    return _from_op(out_data, tensors, bw)


def pad2d(x, pads):
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    top, bottom, left, right = pads
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    out_data = np.pad(x.data, widths)

    def bw(g):
        if x.requires_grad:
            sl = [slice(None)] * (x.ndim - 2)
            sl += [slice(top, g.shape[-2] - bottom), slice(left, g.shape[-1] - right)]
            _acc(x, g[tuple(sl)])

    return _from_op(out_data, (x,), bw)


# -- convolution -------------------------------------------------------------


def conv_out_size(extent, kernel, stride, pad, dilation=1):
    """Output extent of a cross-correlation along one axis."""
    span = dilation * (kernel - 1) + 1
    if extent + 2 * pad < span:
        raise ShapeError(
            f"input extent {extent} with pad {pad} is smaller than the "
            f"dilated kernel span {span}")
    return (extent + 2 * pad - span) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    # (N, C, Hp, Wp) -> (C*kh*kw, N*ho*wo)
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for p in range(kh):
        i0 = p * dilation
        for q in range(kw):
            j0 = q * dilation
            cols[:, p, q] = xp[:, :, i0:i0 + ho * stride:stride,
                               j0:j0 + wo * stride:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(cols, n, c, hp, wp, kh, kw, stride, dilation, ho, wo):
    # adjoint of _im2col: scatter-add columns back onto the padded raster
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    for p in range(kh):
        i0 = p * dilation
        for q in range(kw):
            j0 = q * dilation
            out[:, :, i0:i0 + ho * stride:stride,
                j0:j0 + wo * stride:stride] += cols[:, p, q].transpose(1, 0, 2, 3)
    return out


def conv2d(x, w, b=None, stride=1, pad=0, dilation=1):
    """Cross-correlation of x:[N,C,H,W] with w:[K,C,kh,kw] (no kernel flip)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(
            f"conv2d channel mismatch: input has shape {x.shape} (C={c}) but "
            f"weight has shape {w.shape} (expects C={cw})")
    ho = conv_out_size(h, kh, stride, pad, dilation)
    wo = conv_out_size(wd, kw, stride, pad, dilation)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output extent would be {ho}x{wo}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    y = (w.data.reshape(k, -1) @ cols).reshape(k, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        if b.shape != (k,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match {k} output channels")
        y = y + b.data.reshape(1, k, 1, 1)

    out = Tensor(np.ascontiguousarray(y))
    if _needs_grad(x, w, b):
        hp, wp = xp.shape[2], xp.shape[3]
        cols_saved = cols if w.requires_grad else None

        def bw(g):
            gm = g.transpose(1, 0, 2, 3).reshape(k, -1)
            if w.requires_grad:
                _acc(w, (gm @ cols_saved.T).reshape(w.shape))
            if b is not None and b.requires_grad:
                _acc(b, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dcols = w.data.reshape(k, -1).T @ gm
                dxp = _col2im(dcols, n, c, hp, wp, kh, kw, stride, dilation, ho, wo)
                _acc(x, dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp)

        out.requires_grad = True
        out._parents = tuple(t for t in (x, w, b) if t is not None)
        out._backward = bw
    return out


def conv_transpose2d(x, w, b=None, stride=1, pad=0):
    """Adjoint of conv2d with the same geometry; w is [Cin,Cout,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    cw, k, kh, kw = w.shape
    if c != cw:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input has shape {x.shape} (C={c}) "
            f"but weight has shape {w.shape} (expects C={cw})")
    h2 = (h - 1) * stride - 2 * pad + kh
    w2 = (wd - 1) * stride - 2 * pad + kw
    if h2 <= 0 or w2 <= 0:
        raise ShapeError(f"conv_transpose2d output extent would be {h2}x{w2}")
    x_mat = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * wd)
    dcols = w.data.reshape(c, -1).T @ x_mat
    yp = _col2im(dcols, n, k, h2 + 2 * pad, w2 + 2 * pad, kh, kw, stride, 1, h, wd)
    y = yp[:, :, pad:pad + h2, pad:pad + w2] if pad else yp
    if b is not None:
        if b.shape != (k,):
            raise ShapeError(f"conv_transpose2d bias shape {b.shape} does not match {k} output channels")
        y = y + b.data.reshape(1, k, 1, 1)

    out = Tensor(np.ascontiguousarray(y))
    if _needs_grad(x, w, b):
        x_saved = x_mat if w.requires_grad else None

        def bw(g):
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
            cols = _im2col(gp, kh, kw, stride, 1, h, wd)
            if x.requires_grad:
                dx = (w.data.reshape(c, -1) @ cols).reshape(c, n, h, wd)
                _acc(x, dx.transpose(1, 0, 2, 3))
            if w.requires_grad:
                _acc(w, (x_saved @ cols.T).reshape(w.shape))
            if b is not None and b.requires_grad:
                _acc(b, g.sum(axis=(0, 2, 3)))

        out.requires_grad = True
        out._parents = tuple(t for t in (x, w, b) if t is not None)
        out._backward = bw
    return out


# -- batch normalization -----------------------------------------------------


class BNState:
    """Running statistics for one batch_norm site."""

    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state, train):
    """Per-channel normalization over (N, H, W).

    Train mode normalizes with batch statistics and folds them into the
    running estimates; infer mode normalizes with the running estimates.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm channel mismatch: input has {c} channels, "
            f"gamma {gamma.shape}, beta {beta.shape}")
    eps = x.dtype.type(state.eps)
    if train:
        if n * h * w < 2:
            raise ShapeError("batch_norm train mode needs at least 2 values per channel")
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        m = state.momentum
        state.mean = ((1.0 - m) * state.mean + m * mu.data.reshape(c)).astype(state.mean.dtype)
        state.var = ((1.0 - m) * state.var + m * var.data.reshape(c)).astype(state.var.dtype)
        xn = xc / (var + eps).sqrt()
    else:
        mu = Tensor(state.mean.reshape(1, c, 1, 1).astype(x.dtype))
        inv = Tensor((1.0 / np.sqrt(state.var + eps)).reshape(1, c, 1, 1).astype(x.dtype))
        xn = (x - mu) * inv
    return xn * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


# -- dropout -----------------------------------------------------------------


def dropout(x, p, rng, active=True):
    """Zero elements with probability p and rescale survivors by 1/(1-p).

    The mask is drawn deterministically from `rng`; inactive mode is the
    identity and consumes no randomness.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not active or p == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(x.dtype)
    scale = x.dtype.type(1.0 / (1.0 - p))
    out_data = x.data * keep * scale

    def bw(g):
        if x.requires_grad:
            _acc(x, g * keep * scale)

    return _from_op(out_data, (x,), bw)


# -- deterministic random streams ---------------------------------------------


def _mix64(z):
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class RngStream:
    """Counter-based random stream: (seed, stream, counter) fixes every draw.

    Each draw call consumes one counter tick and seeds a fresh Philox block,
    so identical state always reproduces identical values and substreams
    derived with `substream` never overlap.
    """

    def __init__(self, seed, stream=0, counter=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self.counter = int(counter)

    def clone(self):
        return RngStream(self.seed, self.stream, self.counter)

    def substream(self, tag):
        return RngStream(self.seed, _mix64(self.stream * 0x9E3779B97F4A7C15 + tag + 1))

    def _draw(self):
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        ctr = np.array([0, self.counter & _MASK64, 0, 0], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(counter=ctr, key=key))
        self.counter += 1
        return gen

    def normal(self, shape, std=1.0, dtype=np.float32):
        vals = self._draw().standard_normal(shape) * std
        return vals.astype(dtype, copy=False)

    def uniform(self, shape, dtype=np.float64):
        return self._draw().random(shape).astype(dtype, copy=False)

    def integers(self, low, high, size=None):
        return self._draw().integers(low, high, size=size)

    def permutation(self, n):
        return self._draw().permutation(n)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a list of (name, Tensor) parameters."""

    def __init__(self, params, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
