"""Minimal N-dimensional tensor engine with reverse-mode autodiff.

Every value is a float64 numpy array wrapped in a :class:`Tensor`.  Each
primitive op records its parents and a backward closure on the output node,
so the computation graph is rebuilt on every forward pass and consumed by a
single call to :func:`backward`.  Gradients accumulate additively across
fan-out.  A graph and its tensors belong to one thread; distinct graphs may
run concurrently.

Design constraints baked in here:
  * float64 everywhere (finite-difference gradient checks need it),
  * log is floored at ``LOG_EPS`` instead of raising on zero,
  * no in-place mutation of graph-registered tensors between forward and
    backward.
"""

import threading

import numpy as np

from . import special

LOG_EPS = 1e-12

# Workspace reuse for convolution buffers: fresh large allocations fault in
# pages every call, which costs more than the arithmetic.  Pool is
# thread-local so concurrent graphs on separate threads stay independent.
_workspace = threading.local()


def _pool_take(shape):
    pool = getattr(_workspace, "pool", None)
    if pool is None:
        pool = _workspace.pool = {}
    lst = pool.get(shape)
    if lst:
        return lst.pop()
    return np.empty(shape)


def _pool_give(arr):
    pool = getattr(_workspace, "pool", None)
    if pool is None:
        pool = _workspace.pool = {}
    lst = pool.setdefault(arr.shape, [])
    if len(lst) < 4:
        lst.append(arr)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's rule."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericalError(RuntimeError):
    """Raised when a training-critical quantity becomes non-finite."""


class Tensor:
    """A float64 array plus optional gradient buffer in an autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = None
        self._spent = False

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
    def node_id(self):
        return id(self)

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item", self.shape, (), detail="tensor is not size-1")
        return self.data.item()

    def detach(self):
        """A leaf view of the same values, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def max(self, axes=None, keepdims=False):
        return reduce_max(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)  # copy; g may be a view or reused buffer
    else:
        t.grad += g


def _result(data, op, parents, backward):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op, parents=parents)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --------------------------------------------------------------------------
# elementwise arithmetic
# --------------------------------------------------------------------------

def add(a, b):
    _check_broadcast("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b):
    _check_broadcast("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, "sub", (a, b), bw)


def neg(a):
    def bw(g):
        _accumulate(a, -g)

    return _result(-a.data, "neg", (a,), bw)


def mul(a, b):
    _check_broadcast("mul", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, "mul", (a, b), bw)


def div(a, b):
    _check_broadcast("div", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, "div", (a, b), bw)


def pow_const(a, p):
    """a ** p for a constant exponent p >= 0 (a >= 0 when p is fractional)."""
    p = float(p)
    data = a.data ** p

    def bw(g):
        if p == 0.0:
            _accumulate(a, np.zeros_like(a.data))
        else:
            _accumulate(a, g * p * a.data ** (p - 1.0))

    return _result(data, "pow_const", (a,), bw)


# --------------------------------------------------------------------------
# nonlinearities
# --------------------------------------------------------------------------

def sigmoid(a):
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)

    def bw(g):
        _accumulate(a, g * s * (1.0 - s))

    return _result(s, "sigmoid", (a,), bw)


def relu(a):
    def bw(g):
        _accumulate(a, g * (a.data > 0))

    return _result(np.maximum(a.data, 0.0), "relu", (a,), bw)


def softplus(a):
    x = a.data
    # log(1 + e^x) computed without overflow for large |x|
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        _accumulate(a, g * s)

    return _result(data, "softplus", (a,), bw)


def exp(a):
    data = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * data)

    return _result(data, "exp", (a,), bw)


def log(a):
    """Natural log with the argument floored at LOG_EPS.

    The floored region has zero gradient, matching the true derivative of
    log(max(x, eps)) away from the kink.
    """
    x = np.maximum(a.data, LOG_EPS)

    def bw(g):
        _accumulate(a, g * (a.data > LOG_EPS) / x)

    return _result(np.log(x), "log", (a,), bw)


def lgamma(a):
    def bw(g):
        _accumulate(a, g * special.digamma(a.data))

    return _result(special.lgamma(a.data), "lgamma", (a,), bw)


def digamma(a):
    def bw(g):
        _accumulate(a, g * special.trigamma(a.data))

    return _result(special.digamma(a.data), "digamma", (a,), bw)


# --------------------------------------------------------------------------
# shape manipulation
# --------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    if np.prod(shape, dtype=int) != a.size and -1 not in shape:
        raise ShapeError("reshape", a.shape, shape)

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), "reshape", (a,), bw)


def transpose(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes, detail="axes must permute all dims")
    inv = np.argsort(axes)

    def bw(g):
        _accumulate(a, g.transpose(inv))

    return _result(a.data.transpose(axes), "transpose", (a,), bw)


def broadcast_to(a, shape):
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))

    return _result(data.copy(), "broadcast", (a,), bw)


def concat(tensors, axis):
    tensors = tuple(tensors)
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError("concat", tensors[0].shape, t.shape, detail=f"axis={axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def index(a, key):
    """Basic (slice/int) indexing; gradient scatters back into place."""
    data = a.data[key]

    def bw(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        _accumulate(a, buf)

    return _result(data, "index", (a,), bw)


# --------------------------------------------------------------------------
# reductions and poolings over axis subsets
# --------------------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def reduce_sum(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(data, "reduce_sum", (a,), bw)


def reduce_mean(a, axes=None, keepdims=False):
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _result(data, "reduce_mean", (a,), bw)


def reduce_max(a, axes=None, keepdims=False):
    """Max-pool over an axis subset; gradient routes to the first maximum."""
    axes = _norm_axes(axes, a.ndim)
    kept = tuple(i for i in range(a.ndim) if i not in axes)
    perm = kept + axes
    moved = a.data.transpose(perm)
    lead = moved.shape[: len(kept)]
    flat = moved.reshape(int(np.prod(lead, dtype=int)), -1)
    arg = flat.argmax(axis=1)
    vals = flat[np.arange(flat.shape[0]), arg]
    out_shape = lead
    if keepdims:
        full = [1] * a.ndim
        for i, ax in enumerate(kept):
            full[ax] = a.shape[ax]
        out_shape = tuple(full)
    data = vals.reshape(out_shape)

    def bw(g):
        buf = np.zeros_like(flat)
        buf[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        buf = buf.reshape(moved.shape).transpose(np.argsort(perm))
        _accumulate(a, buf)

    return _result(data, "reduce_max", (a,), bw)


# avg-pool over an axis subset is reduce_mean; exported under both names
avg_pool = reduce_mean
max_pool = reduce_max


# --------------------------------------------------------------------------
# linear algebra and convolution
# --------------------------------------------------------------------------

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, "matmul", (a, b), bw)


def _im2col(x, kh, kw, pad):
    """Shifted-slice column buffer (n, ci, kh*kw, ho, wo), pool-backed."""
    n, ci, h, wd = x.shape
    if pad:
        xp = _pool_take((n, ci, h + 2 * pad, wd + 2 * pad))
        xp.fill(0.0)
        xp[:, :, pad:pad + h, pad:pad + wd] = x
        x = xp
    else:
        xp = None
    ho, wo = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    cols = _pool_take((n, ci, kh * kw, ho, wo))
    k = 0
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, k] = x[:, :, di:di + ho, dj:dj + wo]
            k += 1
    if xp is not None:
        _pool_give(xp)
    return cols, ho, wo


def _corr2d(x, w, pad):
    """Raw cross-correlation, stride 1.  x: (n,ci,h,w), w: (co,ci,kh,kw).

    Returns (out, cols); the caller owns cols and should hand it back to
    the pool when done.
    """
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, pad)
    out = np.matmul(w.reshape(co, ci * kh * kw), cols.reshape(n, ci * kh * kw, ho * wo))
    return out.reshape(n, co, ho, wo), cols


def conv2d(x, w, b=None, padding=None):
    """Per-slice 2D convolution (cross-correlation), stride 1.

    x: (n, c_in, h, w) with n the slice/batch axis; w: (c_out, c_in, kh, kw);
    b: optional (c_out,).  ``padding`` defaults to symmetric zero padding
    (kh - 1) // 2, preserving spatial size for odd kernels.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape, detail="want (n,ci,h,w) and (co,ci,kh,kw)")
    co, ci, kh, kw = w.shape
    pad = (kh - 1) // 2 if padding is None else int(padding)
    data, cols = _corr2d(x.data, w.data, pad)
    if b is not None:
        if b.shape != (co,):
            raise ShapeError("conv2d", b.shape, (co,), detail="bias")
        data = data + b.data.reshape(1, co, 1, 1)

    n = x.shape[0]
    ho, wo = data.shape[2], data.shape[3]

    def bw(g):
        g2 = g.reshape(n, co, ho * wo)
        cols2 = cols.reshape(n, ci * kh * kw, ho * wo)
        # dW: contract batch and pixels; BLAS handles the transposed view
        dw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
        _pool_give(cols)
        _accumulate(w, dw.reshape(w.shape))
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (ci,co,kh,kw)
            gx, gcols = _corr2d(np.ascontiguousarray(g), wf, kh - 1 - pad)
            _pool_give(gcols)
            _accumulate(x, gx)

    parents = (x, w) if b is None else (x, w, b)
    return _result(data, "conv2d", parents, bw)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------

def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate gradients of every requires-grad tensor reachable from loss.

    The loss must be scalar.  The graph is single-use: running backward a
    second time without rebuilding the forward pass raises.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, (), detail="loss must be scalar")
    order = _toposort(loss)
    for node in order:
        if node._parents and node._spent:
            raise RuntimeError("backward already run on this graph; rebuild the forward pass")
    for node in order:
        if node._parents:
            node._spent = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

class Adam:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient; run backward first")
            g = p.grad
            decay = self.lr * self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - decay - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        zero_grads(self.params.values())

    def state_arrays(self):
        """Moment buffers and step count as named arrays, for checkpoints."""
        out = {}
        for name in self.params:
            out[f"opt.m/{name}"] = self.m[name]
            out[f"opt.v/{name}"] = self.v[name]
        out["opt.t"] = np.array(float(self.t))
        return out

    def load_state_arrays(self, arrays):
        for name in self.params:
            self.m[name] = np.array(arrays[f"opt.m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"opt.v/{name}"], dtype=np.float64)
        self.t = int(arrays["opt.t"])
