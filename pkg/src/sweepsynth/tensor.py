"""Dense (n, c, h, w) tensors with reverse-mode autodiff.

A Tensor wraps a contiguous numpy array (float32 by default, float64 for
gradient checking) plus an optional closure that propagates an incoming
gradient to its parents.  Ops never mutate their inputs; the tape is a
plain parent DAG walked once by ``backward``.
"""

import contextlib

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled():
    return _GRAD_ENABLED[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
        self.data = np.ascontiguousarray(arr).reshape(arr.shape)
        self.grad = None
        self.requires_grad = bool(requires_grad)
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

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed=None, free_graph=True):
        """Reverse accumulation from this tensor.

        ``seed`` defaults to ones (use a scalar tensor for losses).  The
        graph's closures are dropped afterwards unless ``free_graph`` is
        False.
        """
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
        if seed is None:
            seed = np.ones_like(self.data)
        self.accumulate_grad(seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free_graph:
                node._backward = None
                node._parents = ()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)


def _result(data, parents, backward_fn):
    req = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    if not isinstance(b, Tensor):  # tensor + scalar
        a = as_tensor(a)
        data = a.data + np.asarray(b, dtype=a.dtype)

        def bwd(g, a=a):
            a.accumulate_grad(g)

        return _result(data, (a,), bwd)
    _check_same_shape(a, b, "add")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape(a, b, "sub")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _result(a.data - b.data, (a, b), bwd)


def mul(a, b):
    if not isinstance(b, Tensor):  # tensor * scalar
        a = as_tensor(a)
        s = float(b)

        def bwd(g, a=a, s=s):
            a.accumulate_grad(g * s)

        return _result(a.data * np.asarray(s, dtype=a.dtype), (a,), bwd)
    _check_same_shape(a, b, "mul")

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result(a.data * b.data, (a, b), bwd)


def relu(x):
    def bwd(g, x=x):
        x.accumulate_grad(g * (x.data > 0))

    return _result(np.maximum(x.data, 0), (x,), bwd)


def sigmoid(x):
    y = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g, x=x, y=y):
        x.accumulate_grad(g * y * (1.0 - y))

    return _result(y, (x,), bwd)


def tanh(x):
    y = np.tanh(x.data)

    def bwd(g, x=x, y=y):
        x.accumulate_grad(g * (1.0 - y * y))

    return _result(y, (x,), bwd)


def concat_channels(xs):
    """Concatenate along the channel axis; n/h/w must match."""
    first = xs[0]
    for t in xs[1:]:
        if (
            t.shape[0] != first.shape[0]
            or t.shape[2:] != first.shape[2:]
            or t.data.ndim != 4
        ):
            raise ShapeMismatch(
                f"concat_channels: {t.shape} incompatible with {first.shape}"
            )
    data = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.shape[1] for t in xs]

    def bwd(g, xs=tuple(xs), sizes=tuple(sizes)):
        start = 0
        for t, c in zip(xs, sizes):
            if t.requires_grad:
                t.accumulate_grad(g[:, start : start + c])
            start += c

    return _result(data, tuple(xs), bwd)


def slice_channels(x, start, stop):
    def bwd(g, x=x, start=start, stop=stop):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        x.accumulate_grad(gx)

    return _result(x.data[:, start:stop].copy(), (x,), bwd)


def channel_interleave(a, b, ga, gb):
    """Merge ``a`` and ``b`` into groups of (ga + gb) channels: group j
    takes ga channels from ``a`` and gb channels from ``b``."""
    n, ca, h, w = a.shape
    if ca % ga or b.shape[1] % gb or ca // ga != b.shape[1] // gb:
        raise ShapeMismatch(
            f"channel_interleave: {a.shape} x{ga} vs {b.shape} x{gb}"
        )
    groups = ca // ga
    data = np.empty((n, groups * (ga + gb), h, w), dtype=a.dtype)
    va = data.reshape(n, groups, ga + gb, h, w)
    va[:, :, :ga] = a.data.reshape(n, groups, ga, h, w)
    va[:, :, ga:] = b.data.reshape(n, groups, gb, h, w)

    def bwd(g, a=a, b=b, ga=ga, gb=gb, groups=groups):
        gv = g.reshape(g.shape[0], groups, ga + gb, *g.shape[2:])
        if a.requires_grad:
            a.accumulate_grad(gv[:, :, :ga].reshape(a.shape))
        if b.requires_grad:
            b.accumulate_grad(gv[:, :, ga:].reshape(b.shape))

    return _result(data, (a, b), bwd)


def mean_(x):
    inv = 1.0 / x.size

    def bwd(g, x=x, inv=inv):
        x.accumulate_grad(np.full_like(x.data, float(g) * inv))

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), bwd)


def sum_(x):
    def bwd(g, x=x):
        x.accumulate_grad(np.full_like(x.data, float(g)))

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), bwd)


def mean_abs_diff(a, b):
    """Scalar mean |a - b| (the L1 reconstruction loss)."""
    _check_same_shape(a, b, "mean_abs_diff")
    diff = a.data - b.data
    val = np.asarray(np.abs(diff).mean(), dtype=a.dtype)

    def bwd(g, a=a, b=b, diff=diff):
        s = np.sign(diff) * (float(g) / diff.size)
        if a.requires_grad:
            a.accumulate_grad(s.astype(a.dtype))
        if b.requires_grad:
            b.accumulate_grad(-s.astype(b.dtype))

    return _result(val, (a, b), bwd)


def softmax_groups(x, group_size):
    """Channel-group softmax keeping the first channel of each group.

    Channels are split into consecutive groups of ``group_size``; a
    softmax is applied within each group independently at every pixel
    and only the first probability is returned, so the output has
    c / group_size channels.
    """
    n, c, h, w = x.shape
    if c % group_size:
        raise ShapeMismatch(f"softmax_groups: {c} channels not divisible by {group_size}")
    groups = c // group_size
    v = x.data.reshape(n, groups, group_size, h, w)
    m = v.max(axis=2, keepdims=True)
    e = np.exp(v - m)
    p = e / e.sum(axis=2, keepdims=True)
    out = p[:, :, 0].copy()

    def bwd(g, x=x, p=p):
        # d p0 / d x_m = p0 * (delta_{m,0} - p_m)
        gp = g[:, :, None] * p[:, :, :1]
        gx = gp * (-p)
        gx[:, :, 0] += gp[:, :, 0]
        x.accumulate_grad(gx.reshape(x.shape))

    return _result(out, (x,), bwd)


def assert_finite(x, what="tensor"):
    arr = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")
