"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Operations on tensors that require
gradients record a backward closure; :meth:`Tensor.backward` orders the
recorded graph topologically (the tape) and runs it once.  Tensors carry no
batch dimension; convolutions take ``[C, *spatial]`` inputs.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor", "tensor", "no_grad", "add", "sub", "mul", "relu", "sigmoid", "log",
    "square", "concat", "reshape", "gather_rows", "repeat_rows", "linear",
    "conv2d", "conv3d", "conv_transpose3d", "instance_norm", "bilinear_sample2d",
    "bce_mean", "sum", "mean",
]

_grad_enabled = True
# op name -> factor; test hook for the gradient checker
_grad_corruption: dict[str, float] = {}


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def corrupt_gradient(op: str, factor: float = 1.5):
    """Scale the input gradients produced by ``op``; used to prove the checker bites."""
    _grad_corruption[op] = factor
    try:
        yield
    finally:
        _grad_corruption.pop(op, None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    # --- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self.shape)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    # --- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    # --- autodiff -------------------------------------------------------
    def backward(self, grad=None):
        """Back-propagate from this tensor; the recorded tape is consumed."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = _topological(self)
        if any(node._consumed for node in tape):
            raise RuntimeError("the tape behind this tensor was already consumed by backward()")
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            factor = _grad_corruption.get(node._op)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if factor is not None:
                    pg = pg * factor
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in tape:
            if node._parents:
                node._consumed = True
                node._backward = None
                node._parents = ()


def _raise_not_scalar(shape):
    raise ValueError(f"item() on non-scalar tensor of shape {shape}")


def _topological(root):
    order = []
    seen = set()
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _pair(a, b):
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        return _as_tensor(a, b), b
    a = _as_tensor(a)
    return a, _as_tensor(b, a)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- pointwise -----------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def square(x):
    xd = x.data
    return _result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def log(x):
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sum(x):
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype, copy=True),), "sum")


def mean(x):
    shape = x.shape
    n = x.size
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g / n, dtype=g.dtype),), "mean")


# --- shape ---------------------------------------------------------------

def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x):
    return _result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def slice_(x, idx):
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[idx] = g
        return (out,)

    return _result(x.data[idx], (x,), back, "slice")


def concat(tensors, axis=0):
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def gather_rows(x, index):
    """``x[index]`` along axis 0 with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _result(x.data[index], (x,), back, "gather")


def repeat_rows(x, k):
    """Repeat every row of ``x`` ``k`` times consecutively."""
    shape = x.shape
    return _result(np.repeat(x.data, k, axis=0), (x,),
                   lambda g: (g.reshape((shape[0], k) + shape[1:]).sum(axis=1),), "repeat")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape [N, in] and weight [out, in]."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"linear: incompatible shapes {xd.shape} and {wd.shape}")
    out = xd @ wd.T
    parents = (x, weight)
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data
        parents = (x, weight, bias)

    def back(g):
        grads = (g @ wd, g.T @ xd)
        if bias is not None:
            grads = grads + (g.sum(axis=0),)
        return grads

    return _result(out, parents, back, "linear")


# --- convolutions ----------------------------------------------------------

def _out_extent(n, k, stride, padding):
    span = n + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {n + 2 * padding}")
    # a remainder may only drop trailing padding, never input samples
    if span % stride > padding:
        raise ValueError(
            f"non-integral output extent: ({n} + 2*{padding} - {k}) / {stride} drops input samples")
    return span // stride + 1


def _im2col(xp, k, stride, out):
    """[C, *padded] -> [C * k^d, prod(out)] patches (copy)."""
    c = xp.shape[0]
    d = len(out)
    st = xp.strides
    shape = (c,) + (k,) * d + tuple(out)
    strides = (st[0],) + tuple(st[1:]) + tuple(s * stride for s in st[1:])
    patches = np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)
    return patches.reshape(c * k ** d, -1)


def _col2im(cols, c, padded, k, stride, out):
    """Adjoint of :func:`_im2col`: scatter-add patches into a padded buffer."""
    d = len(out)
    res = np.zeros((c,) + tuple(padded), dtype=cols.dtype)
    cols = cols.reshape((c,) + (k,) * d + tuple(out))
    for offs in itertools.product(range(k), repeat=d):
        sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out))
        res[(slice(None),) + sl] += cols[(slice(None),) + offs]
    return res


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, [(0, 0)] + [(p, p)] * (x.ndim - 1))


def _unpad(x, p):
    if p == 0:
        return x
    return x[(slice(None),) + (slice(p, -p),) * (x.ndim - 1)]


def _convnd(x, weight, bias, stride, padding, d, op):
    xd, wd = x.data, weight.data
    if xd.ndim != d + 1 or wd.ndim != d + 2:
        raise ValueError(f"{op}: expected input rank {d + 1} and weight rank {d + 2}, "
                         f"got {xd.shape} and {wd.shape}")
    c_out, c_in, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if any(s != k for s in wd.shape[2:]) or k % 2 == 0:
        raise ValueError(f"{op}: kernel must be cubic with odd extent, got {wd.shape[2:]}")
    if xd.shape[0] != c_in:
        raise ValueError(f"{op}: input has {xd.shape[0]} channels, weight expects {c_in}")
    out = tuple(_out_extent(n, k, stride, padding) for n in xd.shape[1:])
    xp = _pad(xd, padding)
    cols = _im2col(xp, k, stride, out)
    wmat = wd.reshape(c_out, -1)
    y = (wmat @ cols).reshape((c_out,) + out)
    parents = (x, weight)
    if bias is not None:
        y = y + bias.data.reshape((c_out,) + (1,) * d)
        parents = (x, weight, bias)
    padded = xp.shape[1:]

    def back(g):
        g2 = g.reshape(c_out, -1)
        gx = _unpad(_col2im(wmat.T @ g2, c_in, padded, k, stride, out), padding) if x.requires_grad else None
        gw = (g2 @ cols.T).reshape(wd.shape)
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g2.sum(axis=1),)
        return grads

    return _result(y, parents, back, op)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``[C_in, H, W]`` with ``[C_out, C_in, k, k]``."""
    return _convnd(x, weight, bias, stride, padding, 2, "conv2d")


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``[C_in, D, H, W]`` with ``[C_out, C_in, k, k, k]``."""
    return _convnd(x, weight, bias, stride, padding, 3, "conv3d")


def conv_transpose3d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Adjoint of :func:`conv3d` sharing its weight layout.

    ``weight`` is ``[C_in, C_out, k, k, k]``: the weight of the conv3d mapping
    ``C_out -> C_in`` whose adjoint this is.  Output extent per axis is
    ``(n - 1) * stride - 2 * padding + k + output_padding``.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 5:
        raise ValueError(f"conv_transpose3d: bad ranks {xd.shape}, {wd.shape}")
    c_in, c_out, k = wd.shape[0], wd.shape[1], wd.shape[2]
    if xd.shape[0] != c_in:
        raise ValueError(f"conv_transpose3d: input has {xd.shape[0]} channels, weight expects {c_in}")
    if not 0 <= output_padding < stride:
        raise ValueError("conv_transpose3d: output_padding must be smaller than stride")
    spatial = xd.shape[1:]
    out = tuple((n - 1) * stride - 2 * padding + k + output_padding for n in spatial)
    if min(out) < 1:
        raise ValueError(f"conv_transpose3d: empty output extent {out}")
    padded = tuple(o + 2 * padding for o in out)
    wmat = wd.reshape(c_in, -1)
    x2 = xd.reshape(c_in, -1)
    # trailing rows a forward conv would never reach stay zero
    y = _unpad(_col2im(wmat.T @ x2, c_out, padded, k, stride, spatial), padding)
    y = np.ascontiguousarray(y)
    parents = (x, weight)
    if bias is not None:
        y = y + bias.data.reshape((c_out, 1, 1, 1))
        parents = (x, weight, bias)

    def back(g):
        cols = _im2col(_pad(g, padding), k, stride, spatial)
        gx = (wmat @ cols).reshape(xd.shape)
        gw = (x2 @ cols.T).reshape(wd.shape)
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.reshape(c_out, -1).sum(axis=1),)
        return grads

    return _result(y, parents, back, "conv_transpose3d")


# --- normalization -------------------------------------------------------

def instance_norm(x, gamma=None, beta=None, eps=1e-5):
    """Per-channel standardization over all spatial axes, then ``gamma * . + beta``."""
    xd = x.data
    if xd.ndim < 2 or xd[0].size == 0:
        raise ValueError(f"instance_norm: need at least one spatial element, got shape {xd.shape}")
    c = xd.shape[0]
    flat = xd.reshape(c, -1)
    n = flat.shape[1]
    mu = flat.mean(axis=1, keepdims=True)
    xc = flat - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    parents = [x]
    if gamma is not None:
        y = y * gamma.data.reshape(c, 1)
        parents.append(gamma)
    if beta is not None:
        y = y + beta.data.reshape(c, 1)
        parents.append(beta)
    y = y.reshape(xd.shape).astype(xd.dtype, copy=False)

    def back(g):
        g2 = g.reshape(c, -1)
        gh = g2 * gamma.data.reshape(c, 1) if gamma is not None else g2
        gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        grads = [gx.reshape(xd.shape)]
        if gamma is not None:
            grads.append((g2 * xhat).sum(axis=1))
        if beta is not None:
            grads.append(g2.sum(axis=1))
        return tuple(grads)

    return _result(y, tuple(parents), back, "instance_norm")


# --- sampling ------------------------------------------------------------

def bilinear_sample2d(fmap, coords):
    """Sample ``fmap`` [f, H, W] at pixel coordinates ``coords`` [P, 2] of (u, v).

    Integer coordinates address pixel centers; ``u`` indexes columns.  Samples
    outside ``[0, W-1] x [0, H-1]`` are zero vectors.  ``coords`` are constants.
    Returns [f, P].
    """
    fd = fmap.data
    f, h, w = fd.shape
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(coords)):
        raise ValueError("bilinear_sample2d: non-finite coordinates")
    u, v = coords[:, 0], coords[:, 1]
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    u0 = np.clip(np.floor(u), 0, w - 1).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, h - 1).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    a = np.where(inside, u - u0, 0.0).astype(fd.dtype)
    b = np.where(inside, v - v0, 0.0).astype(fd.dtype)
    m = inside.astype(fd.dtype)
    f00 = fd[:, v0, u0]
    f01 = fd[:, v0, u1]
    f10 = fd[:, v1, u0]
    f11 = fd[:, v1, u1]
    # lerp form is exact on constant maps
    top = f00 + a * (f01 - f00)
    bot = f10 + a * (f11 - f10)
    out = (top + b * (bot - top)) * m
    w00 = (1 - a) * (1 - b) * m
    w01 = a * (1 - b) * m
    w10 = (1 - a) * b * m
    w11 = a * b * m
    flat = (np.concatenate([v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1]))
    wts = np.concatenate([w00, w01, w10, w11])
    keep = wts != 0
    flat, wts = flat[keep], wts[keep]
    cols = np.tile(np.arange(len(u)), 4)[keep]

    def back(g):
        # g [f, P] -> [f, H*W]
        from scipy.sparse import csr_matrix

        s = csr_matrix((wts, (cols, flat)), shape=(len(u), h * w))
        return ((s.T @ g.T).T.reshape(f, h, w).astype(g.dtype, copy=False),)

    return _result(out.astype(fd.dtype, copy=False), (fmap,), back, "bilinear_sample2d")


# --- losses ----------------------------------------------------------------

BCE_CLAMP = 1e-7


def bce_mean(prob, target):
    """Per-element mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    pd = prob.data
    t = np.asarray(target, dtype=pd.dtype)
    if t.shape != pd.shape:
        raise ValueError(f"bce: shape mismatch {pd.shape} vs {t.shape}")
    lo, hi = BCE_CLAMP, 1.0 - BCE_CLAMP
    pc = np.clip(pd.astype(np.float64), lo, hi)
    n = pd.size
    val = -(t * np.log(pc) + (1 - t) * np.log(1 - pc)).mean()
    active = (pd > lo) & (pd < hi)

    def back(g):
        dp = -(t / pc - (1 - t) / (1 - pc)) / n
        return ((g * dp * active).astype(pd.dtype),)

    return _result(np.asarray(val, dtype=pd.dtype), (prob,), back, "bce")

