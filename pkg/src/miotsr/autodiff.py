"""Reverse-mode differentiation over dense NCHW arrays.

Only the operators the restoration network needs are provided: 2-D
convolution (1x1 and 3x3, stride 1, "same" zero padding), ReLU, channel
concatenation, elementwise add/mul, sum, sub-pixel shuffle and L1/L2 losses,
plus an Adam optimizer.

Tensors are (C, H, W) or (N, C, H, W). Training runs in float32; gradient
checks run the same code in float64.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

# per thread, so concurrent inference cannot switch recording off for a trainer
_mode = threading.local()


def _grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference) in the calling thread."""
    prev = _grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar. The graph is released afterwards.
        """
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {self.shape}")
        order = _topological(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
            # interior nodes do not keep their gradient or saved inputs
            node.grad = None
            node._backward = None
            node._parents = ()


def _topological(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _batched(x: np.ndarray) -> np.ndarray:
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x


# ---------------------------------------------------------------- elementwise


def add(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")
    return _result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def mul(x, y) -> Tensor:
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    xd, yd = x.data, y.data
    return _result(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype
    return _result(
        np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum"
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * (out > 0),), "relu")


def concat_channels(xs) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.data.ndim != len(ref) or x.shape[:-3] != ref[:-3] or x.shape[-2:] != ref[-2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {x.shape}")
    sizes = [x.shape[-3] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=-3))

    return _result(np.concatenate([x.data for x in xs], axis=-3), xs, backward, "concat")


def pixel_shuffle(x, r: int) -> Tensor:
    """Depth-to-space: (N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    x = as_tensor(x)
    d = x.data
    c = d.shape[-3]
    if c % (r * r):
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    lead = d.shape[:-3]
    h, w = d.shape[-2:]
    oc = c // (r * r)
    k = len(lead)
    # (oc, r_y, r_x, h, w) -> (oc, h, r_y, w, r_x)
    out = d.reshape(lead + (oc, r, r, h, w))
    out = out.transpose(tuple(range(k)) + tuple(k + i for i in (0, 3, 1, 4, 2)))
    out = out.reshape(lead + (oc, h * r, w * r))

    def backward(g):
        return (pixel_unshuffle(g, r),)

    return _result(np.ascontiguousarray(out), (x,), backward, "pixel_shuffle")


def pixel_unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle` on plain arrays."""
    lead = a.shape[:-3]
    oc, H, W = a.shape[-3:]
    h, w = H // r, W // r
    k = len(lead)
    # (oc, h, r_y, w, r_x) -> (oc, r_y, r_x, h, w)
    v = a.reshape(lead + (oc, h, r, w, r))
    v = v.transpose(tuple(range(k)) + tuple(k + i for i in (0, 2, 4, 1, 3)))
    return np.ascontiguousarray(v.reshape(lead + (oc * r * r, h, w)))


# ---------------------------------------------------------------- losses


def l1_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    dtype = pred.dtype

    def backward(g):
        return (np.sign(diff) * (g / n),)

    return _result(np.asarray(np.abs(diff).mean(), dtype=dtype), (pred,), backward, "l1")


def l2_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != t.shape:
        raise ValueError(f"l2_loss: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    dtype = pred.dtype
    return _result(
        np.asarray((diff * diff).mean(), dtype=dtype), (pred,), lambda g: (diff * (2 * g / n),), "l2"
    )


# ---------------------------------------------------------------- convolution
#
# 3x3 convolutions run on a "flat padded" layout: every channel is one row
# holding all N zero-bordered (H+2)x(W+2) images back to back, with a margin
# of W+3 zeros at each end. A tap at offset (dy, dx) is then a constant
# column shift, so the whole convolution is a single GEMM plus nine shifted
# row-block sums, with no im2col copy of the (usually wide) input.


class _Flat:
    def __init__(self, n, h, w):
        self.n, self.h, self.w = n, h, w
        self.hp, self.wp = h + 2, w + 2
        self.margin = self.wp + 1
        self.core = n * self.hp * self.wp
        self.total = self.core + 2 * self.margin
        self.offsets = [dy * self.wp + dx for dy in (-1, 0, 1) for dx in (-1, 0, 1)]

    def pack(self, x: np.ndarray) -> np.ndarray:
        buf = np.zeros((x.shape[1], self.total), dtype=x.dtype)
        core = buf[:, self.margin : self.margin + self.core].reshape(-1, self.n, self.hp, self.wp)
        core[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
        return buf

    def unpack(self, core: np.ndarray) -> np.ndarray:
        """(C, core) rows back to a contiguous (N, C, H, W) array."""
        v = core.reshape(-1, self.n, self.hp, self.wp)[:, :, 1:-1, 1:-1]
        return np.ascontiguousarray(v.transpose(1, 0, 2, 3))

    def shifted(self, buf: np.ndarray, k: int) -> np.ndarray:
        s = self.margin + self.offsets[k]
        return buf[:, s : s + self.core]

    def taps(self, buf: np.ndarray, sign: int = 1) -> np.ndarray:
        """Stack the nine shifted copies: (9*C, core), tap-major rows."""
        c = buf.shape[0]
        out = np.empty((9 * c, self.core), dtype=buf.dtype)
        for k, off in enumerate(self.offsets):
            s = self.margin + sign * off
            out[k * c : (k + 1) * c] = buf[:, s : s + self.core]
        return out


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    fl = _Flat(n, h, wd)
    xb = fl.pack(x)
    if cin < cout:
        # narrow input: stacking input taps is the cheaper GEMM
        cols = fl.taps(xb)
        wmat = w.transpose(0, 2, 3, 1).reshape(cout, 9 * cin)
        core = wmat @ cols
    else:
        wst = w.transpose(2, 3, 0, 1).reshape(9 * cout, cin)
        y = wst @ xb
        core = None
        for k in range(9):
            part = fl.shifted(y[k * cout : (k + 1) * cout], k)
            if core is None:
                core = part.copy()
            else:
                core += part
    out = fl.unpack(core)
    out += b.reshape(1, -1, 1, 1)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3))
        gflat = fl.pack(g)
        gcols = fl.taps(gflat, sign=-1)  # (9*cout, core): G shifted by -offset
        wcat = w.transpose(1, 2, 3, 0).reshape(cin, 9 * cout)
        gx = fl.unpack(wcat @ gcols)
        xcore = xb[:, fl.margin : fl.margin + fl.core]
        gw = (gcols @ xcore.T).reshape(3, 3, cout, cin).transpose(2, 3, 0, 1)
        return gx, np.ascontiguousarray(gw), gb

    return out, backward


def _conv1(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    w2 = w.reshape(cout, cin)
    out = np.matmul(w2, x.reshape(n, cin, h * wd))
    out += b.reshape(1, -1, 1)
    out = out.reshape(n, cout, h, wd)

    def backward(g):
        g3 = g.reshape(n, cout, h * wd)
        gb = g3.sum(axis=(0, 2))
        gx = np.matmul(w2.T, g3).reshape(x.shape)
        x3 = x.reshape(n, cin, h * wd)
        gw = np.einsum("nop,nip->oi", g3, x3, optimize=True).reshape(w.shape)
        return gx, gw, gb

    return out, backward


def conv2d(x, weight, bias) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding; kernel 1 or 3."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    xd = x.data
    squeeze = xd.ndim == 3
    xd = _batched(xd)
    wd, bd = weight.data, bias.data
    if wd.ndim != 4 or wd.shape[2] != wd.shape[3] or wd.shape[2] not in (1, 3):
        raise ValueError(f"conv2d: weight must be (out, in, k, k) with k in (1, 3), got {wd.shape}")
    if wd.shape[1] != xd.shape[1]:
        raise ValueError(f"conv2d: input has {xd.shape[1]} channels, weight expects {wd.shape[1]}")
    if bd.shape != (wd.shape[0],):
        raise ValueError(f"conv2d: bias shape {bd.shape} does not match {wd.shape[0]} outputs")
    kernel = _conv3 if wd.shape[2] == 3 else _conv1
    out, back = kernel(xd, wd, bd)
    if squeeze:
        out = out[0]

    def backward(g):
        gx, gw, gb = back(g[None] if squeeze else g)
        return (gx[0] if squeeze else gx), gw, gb

    return _result(out, (x, weight, bias), backward, "conv2d")


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam with bias correction; state is one (m, v) pair per parameter."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
