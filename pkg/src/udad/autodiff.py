"""Minimal reverse-mode differentiation over numpy arrays.

Values are stored in the dtype handed in (float32 for networks); reductions
and convolution contractions accumulate in float64 before rounding back.
Every op output is checked for NaN/inf so divergence surfaces immediately.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError, ShapeError

CHECK_FINITE = True


def _check(arr, op: str):
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents
        )
        self._parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __truediv__(self, s):
        return scale(self, 1.0 / float(s))

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True, dtype=np.float64)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data
    _check(out_data, "add")

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward, op="add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data
    _check(out_data, "mul")

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward, op="mul")


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    out_data = a.data * s
    _check(out_data, "scale")

    def backward(g):
        a._accumulate(g * s)

    return Tensor(out_data, parents=(a,), backward=backward, op="scale")


def square(a) -> Tensor:
    a = as_tensor(a)
    out_data = a.data * a.data
    _check(out_data, "square")

    def backward(g):
        a._accumulate(g * (2.0 * a.data))

    return Tensor(out_data, parents=(a,), backward=backward, op="square")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return Tensor(out_data, parents=(a,), backward=backward, op="abs")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    _check(out_data, "sqrt")

    def backward(g):
        # denominator floor keeps an exact-zero RMS from poisoning the graph
        a._accumulate(g * (0.5 / np.maximum(out_data, 1e-12)))

    return Tensor(out_data, parents=(a,), backward=backward, op="sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces via the finite check
        out_data = np.exp(a.data)
    _check(out_data, "exp")

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor(out_data, parents=(a,), backward=backward, op="exp")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    xd = a.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out_data[~pos] = e / (1.0 + e)
    _check(out_data, "sigmoid")

    def backward(g):
        a._accumulate(g * (out_data * (1.0 - out_data)))

    return Tensor(out_data, parents=(a,), backward=backward, op="sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return Tensor(out_data, parents=(a,), backward=backward, op="relu")


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype)
    _check(out_data, "sum")

    def backward(g):
        a._accumulate(np.full(a.shape, float(g), dtype=a.data.dtype))

    return Tensor(out_data, parents=(a,), backward=backward, op="sum")


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out_data = np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype)
    _check(out_data, "mean")

    def backward(g):
        a._accumulate(np.full(a.shape, float(g) / n, dtype=a.data.dtype))

    return Tensor(out_data, parents=(a,), backward=backward, op="mean")


def slice_channels(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[:, start:stop]

    def backward(g):
        full = np.zeros(a.shape, dtype=a.data.dtype)
        full[:, start:stop] = g
        a._accumulate(full)

    return Tensor(out_data, parents=(a,), backward=backward, op="slice_ch")


def concat_ch(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ShapeError(f"concat shapes disagree: {a.shape} vs {b.shape}")
    ca = a.data.shape[1]
    out_data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        a._accumulate(g[:, :ca])
        b._accumulate(g[:, ca:])

    return Tensor(out_data, parents=(a, b), backward=backward, op="concat")


def conv3d(x, w, b=None, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of (N,Cin,W,H,D) with (Cout,Cin,k,k,k), zero padded."""
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    xd, wd = x.data, w.data
    if xd.ndim != 5 or wd.ndim != 5:
        raise ShapeError("conv3d wants 5D input and kernel")
    n, cin, wi, hi, di = xd.shape
    cout, cin2, k, k2, k3 = wd.shape
    if cin != cin2 or k != k2 or k != k3:
        raise ShapeError(
            f"kernel {wd.shape} incompatible with input channels {cin}"
        )
    p = padding
    wo = (wi + 2 * p - k) // stride + 1
    ho = (hi + 2 * p - k) // stride + 1
    do = (di + 2 * p - k) // stride + 1
    if wo < 1 or ho < 1 or do < 1:
        raise ShapeError(f"conv output collapsed for input {xd.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else xd
    xp64 = xp.astype(np.float64)
    w64 = wd.astype(np.float64)

    def offsets():
        for oi in range(k):
            for oj in range(k):
                for ok in range(k):
                    yield oi, oj, ok, (
                        slice(oi, oi + stride * (wo - 1) + 1, stride),
                        slice(oj, oj + stride * (ho - 1) + 1, stride),
                        slice(ok, ok + stride * (do - 1) + 1, stride),
                    )

    acc = np.zeros((n, cout, wo, ho, do), dtype=np.float64)
    for oi, oj, ok, sl in offsets():
        acc += np.einsum(
            "oc,ncwhd->nowhd", w64[:, :, oi, oj, ok], xp64[:, :, sl[0], sl[1], sl[2]]
        )
    if b is not None:
        acc += b.data.astype(np.float64).reshape(1, cout, 1, 1, 1)
    out_data = acc.astype(xd.dtype, copy=False)
    _check(out_data, "conv3d")

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g64 = g.astype(np.float64)
        if w.requires_grad:
            dw = np.empty_like(w64)
            for oi, oj, ok, sl in offsets():
                dw[:, :, oi, oj, ok] = np.einsum(
                    "nowhd,ncwhd->oc", g64, xp64[:, :, sl[0], sl[1], sl[2]]
                )
            w._accumulate(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp64)
            for oi, oj, ok, sl in offsets():
                dxp[:, :, sl[0], sl[1], sl[2]] += np.einsum(
                    "oc,nowhd->ncwhd", w64[:, :, oi, oj, ok], g64
                )
            dx = dxp[:, :, p : p + wi, p : p + hi, p : p + di] if p else dxp
            x._accumulate(dx)
        if b is not None and b.requires_grad:
            b._accumulate(g64.sum(axis=(0, 2, 3, 4)))

    return Tensor(out_data, parents=parents, backward=backward, op="conv3d")


def upsample2(x) -> Tensor:
    """Nearest-neighbor doubling of the three spatial axes."""
    x = as_tensor(x)
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    def backward(g):
        n, c, w2, h2, d2 = g.shape
        blocks = g.reshape(n, c, w2 // 2, 2, h2 // 2, 2, d2 // 2, 2)
        x._accumulate(
            blocks.sum(axis=(3, 5, 7), dtype=np.float64).astype(x.data.dtype)
        )

    return Tensor(out_data, parents=(x,), backward=backward, op="upsample2")


def global_avg_pool(x) -> Tensor:
    """(N,C,W,H,D) -> (N,C) spatial mean."""
    x = as_tensor(x)
    n, c = x.data.shape[:2]
    vol = int(np.prod(x.data.shape[2:]))
    out_data = (
        x.data.sum(axis=(2, 3, 4), dtype=np.float64) / vol
    ).astype(x.data.dtype)
    _check(out_data, "gap")

    def backward(g):
        x._accumulate(
            np.broadcast_to(
                (g / vol)[:, :, None, None, None], x.data.shape
            ).astype(x.data.dtype)
        )

    return Tensor(out_data, parents=(x,), backward=backward, op="gap")


def linear(x, w, b) -> Tensor:
    """(N,Cin) x (Cout,Cin) + (Cout,) -> (N,Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    x64 = x.data.astype(np.float64)
    w64 = w.data.astype(np.float64)
    acc = x64 @ w64.T
    if b is not None:
        acc = acc + b.data.astype(np.float64)
    out_data = acc.astype(x.data.dtype, copy=False)
    _check(out_data, "linear")

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g64 = g.astype(np.float64)
        if x.requires_grad:
            x._accumulate(g64 @ w64)
        if w.requires_grad:
            w._accumulate(g64.T @ x64)
        if b is not None and b.requires_grad:
            b._accumulate(g64.sum(axis=0))

    return Tensor(out_data, parents=parents, backward=backward, op="linear")


def gradcheck(fn, *arrays, h: float = 1e-3) -> float:
    """Max relative error of reverse-mode grads vs central differences.

    fn maps positional Tensors to a scalar Tensor. Runs on float64 copies;
    magnitudes below 1e-2 are compared absolutely at the same tolerance.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    if out.data.shape != ():
        raise ShapeError("gradcheck needs a scalar-valued function")
    out.backward()

    def value(vals) -> float:
        return float(fn(*[Tensor(v) for v in vals]).data)

    worst = 0.0
    for idx, a in enumerate(arrays):
        grad = ts[idx].grad
        if grad is None:
            grad = np.zeros_like(a)
        for i in range(a.size):
            bumped = [v.copy() for v in arrays]
            bumped[idx].flat[i] += h
            f1 = value(bumped)
            bumped[idx].flat[i] -= 2 * h
            f2 = value(bumped)
            fd = (f1 - f2) / (2 * h)
            g = float(grad.flat[i])
            rel = abs(fd - g) / max(abs(fd), abs(g), 1e-2)
            worst = max(worst, rel)
    return worst
