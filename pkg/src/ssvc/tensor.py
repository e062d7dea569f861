"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the primitives needed by the conversion networks and the training
objectives are provided.  Every op records a closure that maps the output
gradient onto its parents; :meth:`Tensor.backward` walks the graph in reverse
topological order.

Gradient semantics: ``backward`` *overwrites* ``.grad`` on every reachable
tensor that requires a gradient (it never accumulates across calls).  The
trainer additionally zeroes gradients at the start of each optimizer step.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradCheckError",
    "as_tensor",
    "no_grad",
    "stop_gradient",
    "concat",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "relu",
    "glu",
    "clip",
    "matmul",
    "logsumexp",
    "l2_normalize",
    "conv2d",
    "conv_transpose2d",
    "grad_check",
]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (per thread / context)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense real array with an optional gradient tape entry."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_reach", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._reach = self.requires_grad
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        enabled = _grad_enabled.get()
        track = enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        # a node behind stop_gradient keeps its parents (without a backward rule)
        # so the leaves it hides still receive an explicit zero gradient
        out._reach = track or (enabled and any(p._reach for p in parents))
        out._parents = parents if out._reach else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ---------------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.get(id(node))
            if node.requires_grad:
                node.grad = g if g is not None else np.zeros_like(node.data)
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # leaves cut off by stop_gradient still get an explicit zero
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)

    # -- elementwise arithmetic -----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        a, b = self.shape, other.shape
        return Tensor._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        return Tensor._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other, self.dtype)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other, self.dtype) / self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, power: float) -> "Tensor":
        if isinstance(power, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._make(x**power, (self,), lambda g: (g * power * x ** (power - 1),))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def __getitem__(self, index) -> "Tensor":
        if isinstance(index, Tensor):
            index = index.data
        shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward)

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def std(self, axis=None, keepdims: bool = False) -> "Tensor":
        """Population standard deviation (divides by n).

        The gradient at a zero-spread slice is defined as zero.
        """
        x = self.data
        n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        centred = x - x.mean(axis=axis, keepdims=True)
        sd_keep = np.sqrt((centred**2).mean(axis=axis, keepdims=True))
        out = sd_keep if keepdims else (sd_keep.reshape(()) if axis is None else np.squeeze(sd_keep, axis=axis))

        def backward(g):
            if not keepdims:
                g = g.reshape(sd_keep.shape)
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(sd_keep > 0, g / (n * sd_keep), 0.0)
            return (centred * scale,)

        return Tensor._make(np.asarray(out), (self,), backward)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else np.float64))


def stop_gradient(t: Tensor) -> Tensor:
    """Identity in the forward pass; contributes exactly zero gradient backward.

    The input stays reachable in the graph so that leaves behind it end up
    with an explicit all-zero gradient instead of ``None``.
    """
    out = Tensor.__new__(Tensor)
    out.data = t.data
    out.grad = None
    out.name = None
    out.requires_grad = False
    out._reach = _grad_enabled.get() and (t.requires_grad or t._reach)
    out._parents = (t,) if out._reach else ()
    out._backward = lambda g: (None,)
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def exp(t: Tensor) -> Tensor:
    out = np.exp(t.data)
    return Tensor._make(out, (t,), lambda g: (g * out,))


def log(t: Tensor) -> Tensor:
    x = t.data
    return Tensor._make(np.log(x), (t,), lambda g: (g / x,))


def sqrt(t: Tensor) -> Tensor:
    out = np.sqrt(t.data)
    return Tensor._make(out, (t,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(t: Tensor) -> Tensor:
    out = _sigmoid(t.data)
    return Tensor._make(out, (t,), lambda g: (g * out * (1.0 - out),))


def relu(t: Tensor) -> Tensor:
    mask = t.data > 0
    return Tensor._make(t.data * mask, (t,), lambda g: (g * mask,))


def glu(t: Tensor, axis: int = 1) -> Tensor:
    """Gated linear unit: first half of ``axis`` times sigmoid of the second half."""
    n = t.shape[axis]
    if n % 2:
        raise ValueError(f"gated activation needs an even extent on axis {axis}, got {n}")
    a, b = np.split(t.data, 2, axis=axis)
    gate = _sigmoid(b)

    def backward(g):
        return (np.concatenate([g * gate, g * a * gate * (1.0 - gate)], axis=axis),)

    return Tensor._make(a * gate, (t,), backward)


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    x = t.data
    inside = (x >= lo) & (x <= hi)
    return Tensor._make(np.clip(x, lo, hi), (t,), lambda g: (g * inside,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = a.data, b.data
    if x.ndim < 2 or y.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(x @ y, (a, b), backward)


def logsumexp(t: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = t.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    soft = e / s

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor._make(out, (t,), backward)


def l2_normalize(t: Tensor, axis: int = -1, eps: float = 0.0) -> Tensor:
    """``t / ||t||`` along ``axis``; ``eps`` is added to the norm when nonzero."""
    x = t.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True)) + eps
    out = x / norm

    def backward(g):
        # d(x/|x|) = (g - u (u.g)) / |x| with u = x/|x|; eps keeps the same form
        dot = (g * out).sum(axis=axis, keepdims=True)
        raw = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(raw > 0, raw / norm, 0.0)
        return ((g - out * dot * corr) / norm,)

    return Tensor._make(out, (t,), backward)


# -- convolutions -------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over ``(N, C, H, W)`` with explicit zero padding.

    ``w`` has shape ``(O, C, kh, kw)``; ``b`` has shape ``(O,)``.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xd, wd = x.data, w.data
    n, c, h, wid = xd.shape
    o, c2, kh, kw = wd.shape
    if c != c2:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {c2}")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d kernel larger than padded input")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    # (N, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    wmat = wd.reshape(o, -1)
    out = (cols @ wmat.T).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (N, Ho, Wo, O)
        gw = gx = None
        if w.requires_grad:
            gw = (gt.reshape(-1, o).T @ cols.reshape(-1, c * kh * kw)).reshape(wd.shape)
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, hp, wp), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + h, pw : pw + wid]
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return Tensor._make(out, parents, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Transposed convolution (gradient of :func:`conv2d` w.r.t. its input).

    ``w`` has shape ``(C_in, C_out, kh, kw)``; output extent is
    ``(H - 1) * stride - 2 * padding + k``.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    xd, wd = x.data, w.data
    n, c, h, wid = xd.shape
    c2, o, kh, kw = wd.shape
    if c != c2:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {c}, kernel expects {c2}")
    hf = (h - 1) * sh + kh
    wf = (wid - 1) * sw + kw
    ho, wo = hf - 2 * ph, wf - 2 * pw
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d padding removes the whole output")
    xt = xd.transpose(0, 2, 3, 1)  # (N, H, W, C)
    # (N, H, W, O, kh, kw)
    contrib = (xt.reshape(-1, c) @ wd.reshape(c, -1)).reshape(n, h, wid, o, kh, kw)
    full = np.zeros((n, o, hf, wf), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + sh * h : sh, j : j + sw * wid : sw] += contrib[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, ph : ph + ho, pw : pw + wo]
    if b is not None:
        out = out + b.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gfull = np.zeros((n, o, hf, wf), dtype=g.dtype)
        gfull[:, :, ph : ph + ho, pw : pw + wo] = g
        win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :h, :wid]
        # (N, H, W, O*kh*kw)
        gcols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * wid, o * kh * kw)
        gx = gw = None
        if x.requires_grad:
            gx = (gcols @ wd.reshape(c, -1).T).reshape(n, h, wid, c).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (xt.reshape(-1, c).T @ gcols).reshape(wd.shape)
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return Tensor._make(out, parents, backward)


# -- finite-difference checking ---------------------------------------------------------


class GradCheckError(ArithmeticError):
    """Raised when the checked function is not finite at the probe point."""


def grad_check(
    f: Callable[[Tensor], Tensor],
    x0: Tensor,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` is called with ``x0`` itself, whose ``data`` is perturbed in place
    (and restored), so ``x0`` may be a parameter captured elsewhere in the
    graph.  ``indices`` restricts the check to a subset of flat positions.
    Error per element is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x0.data.flags.c_contiguous:
        x0.data = np.ascontiguousarray(x0.data)
    was = x0.requires_grad
    x0.requires_grad = True
    x0.grad = None  # an unreachable x0 must not report a stale gradient
    try:
        y = f(x0)
        if y.data.size != 1:
            raise ValueError("grad_check needs a scalar-valued function")
        if not np.all(np.isfinite(y.data)):
            raise GradCheckError(f"function is not finite at the probe point: {y.data!r}")
        y.backward()
        analytic = (x0.grad if x0.grad is not None else np.zeros_like(x0.data)).reshape(-1).copy()
        flat = x0.data.reshape(-1)
        idx = range(flat.size) if indices is None else indices
        worst = 0.0
        with no_grad():
            for k in idx:
                orig = flat[k]
                flat[k] = orig + eps
                hi = float(f(x0).data)
                flat[k] = orig - eps
                lo = float(f(x0).data)
                flat[k] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise GradCheckError(f"function left the finite domain when probing element {k}")
                numeric = (hi - lo) / (2 * eps)
                err = abs(analytic[k] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        x0.requires_grad = was
