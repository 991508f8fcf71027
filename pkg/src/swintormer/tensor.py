"""Dense float64 tensors with a small, fixed set of reverse-mode differentiable ops.

Layout is row-major, channels-last (``H x W x C`` or ``B x H x W x C``).  There is
no general broadcasting: every op documents exactly which shapes it accepts.
Ops never mutate their inputs and refuse to produce NaN/Inf.

The graph is recorded implicitly: an op output keeps references to its parents
and a closure mapping the upstream gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "count_macs",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "conv1x1",
    "dwconv3x3",
    "softmax",
    "layernorm",
    "l2_normalize",
    "concat",
    "split",
    "reshape",
    "transpose",
    "gelu",
    "bias_add",
    "scale_axis",
    "take",
    "pad2d",
    "crop2d",
    "pixel_unshuffle",
    "pixel_shuffle",
    "abs_",
    "square",
    "mean",
    "sum_",
    "sinusoidal_embed",
    "gradcheck",
    "GradcheckReport",
]


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf from finite inputs."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MacCounter:
    def __init__(self):
        self.macs = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.macs += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of matmul/dwconv3x3 executed in this thread."""
    counter = MacCounter()
    prev = getattr(_state, "counter", None)
    _state.counter = counter
    try:
        yield counter
    finally:
        _state.counter = prev


def _tally(op: str, n: int) -> None:
    counter = getattr(_state, "counter", None)
    if counter is not None:
        counter.add(op, int(n))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"at most 4 axes supported, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("op produced a non-finite value")
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Register an op defined outside this module (``backward(g)`` returns one grad per parent)."""
    return _make(np.asarray(data, dtype=np.float64), parents, backward)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise -----------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data + s, (a,), lambda g: (g,))
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data - s, (a,), lambda g: (g,))
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * (xd + 0.044715 * x2 * xd))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(0.5 * xd * (1.0 + th), (x,), backward)


# reductions ------------------------------------------------------------------

def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _make(np.mean(x.data), (x,), lambda g: (np.full(shape, float(g) / n),))


# linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., r, k] @ b[..., k, c]``; leading axes must match, or ``b`` is 2-D and shared."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents differ {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch extents differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    _tally("matmul", out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if shared:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add ``b`` along the trailing axes of ``x`` (``b.shape == x.shape[-b.ndim:]``)."""
    if x.shape[x.ndim - b.ndim:] != b.shape:
        raise ValueError(f"bias_add: {b.shape} does not match trailing axes of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))


def scale_axis(x: Tensor, v: Tensor, axis: int) -> Tensor:
    """Multiply ``x`` by vector ``v`` laid along ``axis`` (per-head temperatures)."""
    axis = axis % x.ndim
    if v.ndim != 1 or v.shape[0] != x.shape[axis]:
        raise ValueError(f"scale_axis: {v.shape} vs axis {axis} of {x.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = -1
    vb = v.data.reshape(bshape)
    xd = x.data
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _make(xd * vb, (x, v), lambda g: (g * vb, (g * xd).sum(axis=others)))


def take(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate in backward."""
    index = np.asarray(index)
    axis = axis % x.ndim
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        np.add.at(gm, index, gg)
        return (gx,)

    return _make(np.take(x.data, index, axis=axis), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != axis
        ):
            raise ValueError(f"concat: misaligned shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split ``x`` into consecutive pieces of the given extents along ``axis``."""
    axis = axis % x.ndim
    if sum(sizes) != x.shape[axis] or any(s < 0 for s in sizes):
        raise ValueError(f"split: sizes {list(sizes)} do not tile extent {x.shape[axis]}")
    out = []
    start = 0
    for s in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + s)
        sl = tuple(sl)

        def backward(g, sl=sl):
            gx = np.zeros(x.shape)
            gx[sl] = g
            return (gx,)

        out.append(_make(x.data[sl].copy(), (x,), backward))
        start += s
    return out


# convolution / normalization -------------------------------------------------

def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-pixel linear map ``(..., Cin) -> (..., Cout)``; literally a flattened matmul."""
    cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv1x1: input has {x.shape[-1]} channels, weight expects {cin}")
    lead = x.shape[:-1]
    y = reshape(matmul(reshape(x, (-1, cin)), w), (*lead, cout))
    return y if b is None else bias_add(y, b)


_TAPS = [(i, j) for i in range(3) for j in range(3)]


def dwconv3x3(x: Tensor, w: Tensor) -> Tensor:
    """Depthwise 3x3 convolution, stride 1, zero padding 1, no bias. ``x``: (..., H, W, C)."""
    if w.shape != (3, 3, x.shape[-1]):
        raise ValueError(f"dwconv3x3: kernel {w.shape} does not match {x.shape}")
    h, wd = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x.data, pad)
    wk = w.data
    out = np.zeros(x.shape)
    for i, j in _TAPS:
        out += xp[..., i:i + h, j:j + wd, :] * wk[i, j]
    _tally("dwconv3x3", out.size * 9)

    def backward(g):
        gp = np.zeros(xp.shape)
        gw = np.zeros(wk.shape)
        red = tuple(range(g.ndim - 1))
        for i, j in _TAPS:
            gp[..., i:i + h, j:j + wd, :] += g * wk[i, j]
            gw[i, j] = (g * xp[..., i:i + h, j:j + wd, :]).sum(axis=red)
        return gp[..., 1:h + 1, 1:wd + 1, :], gw

    return _make(out, (x, w), backward)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax.  ``mask`` (broadcastable, True = allowed) forces weight exactly 0."""
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layernorm: affine params {gamma.shape}/{beta.shape} vs C={c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    den = np.maximum(norm, eps)
    y = xd / den

    def backward(g):
        proj = np.sum(g * y, axis=axis, keepdims=True)
        return (np.where(norm > eps, (g - y * proj) / den, g / den),)

    return _make(y, (x,), backward)


# spatial plumbing ------------------------------------------------------------

def pad2d(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad the H and W axes of ``(..., H, W, C)`` at the bottom/right."""
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(0, bottom), (0, right), (0, 0)]
    return _make(np.pad(x.data, pad), (x,), lambda g: (g[..., :h, :w, :].copy(),))


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left ``h x w`` of ``(..., H, W, C)``."""
    H, W = x.shape[-3], x.shape[-2]
    if h == H and w == W:
        return x
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[..., :h, :w, :] = g
        return (gx,)

    return _make(x.data[..., :h, :w, :].copy(), (x,), backward)


def pixel_unshuffle(x: Tensor, r: int = 2) -> Tensor:
    """``(B, H, W, C) -> (B, H/r, W/r, C*r*r)``."""
    b, h, w, c = x.shape
    if h % r or w % r:
        raise ValueError(f"pixel_unshuffle: {h}x{w} not divisible by {r}")
    y = reshape(x, (b * h // r, r, w // r, r * c))
    y = transpose(y, (0, 2, 1, 3))
    return reshape(y, (b, h // r, w // r, r * r * c))


def pixel_shuffle(x: Tensor, r: int = 2) -> Tensor:
    """Inverse of :func:`pixel_unshuffle`."""
    b, h, w, c = x.shape
    if c % (r * r):
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    y = reshape(x, (b * h, w, r, c // r))
    y = transpose(y, (0, 2, 1, 3))
    return reshape(y, (b, h * r, w * r, c // (r * r)))


# constants -------------------------------------------------------------------

def sinusoidal_embed(t: float, dim: int) -> np.ndarray:
    """``[sin(t*w_i) ..., cos(t*w_i) ...]`` with ``w_i = 10000**(-2i/dim)``."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    i = np.arange(dim // 2)
    omega = 10000.0 ** (-2.0 * i / dim)
    return np.concatenate([np.sin(t * omega), np.cos(t * omega)])


# gradient checking -----------------------------------------------------------

@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tol: float
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self):
        lines = [f"{'PASS' if self.passed else 'FAIL'} max rel err {self.max_error:.3e} (tol {self.tol:.0e})"]
        for name, err in self.errors.items():
            lines.append(f"  {name:<40s} {err:.3e}  ({self.checked.get(name, 0)} coords)")
        return "\n".join(lines)


def gradcheck(f: Callable[[], Tensor], leaves: Iterable[Tensor] | dict[str, Tensor],
              h: float = 1e-5, tol: float = 1e-6, max_coords: int | None = None,
              rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f()`` against central differences.

    The error for a leaf is ``max|analytic - numeric|`` over the checked coordinates,
    divided by the larger of the leaf's largest analytic gradient and the largest
    numeric one.  With ``max_coords`` only that many coordinates are differenced per
    leaf: half are the largest analytic entries, the rest drawn at random.
    """
    if isinstance(leaves, dict):
        named = list(leaves.items())
    else:
        named = [(t.name or f"leaf{i}", t) for i, t in enumerate(leaves)]
    for _, t in named:
        t.data = np.ascontiguousarray(t.data)  # perturbations below go through a flat view
        t.requires_grad = True
        t.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros(t.shape)) for name, t in named}

    rng = rng if rng is not None else np.random.default_rng(0)
    errors, checked = {}, {}
    with no_grad():
        for name, t in named:
            flat = t.data.reshape(-1)
            full = analytic[name].reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                top = np.argsort(-np.abs(full), kind="stable")[:(max_coords + 1) // 2]
                rest = np.setdiff1d(coords, top)
                coords = np.sort(np.concatenate([top, rng.choice(rest, size=max_coords - top.size, replace=False)]))
            num = np.empty(coords.size)
            for n, k in enumerate(coords):
                orig = flat[k]
                flat[k] = orig + h
                fp = f().item()
                flat[k] = orig - h
                fm = f().item()
                flat[k] = orig
                num[n] = (fp - fm) / (2 * h)
            ana = full[coords]
            scale_ = max(np.max(np.abs(full), initial=0.0), np.max(np.abs(num), initial=0.0))
            diff = np.max(np.abs(ana - num), initial=0.0)
            errors[name] = 0.0 if scale_ == 0.0 else float(diff / scale_)
            checked[name] = int(coords.size)
    return GradcheckReport(errors=errors, tol=tol, checked=checked)
