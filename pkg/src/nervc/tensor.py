"""Dense numpy-backed tensors with a reverse-mode autodiff tape.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks the tape in reverse topological order, summing
gradients for nodes with several consumers.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr

from . import runtime
from .errors import (
    ContractError,
    DimensionError,
    GroupError,
    ParameterError,
    ShapeError,
    StateError,
    UnsupportedKernelError,
)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording on this thread (evaluation / decoding)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data).astype(dtype, copy=False)
    # 32-bit unless the caller hands over a 64-bit array on purpose
    if isinstance(data, np.ndarray) and data.dtype in (np.float64, np.float32):
        return data
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """An n-dimensional array of reals that can take part in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties -------------------------------------------------

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
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------

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

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    # -- reverse mode -----------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Leaf gradients are summed into existing ``.grad`` arrays, so call
        ``zero_grad`` on parameters between optimizer steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient {grad.shape} does not match {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        # release the tape so intermediate activations can be collected
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Run the backward pass and return one gradient per requested leaf.

    Leaves not on the path to ``loss`` get an all-zero gradient.
    """
    params = list(params) if params is not None else []
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _wrap(x, like: "Tensor | None" = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _wrap(b, a)
    b = _wrap(b)
    return _wrap(a, b), b


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), fn)


def scale(x: Tensor, factor: float) -> Tensor:
    x = _wrap(x)
    factor = x.data.dtype.type(factor)
    return _result(x.data * factor, (x,), lambda g: (g * factor,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF."""
    xd = x.data
    cdf = ndtr(xd).astype(xd.dtype, copy=False)
    out = xd * cdf

    def fn(g):
        pdf = (np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)).astype(xd.dtype, copy=False)
        return (g * (cdf + xd * pdf),)

    return _result(out, (x,), fn)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; survivors are scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# -- shape manipulation ---------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(src_shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(x.data[index], (x,), fn)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), fn)


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """Repeat each slice ``repeats`` times consecutively along ``axis``."""
    src = x.shape
    ax = axis % x.ndim

    def fn(g):
        shaped = g.reshape(src[:ax] + (src[ax], repeats) + src[ax + 1 :])
        return (shaped.sum(axis=ax + 1),)

    return _result(np.repeat(x.data, repeats, axis=ax), (x,), fn)


def tile(x: Tensor, reps: int, axis: int) -> Tensor:
    """Tile the whole tensor ``reps`` times along ``axis``."""
    src = x.shape
    ax = axis % x.ndim
    tiling = [1] * x.ndim
    tiling[ax] = reps

    def fn(g):
        shaped = g.reshape(src[:ax] + (reps, src[ax]) + src[ax + 1 :])
        return (shaped.sum(axis=ax),)

    return _result(np.tile(x.data, tiling), (x,), fn)


# -- reductions -----------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(out, dtype=x.dtype), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / count)


# -- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; ``b`` may be a shared 2-D matrix."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _result(out, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation and attention helpers ----------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise ``x`` along ``axis`` then apply the affine ``gamma``, ``beta``."""
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = centered * inv
    def fn(g):
        gx = g.mean(axis=axis, keepdims=True)
        gxx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gx - xhat * gxx),)

    y = _result(xhat.astype(xd.dtype, copy=False), (x,), fn)
    if gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def l2_normalize(x: Tensor, axes) -> Tensor:
    """Divide every fiber spanned by ``axes`` by max(||fiber||_2, 1e-8)."""
    eps = 1e-8
    axes = tuple(np.atleast_1d(axes).tolist())
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axes, keepdims=True))
    denom = np.maximum(norm, xd.dtype.type(eps))
    out = xd / denom
    live = norm > eps

    def fn(g):
        proj = (g * out).sum(axis=axes, keepdims=True)
        return (np.where(live, (g - out * proj) / denom, g / denom),)

    return _result(out, (x,), fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error; the target never receives a gradient."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target_data.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target_data.shape}")
    diff = pred.data - target_data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    coef = pred.dtype.type(2.0 / n)
    return _result(out, (pred,), lambda g: (g * coef * diff,))


# -- convolution ----------------------------------------------------------


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols


def _grouped_matmul(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """(G, O, R) x (B, G, R, N) -> (B, G, O, N).

    In deterministic mode every (batch, group) product is a separate 2-D
    matmul on identically shaped operands, so a group's result never depends
    on how many neighbours share the call.
    """
    if runtime.deterministic():
        bsz, groups = rhs.shape[:2]
        out = np.empty((bsz, groups, lhs.shape[1], rhs.shape[3]), dtype=np.result_type(lhs, rhs))
        for bi in range(bsz):
            for gi in range(groups):
                out[bi, gi] = np.matmul(lhs[gi], rhs[bi, gi])
        return out
    return np.matmul(lhs[None], rhs)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, groups: int = 1,
           padding: int | None = None) -> Tensor:
    """Grouped stride-1 cross-correlation with "same" zero padding."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    bsz, cin, h, w = x.shape
    cout, cin_g, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise UnsupportedKernelError(f"only odd square kernels are supported, got {k}x{k2}")
    if padding is not None and padding != (k - 1) // 2:
        raise ParameterError(f"padding must be (K-1)/2 = {(k - 1) // 2}, got {padding}")
    if groups < 1 or cin % groups or cout % groups:
        raise GroupError(f"channels {cin}->{cout} are not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise DimensionError(f"kernel {kernel.shape} does not match input channels {cin} / groups {groups}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias {bias.shape} does not match {cout} output channels")

    p = (k - 1) // 2
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, k, h, w).reshape(bsz, groups, cin_g * k * k, h * w)
    og = cout // groups
    wmat = kernel.data.reshape(groups, og, cin_g * k * k)
    out = _grouped_matmul(wmat, cols).reshape(bsz, cout, h, w)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def fn(g):
        gmat = g.reshape(bsz, groups, og, h * w)
        gx = gk = gb = None
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wmat, -1, -2)[None], gmat)
            gcols = gcols.reshape(bsz, cin, k, k, h, w)
            gxp = np.zeros((bsz, cin, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + h, j : j + w] += gcols[:, :, i, j]
            gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        if kernel.requires_grad:
            gk = np.matmul(gmat, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(out, parents, fn)


def _shuffle(data: np.ndarray, s: int) -> np.ndarray:
    b, cs2, h, w = data.shape
    c = cs2 // (s * s)
    return data.reshape(b, c, s, s, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, h * s, w * s)


def _unshuffle(data: np.ndarray, s: int) -> np.ndarray:
    b, c, hs, ws = data.shape
    h, w = hs // s, ws // s
    return data.reshape(b, c, h, s, w, s).transpose(0, 1, 3, 5, 2, 4).reshape(b, c * s * s, h, w)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    """Depth-to-space: out[b, c, y*S+i, x*S+j] = in[b, c*S*S + i*S + j, y, x]."""
    if x.ndim != 4 or s < 1 or x.shape[1] % (s * s):
        raise ShapeError(f"pixel_shuffle: channel extent of {x.shape} not divisible by {s}^2")
    return _result(_shuffle(x.data, s), (x,), lambda g: (_unshuffle(g, s),))


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    if x.ndim != 4 or s < 1 or x.shape[2] % s or x.shape[3] % s:
        raise ShapeError(f"pixel_unshuffle: spatial extent of {x.shape} not divisible by {s}")
    return _result(_unshuffle(x.data, s), (x,), lambda g: (_shuffle(g, s),))


# -- optimisation ---------------------------------------------------------


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState) -> None:
    """One bias-corrected AdamW update with decoupled weight decay, in place."""
    if len(params) != len(grads):
        raise StateError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise StateError(f"optimizer state tracks {len(state.m)} tensors, got {len(params)}")
    state.step += 1
    t = state.step
    lr = state.lr
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise StateError(f"moment shape {m.shape} does not match parameter {p.shape}")
        if state.weight_decay:
            p.data *= p.dtype.type(1.0 - lr * state.weight_decay)
        if g is None:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * update).astype(p.dtype, copy=False)


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` reading ``p.grad``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state)
