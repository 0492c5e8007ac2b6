"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Only the operator set needed by the decoder is provided. Heavier operators
(attention, layer norm, softmax) carry hand-written backward rules instead of
being composed from primitives, which keeps graphs small.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from toricmoe import _kernels

MASK_NEG = -1e30  # additive stand-in for -inf in attention masks


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape_error(op: str, *shapes) -> ValueError:
    return ValueError(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                pg = unbroadcast(pg, parent.data.shape)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# elementwise / structural ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    return Tensor(out, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None
    return Tensor(out, (a, b), lambda g: (g * b.data, g * a.data))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), lambda g: (-g,))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return Tensor(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def mean_pool(x: Tensor) -> Tensor:
    """Average over the token axis of a ``(..., N, d)`` tensor."""
    return mean(x, axis=-2)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    out, t = _kernels.gelu_fwd(np.ascontiguousarray(a.data))
    return Tensor(out, (a,), lambda g: (_kernels.gelu_bwd(np.ascontiguousarray(g), a.data, t),))


def prod(a: Tensor, axis: int = -1) -> Tensor:
    """Product along ``axis``; gradient is exact even where entries are zero."""
    x = np.moveaxis(a.data, axis, -1)
    out = x.prod(axis=-1)

    def bw(g):
        ones = np.ones_like(x[..., :1])
        before = np.cumprod(np.concatenate([ones, x[..., :-1]], axis=-1), axis=-1)
        after = np.cumprod(np.concatenate([ones, x[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
        return (np.moveaxis(before * after * g[..., None], -1, axis),)

    return Tensor(out, (a,), bw)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[..., index]`` along the last axis; ``index`` may have any shape."""
    index = np.asarray(index)
    out = a.data[..., index]
    width = a.shape[-1]
    flat = index.ravel()

    def bw(g):
        # scatter-add expressed as a product with a one-hot selection matrix
        onehot = np.zeros((flat.size, width))
        onehot[np.arange(flat.size), flat] = 1.0
        g2 = g.reshape(-1, flat.size) @ onehot
        return (g2.reshape(*a.shape[:-1], width),)

    return Tensor(out, (a,), bw)


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        extra = a.ndim - b.ndim
        if extra > 0 and a.shape[extra:-2] == b.shape[:-2]:
            # b is shared across a's leading axes: fold them into the row axis
            # instead of materializing one gradient per batch element
            lead = list(range(extra))
            keep = list(range(extra, a.ndim - 2))
            perm = keep + lead + [a.ndim - 2, a.ndim - 1]
            rows = int(np.prod([a.shape[i] for i in lead])) * a.shape[-2]
            af = a.data.transpose(perm).reshape(*b.shape[:-2], rows, a.shape[-1])
            gf = g.transpose(perm).reshape(*b.shape[:-2], rows, g.shape[-1])
            gb = np.swapaxes(af, -1, -2) @ gf
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return Tensor(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(..., d_in)`` and 2-D ``w``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise _shape_error("linear", x.shape, w.shape)
    xd = x.data.reshape(-1, w.shape[0])
    out = xd @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*x.shape[:-1], w.shape[1])

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        grads = [(g2 @ w.data.T).reshape(x.shape), xd.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_error("layer_norm", x.shape, gain.shape, bias.shape)
    rows = np.ascontiguousarray(x.data).reshape(-1, d)
    out, xhat, inv = _kernels.layer_norm_fwd(rows, gain.data, bias.data, eps)

    def bw(g):
        gx, gg, gb = _kernels.layer_norm_bwd(np.ascontiguousarray(g).reshape(-1, d), xhat, inv, gain.data)
        return gx.reshape(x.shape), gg, gb

    return Tensor(out.reshape(x.shape), (x, gain, bias), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
              return_probs: bool = False):
    """Scaled dot-product attention over ``(..., N, d)`` inputs.

    ``mask`` is additive: 0 where attention is allowed and :data:`MASK_NEG`
    where it is blocked.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise _shape_error("attention", q.shape, k.shape, v.shape)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    if mask is not None:
        scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = probs @ v.data

    def bw(g):
        gv = np.swapaxes(probs, -1, -2) @ g
        gp = g @ np.swapaxes(v.data, -1, -2)
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True)) * scale
        return gs @ k.data, np.swapaxes(gs, -1, -2) @ q.data, gv

    res = Tensor(out, (q, k, v), bw)
    return (res, probs) if return_probs else res


def multihead_attention(qkv: Tensor, heads: int, mask: np.ndarray | None = None,
                        return_probs: bool = False):
    """Multi-head attention on a packed ``(B, N, 3d)`` projection; returns ``(B, N, d)``.

    Equivalent to splitting into q, k, v, running :func:`attention` per head
    and concatenating the heads, with one graph node instead of a dozen.
    """
    B, N, three_d = qkv.shape
    d = three_d // 3
    if three_d % 3 or d % heads:
        raise _shape_error("multihead_attention", qkv.shape, (heads,))
    dh = d // heads
    packed = qkv.data.reshape(B, N, 3, heads, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, N, dh)
    q, k, v = packed[0], packed[1], packed[2]
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    if mask is not None:
        scores += mask
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(B, N, d)

    def bw(g):
        gh = g.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
        gv = np.swapaxes(probs, -1, -2) @ gh
        gp = gh @ np.swapaxes(v, -1, -2)
        gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
        gs *= scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        return (np.stack([gq, gk, gv]).transpose(1, 3, 0, 2, 4).reshape(B, N, three_d),)

    res = Tensor(out, (qkv,), bw)
    return (res, probs) if return_probs else res


def stencil_conv(x: Tensor, index: np.ndarray, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Masked-gather convolution: ``out[..., i, :] = sum_j x[..., index[i, j]] * weight[j, :] + bias``.

    ``index`` (tokens x stencil size) lists, for each output site, the input
    positions covered by its stencil, so any binary stencil shape works.
    """
    index = np.asarray(index)
    if index.ndim != 2 or weight.shape[0] != index.shape[1]:
        raise _shape_error("stencil_conv", index.shape, weight.shape)
    return linear(gather(x, index), weight, bias)


def cosine_similarity_matrix(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Pairwise cosine similarities between the rows of ``x`` (``(..., S, d)``)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    u = x.data / safe
    out = u @ np.swapaxes(u, -1, -2)

    def bw(g):
        gs = g + np.swapaxes(g, -1, -2)
        gu = gs @ u
        # d u / d x = (I - u u^T) / ||x|| where the norm is not clamped
        radial = (gu * u).sum(axis=-1, keepdims=True) * u
        gx = np.where(norm > eps, (gu - radial) / safe, gu / safe)
        return (gx,)

    return Tensor(out, (x,), bw)


# losses ----------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``targets``."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != z.shape:
        raise _shape_error("bce_with_logits", z.shape, t.shape)
    loss = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def bw(g):
        return (g * (sig - t) / z.size,)

    return Tensor(loss.mean(), (logits,), bw)


def bce(probs: Tensor, targets: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy on probabilities, clamped to ``[eps, 1 - eps]``."""
    pr = probs.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != pr.shape:
        raise _shape_error("bce", pr.shape, t.shape)
    pc = np.clip(pr, eps, 1.0 - eps)
    loss = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    inside = (pr > eps) & (pr < 1.0 - eps)

    def bw(g):
        return (np.where(inside, g * (pc - t) / (pc * (1.0 - pc)), 0.0) / pr.size,)

    return Tensor(loss.mean(), (probs,), bw)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
