"""Tape-free reverse-mode differentiation over numpy float64 arrays.

Every op returns a :class:`Var`.  When gradients are enabled and at least one
input requires them, the op also records a closure mapping the output
gradient to input gradients; :func:`backward` walks those closures in reverse
topological order.  Parameter leaves remember the store version they were
read at, so a graph built before an optimizer step cannot be back-propagated
afterwards.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from ..errors import NumericError, ShapeError, StaleGraphError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Var:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "name", "source", "consumed")

    def __init__(self, data, parents=(), backward_fn=None, name="", requires_grad=False, source=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        # (store, key, version) for parameter leaves
        self.source = source
        self.consumed = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Var({self.name or 'anon'}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def const(data, name="") -> Var:
    return Var(np.asarray(data, dtype=np.float64), name=name)


def leaf(data, name="", requires_grad=True, source=None) -> Var:
    return Var(data, name=name, requires_grad=requires_grad and grad_enabled(), source=source)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else const(x)


def _node(data, parents, backward_fn, name) -> Var:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Var(data, parents, backward_fn, name, requires_grad=True)
    return Var(data, name=name)


# ------------------------------------------------------------- elementwise


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b, name="add") -> Var:
    a, b = _as_var(a), _as_var(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, name)


def sub(a, b, name="sub") -> Var:
    a, b = _as_var(a), _as_var(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(a.data - b.data, (a, b), bw, name)


def mul(a, b, name="mul") -> Var:
    a, b = _as_var(a), _as_var(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, name)


def silu(x: Var, name="silu") -> Var:
    sig = expit(x.data)

    def bw(g):
        return (g * sig * (1.0 + x.data * (1.0 - sig)),)

    return _node(x.data * sig, (x,), bw, name)


def total(x: Var, name="sum") -> Var:
    def bw(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.asarray(x.data.sum()), (x,), bw, name)


def mse(pred: Var, target, name="mse") -> Var:
    """Mean of squared differences over every element; gradient flows to `pred` only."""
    target = np.asarray(target.data if isinstance(target, Var) else target)
    diff = pred.data - target
    n = diff.size

    def bw(g):
        return (g * (2.0 / n) * diff,)

    return _node(np.asarray(np.mean(diff * diff)), (pred,), bw, name)


# ------------------------------------------------------------- structural


def concat(xs, axis=1, name="concat") -> Var:
    xs = [_as_var(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, name)


def add_channel(x: Var, v: Var, name="add_channel") -> Var:
    """x (B, C, D, H, W) plus per-sample channel vector v (B, C)."""
    if v.shape != x.shape[:2]:
        raise ShapeError(f"{name}: channel vector {v.shape} does not match {x.shape[:2]}")

    def bw(g):
        return g, g.sum(axis=(2, 3, 4))

    return _node(x.data + v.data[:, :, None, None, None], (x, v), bw, name)


def upsample2(x: Var, name="upsample") -> Var:
    """Nearest-neighbour doubling of the three spatial axes."""
    B, C, D, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None, :, None], (B, C, D, 2, H, 2, W, 2))

    def bw(g):
        return (g.reshape(B, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)),)

    return _node(out.reshape(B, C, 2 * D, 2 * H, 2 * W), (x,), bw, name)


# ------------------------------------------------------------------ layers


def linear(x: Var, w: Var, b: Var, name="linear") -> Var:
    """x (B, F) @ w.T (F, O) + b (O,)."""

    def bw(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _node(x.data @ w.data.T + b.data, (x, w, b), bw, name)


def _pad3(x, p):
    """Zero padding of the three spatial axes (np.pad is slow for small arrays)."""
    B, C, D, H, W = x.shape
    out = np.zeros((B, C, D + 2 * p, H + 2 * p, W + 2 * p))
    out[:, :, p:p + D, p:p + H, p:p + W] = x
    return out


def _im2col(xp, k, s):
    """Columns (C*kd*kh*kw, B*Do*Ho*Wo); the voxel axis is innermost so the gather copies whole rows."""
    xp = np.ascontiguousarray(xp)
    B, C = xp.shape[:2]
    Do, Ho, Wo = ((n - kk) // s + 1 for n, kk in zip(xp.shape[2:], k))
    sb, sc, sd, sh, sw = xp.strides
    win = as_strided(xp, (C,) + tuple(k) + (B, Do, Ho, Wo), (sc, sd, sh, sw, sb, s * sd, s * sh, s * sw),
                     writeable=False)
    cols = np.ascontiguousarray(win).reshape(-1, B * Do * Ho * Wo)
    return cols, (Do, Ho, Wo)


def _to_batch_first(m, B, spatial):
    """(O, B*D*H*W) matrix -> contiguous (B, O, D, H, W) array."""
    out = m.reshape((m.shape[0], B) + tuple(spatial))
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3, 4))


def _conv_data(x, w, padding):
    """Plain stride-1 conv of raw arrays without bias (used for input gradients)."""
    p = padding
    xp = _pad3(x, p) if p else x
    cols, spatial = _im2col(xp, w.shape[2:], 1)
    return _to_batch_first(w.reshape(w.shape[0], -1) @ cols, x.shape[0], spatial)


def conv3d(x: Var, w: Var, b: Var, stride=1, padding=None, name="conv3d") -> Var:
    """3D cross-correlation, x (B, C, D, H, W), w (O, C, k, k, k), zero padding.

    Default padding keeps "same" size for odd kernels at stride 1.
    """
    B, C = x.shape[:2]
    O, Cw, kd, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"{name}: input has {C} channels, kernel expects {Cw}")
    if padding is None:
        padding = kd // 2
    xp = x.data
    if padding:
        p = padding
        xp = _pad3(xp, p)
    if any(n < k for n, k in zip(xp.shape[2:], (kd, kh, kw))):
        raise ShapeError(f"{name}: kernel larger than padded input {xp.shape[2:]}")
    s = stride
    # rows: (c, i, j, k); columns: (b, d, h, w)
    cols, (Do, Ho, Wo) = _im2col(xp, (kd, kh, kw), s)
    wmat = w.data.reshape(O, -1)
    out = _to_batch_first(wmat @ cols + b.data[:, None], B, (Do, Ho, Wo))
    xshape = x.shape

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3, 4).reshape(O, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = gmat.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad and s == 1 and 2 * padding == kd - 1 == kh - 1 == kw - 1:
            # "same" stride-1 conv: input grad is a conv with the flipped, transposed kernel
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = _conv_data(g, wf, padding)
        elif x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(C, kd, kh, kw, B, Do, Ho, Wo)
            gxp = np.zeros(xp.shape)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, :, i:i + s * Do:s, j:j + s * Ho:s, k:k + s * Wo:s] += \
                            gcols[:, i, j, k].transpose(1, 0, 2, 3, 4)
            if padding:
                p = padding
                gxp = gxp[:, :, p:p + xshape[2], p:p + xshape[3], p:p + xshape[4]]
            gx = gxp
        return gx, gw, gb

    return _node(out, (x, w, b), bw, name)


def conv_transpose3d_k2s2(x: Var, w: Var, b: Var, name="conv_transpose") -> Var:
    """Transposed convolution with kernel 2 and stride 2 (non-overlapping taps).

    x (B, C, D, H, W), w (C, O, 2, 2, 2) -> (B, O, 2D, 2H, 2W).
    """
    B, C, D, H, W = x.shape
    Cw, O = w.shape[:2]
    if Cw != C or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"{name}: kernel {w.shape} incompatible with input channels {C}")
    xm = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, C)
    wm = w.data.reshape(C, -1)
    y = (xm @ wm).reshape(B, D, H, W, O, 2, 2, 2)
    out = y.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(B, O, 2 * D, 2 * H, 2 * W) + b.data[None, :, None, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        gy = g.reshape(B, O, D, 2, H, 2, W, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(-1, O * 8)
        gx = (gy @ wm.T).reshape(B, D, H, W, C).transpose(0, 4, 1, 2, 3) if x.requires_grad else None
        gw = (xm.T @ gy).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4))
        return gx, gw, gb

    return _node(out, (x, w, b), bw, name)


def group_norm(x: Var, gamma: Var, beta: Var, groups: int, eps=1e-5, name="group_norm") -> Var:
    B, C = x.shape[:2]
    if C % groups:
        raise ShapeError(f"{name}: {C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    n = xg.shape[2]
    mean = xg.mean(axis=2, keepdims=True)
    centered = xg - mean
    var = np.mean(centered * centered, axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.data.ndim - 2)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.data.ndim))

    def bw(g):
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        dxhat = (g * gamma.data.reshape(bshape)).reshape(B, groups, -1)
        xh = xhat.reshape(B, groups, -1)
        gx = inv_std * (dxhat - dxhat.mean(axis=2, keepdims=True)
                        - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), ggamma, gbeta

    return _node(out, (x, gamma, beta), bw, name)


# ---------------------------------------------------------------- backward


def _toposort(root: Var) -> list[Var]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def first_nonfinite(root: Var) -> Var | None:
    """Earliest node (in forward order) whose value contains NaN or Inf."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if id(p) not in seen)
    for node in order:
        if not np.all(np.isfinite(node.data)):
            return node
    return None


def backward(loss: Var) -> None:
    """Propagate d(loss)/d(.) to every leaf; parameter leaves write into their store."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.consumed:
        raise StaleGraphError("graph already back-propagated; run the forward pass again")
    if not np.isfinite(loss.data):
        bad = first_nonfinite(loss)
        raise NumericError(f"non-finite loss; first offending layer: {(bad.name or '<unnamed input>') if bad else 'unknown'}")
    if not loss.requires_grad:
        loss.consumed = True
        return
    order = _toposort(loss)
    for node in order:
        if node.source is not None:
            store, key, version = node.source
            if store.version != version:
                raise StaleGraphError(f"parameter {key!r} changed after the forward pass")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.source is not None:
                store, key, _ = node.source
                store.accumulate_grad(key, g)
            else:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    loss.consumed = True
