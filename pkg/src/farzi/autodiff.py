"""Minimal reverse-mode autodiff on dense float64 arrays.

Two properties matter here and shape the whole design:

* every primitive's backward pass is itself built from primitives, so
  gradients can be differentiated again (needed by the fully-unrolled
  oracle in ``unrolled.py``);
* every primitive also propagates a forward-mode tangent, so running a
  backward pass with seeded leaf tangents yields Hessian-vector products
  (forward-over-reverse) without retaining any second-order graph.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "ParamVector",
    "NumericError",
    "const",
    "leaf",
    "grad",
    "value_and_grad",
    "hvp_param",
    "hvp_data",
    "grad_and_hvps",
]


class NumericError(RuntimeError):
    """A public op produced a NaN/Inf value."""


def _arr(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Var:
    """Graph node: float64 value, optional tangent, backward closure."""

    __slots__ = ("val", "tan", "parents", "bwd")

    def __init__(self, val, tan=None, parents=(), bwd=None):
        self.val = _arr(val)
        self.tan = tan
        self.parents = parents
        self.bwd = bwd

    @property
    def shape(self):
        return self.val.shape

    # operator sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def const(x):
    return Var(x)


def leaf(x, tangent=None):
    v = Var(x)
    if tangent is not None:
        v.tan = _arr(tangent)
    return v


def _wrap(x):
    return x if isinstance(x, Var) else Var(x)


def _tan_of(v):
    return v.tan


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    tan = None
    if a.tan is not None or b.tan is not None:
        ta = a.tan if a.tan is not None else 0.0
        tb = b.tan if b.tan is not None else 0.0
        tan = np.broadcast_to(ta + tb, np.broadcast_shapes(a.shape, b.shape)).copy()

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Var(a.val + b.val, tan, (a, b), bwd)


def neg(a):
    tan = None if a.tan is None else -a.tan

    def bwd(g):
        return (neg(g),)

    return Var(-a.val, tan, (a,), bwd)


def mul(a, b):
    tan = None
    if a.tan is not None or b.tan is not None:
        tan = np.zeros(np.broadcast_shapes(a.shape, b.shape))
        if a.tan is not None:
            tan = tan + a.tan * b.val
        if b.tan is not None:
            tan = tan + a.val * b.tan

    def bwd(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return Var(a.val * b.val, tan, (a, b), bwd)


def div(a, b):
    out_val = a.val / b.val
    tan = None
    if a.tan is not None or b.tan is not None:
        tan = np.zeros(np.broadcast_shapes(a.shape, b.shape))
        if a.tan is not None:
            tan = tan + a.tan / b.val
        if b.tan is not None:
            tan = tan - out_val * b.tan / b.val

    def bwd(g):
        ga = div(g, b)
        gb = neg(div(mul(g, div(a, b)), b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Var(out_val, tan, (a, b), bwd)


def matmul(a, b):
    """Strictly 2-D matrix product."""
    tan = None
    if a.tan is not None or b.tan is not None:
        tan = np.zeros((a.shape[0], b.shape[1]))
        if a.tan is not None:
            tan = tan + a.tan @ b.val
        if b.tan is not None:
            tan = tan + a.val @ b.tan

    def bwd(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return Var(a.val @ b.val, tan, (a, b), bwd)


def bmm(a, b):
    """Batched matrix product (B, n, k) @ (B, k, m)."""
    tan = None
    if a.tan is not None or b.tan is not None:
        tan = np.zeros((a.shape[0], a.shape[1], b.shape[2]))
        if a.tan is not None:
            tan = tan + a.tan @ b.val
        if b.tan is not None:
            tan = tan + a.val @ b.tan

    def bwd(g):
        return bmm(g, transpose(b, (0, 2, 1))), bmm(transpose(a, (0, 2, 1)), g)

    return Var(a.val @ b.val, tan, (a, b), bwd)


def exp(a):
    out_val = np.exp(a.val)
    tan = None if a.tan is None else a.tan * out_val

    def bwd(g):
        # re-expressing exp(a) keeps double-backprop exact
        return (mul(g, exp(a)),)

    return Var(out_val, tan, (a,), bwd)


def log(a):
    tan = None if a.tan is None else a.tan / a.val

    def bwd(g):
        return (div(g, a),)

    return Var(np.log(a.val), tan, (a,), bwd)


def sqrt(a):
    out_val = np.sqrt(a.val)
    tan = None if a.tan is None else 0.5 * a.tan / out_val

    def bwd(g):
        return (div(mul(g, Var(0.5)), sqrt(a)),)

    return Var(out_val, tan, (a,), bwd)


def tanh(a):
    out_val = np.tanh(a.val)
    tan = None if a.tan is None else a.tan * (1.0 - out_val * out_val)

    def bwd(g):
        t = tanh(a)
        return (mul(g, Var(1.0) - mul(t, t)),)

    return Var(out_val, tan, (a,), bwd)


def sigmoid(a):
    # composed: 1 / (1 + exp(-a))
    return div(Var(1.0), Var(1.0) + exp(neg(a)))


def vsum(a, axis=None, keepdims=False):
    tan = None if a.tan is None else np.sum(a.tan, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * a.val.ndim), a.shape),)
        if not keepdims:
            kshape = list(a.shape)
            ax = axis if isinstance(axis, tuple) else (axis,)
            for i in ax:
                kshape[i] = 1
            g = reshape(g, tuple(kshape))
        return (broadcast_to(g, a.shape),)

    return Var(np.sum(a.val, axis=axis, keepdims=keepdims), tan, (a,), bwd)


def vmean(a, axis=None, keepdims=False):
    n = a.val.size if axis is None else np.prod([a.shape[i] for i in (axis if isinstance(axis, tuple) else (axis,))])
    return div(vsum(a, axis=axis, keepdims=keepdims), Var(float(n)))


def broadcast_to(a, shape):
    tan = None if a.tan is None else np.broadcast_to(a.tan, shape).copy()

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return Var(np.broadcast_to(a.val, shape).copy(), tan, (a,), bwd)


def reshape(a, shape):
    tan = None if a.tan is None else a.tan.reshape(shape)

    def bwd(g):
        return (reshape(g, a.shape),)

    return Var(a.val.reshape(shape), tan, (a,), bwd)


def transpose(a, axes=None):
    tan = None if a.tan is None else np.transpose(a.tan, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bwd(g):
        return (transpose(g, inv),)

    return Var(np.transpose(a.val, axes), tan, (a,), bwd)


def gather_rows(a, idx):
    """a[idx] along axis 0; idx is a 1-D int array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)
    tan = None if a.tan is None else a.tan[idx]

    def bwd(g):
        return (scatter_rows(g, idx, a.shape[0]),)

    return Var(a.val[idx], tan, (a,), bwd)


def scatter_rows(a, idx, n):
    """Adjoint of gather_rows: sum rows of `a` into an (n, ...) zero array."""
    idx = np.asarray(idx, dtype=np.int64)

    def _scatter(x):
        out = np.zeros((n,) + x.shape[1:])
        np.add.at(out, idx, x)
        return out

    tan = None if a.tan is None else _scatter(a.tan)

    def bwd(g):
        return (gather_rows(g, idx),)

    return Var(_scatter(a.val), tan, (a,), bwd)


def take_flat(a, flat_idx):
    """Row-major flat indexing; adjoint of put_flat."""
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    tan = None if a.tan is None else a.tan.reshape(-1)[flat_idx]

    def bwd(g):
        return (reshape(put_flat(g, flat_idx, a.val.size), a.shape),)

    return Var(a.val.reshape(-1)[flat_idx], tan, (a,), bwd)


def put_flat(a, flat_idx, size):
    flat_idx = np.asarray(flat_idx, dtype=np.int64)

    def _put(x):
        out = np.zeros(size)
        np.add.at(out, flat_idx.reshape(-1), x.reshape(-1))
        return out

    tan = None if a.tan is None else _put(a.tan)

    def bwd(g):
        return (reshape(take_flat(g, flat_idx), a.shape),)

    return Var(_put(a.val), tan, (a,), bwd)


def slice_(a, key):
    tan = None if a.tan is None else a.tan[key].copy()

    def bwd(g):
        return (pad_slice(g, key, a.shape),)

    return Var(a.val[key].copy(), tan, (a,), bwd)


def pad_slice(a, key, shape):
    def _pad(x):
        out = np.zeros(shape)
        out[key] = x
        return out

    tan = None if a.tan is None else _pad(a.tan)

    def bwd(g):
        return (slice_(g, key),)

    return Var(_pad(a.val), tan, (a,), bwd)


def max_detach(a, axis=None, keepdims=False):
    """Max treated as a constant (safe inside softmax/logsumexp shifts)."""
    return Var(np.max(a.val, axis=axis, keepdims=keepdims))


def softmax(a, axis=-1):
    e = exp(a - max_detach(a, axis=axis, keepdims=True))
    return div(e, vsum(e, axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    m = max_detach(a, axis=axis, keepdims=True)
    s = a - m
    return s - log(vsum(exp(s), axis=axis, keepdims=True))


def _unbroadcast(g, shape):
    """Reduce a cotangent back to the pre-broadcast shape (graph ops only)."""
    if g.shape == shape:
        return g
    extra = g.val.ndim - len(shape)
    if extra > 0:
        g = vsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = vsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def _topo(root, stop_ids=frozenset()):
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
        if id(node) in stop_ids:
            continue
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(out, wrt, seed=None, stop=None):
    """Cotangents of `out` w.r.t. each Var in `wrt`.

    Returned grads are Vars (differentiable again, and carrying tangents
    when the forward pass was seeded with leaf tangents). Nodes in `stop`
    accumulate their cotangent but are treated as leaves: the sweep does
    not descend into their ancestry.
    """
    if seed is None:
        seed = Var(np.ones_like(out.val))
    elif not isinstance(seed, Var):
        seed = Var(seed)
    stop_ids = frozenset(id(s) for s in stop) if stop else frozenset()
    cot = {id(out): seed}
    for node in reversed(_topo(out, stop_ids)):
        g = cot.get(id(node))
        if g is None or node.bwd is None or id(node) in stop_ids:
            continue
        for p, pg in zip(node.parents, node.bwd(g)):
            if pg is None:
                continue
            prev = cot.get(id(p))
            cot[id(p)] = pg if prev is None else add(prev, pg)
    out_grads = []
    for w in wrt:
        g = cot.get(id(w))
        if g is None:
            g = Var(np.zeros_like(w.val))
        out_grads.append(g)
    return out_grads


# ---------------------------------------------------------------------------
# parameter vectors
# ---------------------------------------------------------------------------

class ParamVector:
    """Ordered named float64 segments with an exact flatten/unflatten."""

    def __init__(self, segments):
        # segments: list of (name, ndarray) or dict
        if isinstance(segments, dict):
            segments = list(segments.items())
        self.names = [n for n, _ in segments]
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate segment names")
        self.seg = {n: _arr(a) for n, a in segments}

    def __getitem__(self, name):
        return self.seg[name]

    def items(self):
        return [(n, self.seg[n]) for n in self.names]

    @property
    def total_len(self):
        return sum(self.seg[n].size for n in self.names)

    def flatten(self):
        return np.concatenate([self.seg[n].reshape(-1) for n in self.names]) \
            if self.names else np.zeros(0)

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.total_len:
            raise ValueError("flat length mismatch")
        out, off = [], 0
        for n in self.names:
            a = self.seg[n]
            out.append((n, flat[off:off + a.size].reshape(a.shape).copy()))
            off += a.size
        return ParamVector(out)

    def map(self, fn):
        return ParamVector([(n, fn(a)) for n, a in self.items()])

    def zeros_like(self):
        return self.map(np.zeros_like)

    def copy(self):
        return self.map(np.copy)

    def allfinite(self):
        return all(np.all(np.isfinite(a)) for _, a in self.items())

    def __repr__(self):
        return "ParamVector(%s)" % ", ".join(
            "%s%s" % (n, self.seg[n].shape) for n in self.names)


def _param_vars(params, tangent=None):
    return {n: leaf(a, None if tangent is None else tangent[n])
            for n, a in params.items()}


def _check_grads(params, gvars, what="gradient"):
    out = []
    for n, gv in zip(params.names, gvars):
        g = gv.val
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite %s in segment %r" % (what, n))
        out.append((n, g.copy()))
    return ParamVector(out)


def value_and_grad(loss_fn, params, batch):
    """Loss value and gradient with the segment structure of `params`."""
    pvars = _param_vars(params)
    out = loss_fn(pvars, batch)
    loss = float(np.squeeze(out.val))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss value")
    gvars = grad(out, [pvars[n] for n in params.names])
    return loss, _check_grads(params, gvars)


def hvp_param(loss_fn, params, batch, v):
    """(d²L/dw²)·v via forward-over-reverse."""
    if v.names != params.names:
        raise ValueError("direction not conformal with params")
    pvars = _param_vars(params, tangent=v)
    out = loss_fn(pvars, batch)
    gvars = grad(out, [pvars[n] for n in params.names])
    segs = []
    for n, g in zip(params.names, gvars):
        h = g.tan if g.tan is not None else np.zeros_like(g.val)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite hvp in segment %r" % n)
        segs.append((n, np.array(h)))
    return ParamVector(segs)


def hvp_data(loss_fn, params, data, v):
    """(d/dx)(dL/dw)·v: tangent of the data gradient under param direction v.

    `loss_fn(pvars, x_var)` must treat its second argument as a Var.
    """
    pvars = _param_vars(params, tangent=v)
    x = leaf(data)
    out = loss_fn(pvars, x)
    (gx,) = grad(out, [x])
    h = gx.tan if gx.tan is not None else np.zeros_like(gx.val)
    if not np.all(np.isfinite(h)):
        raise NumericError("non-finite hvp w.r.t. data")
    return np.array(h)


def grad_and_hvps(loss_fn, params, data, v):
    """One dual-mode pass: gradient plus both HVPs in direction v.

    Returns (grad_w: ParamVector, hvp_w: ParamVector, hvp_x: ndarray).
    """
    pvars = _param_vars(params, tangent=v)
    x = leaf(data)
    out = loss_fn(pvars, x)
    if not np.isfinite(float(out.val)):
        raise NumericError("non-finite loss value")
    targets = [pvars[n] for n in params.names] + [x]
    gvars = grad(out, targets)
    gw = _check_grads(params, gvars[:-1])
    hw_segs = []
    for n, g in zip(params.names, gvars[:-1]):
        h = g.tan if g.tan is not None else np.zeros_like(g.val)
        hw_segs.append((n, np.array(h)))
    hw = _check_grads(params, [Var(a) for _, a in hw_segs], what="hvp")
    gx = gvars[-1]
    hx = gx.tan if gx.tan is not None else np.zeros_like(gx.val)
    if not (hw.allfinite() and np.all(np.isfinite(hx))):
        raise NumericError("non-finite hvp")
    return gw, hw, np.array(hx)
