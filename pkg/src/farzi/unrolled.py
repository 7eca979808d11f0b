"""Fully-unrolled differentiation through Adam, kept as an oracle.

Builds one big graph over all T inner steps (the inner gradients are
obtained by differentiating through the graph, and the optimizer update
is expressed in graph ops), then backpropagates the meta-objective once.
Exact, but memory grows linearly with T -- which is exactly what the
constant-memory reverse pass is measured against.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector
from .optim import AdamHyper, BatchSchedule, SgdHyper

# keeps sqrt differentiable where a coordinate never saw a gradient
_V_JITTER = 1e-300


def unrolled_adam_meta_grads(w0: ParamVector, loss_fn, data, T: int,
                             hyper: AdamHyper, schedule: BatchSchedule,
                             meta_fn, m0: ParamVector = None):
    """Exact (dw0, dm0, dx) for meta_fn(w_T) through T unrolled Adam steps.

    `loss_fn(pvars, x_var, mask_rows)` and `meta_fn(pvars)` build graphs.
    Returns (meta_loss, dw0: ParamVector, dm0: ParamVector, dx: ndarray).
    """
    names = w0.names
    pw = {n: ad.leaf(a) for n, a in w0.items()}
    if m0 is None:
        m0 = w0.zeros_like()
    pm = {n: ad.leaf(a) for n, a in m0.items()}
    pv = {n: ad.const(np.zeros_like(a)) for n, a in w0.items()}
    x = ad.leaf(data.probs)
    n_rows = data.probs.shape[0]
    row_shape = data.probs.shape[1:]

    w, m, v = dict(pw), dict(pm), dict(pv)
    a, b1, b2, eps = hyper.alpha, hyper.beta1, hyper.beta2, hyper.eps
    for t in range(1, T + 1):
        rows = schedule.rows(t)
        flat = ad.reshape(x, (n_rows, int(np.prod(row_shape))))
        x_rows = ad.reshape(ad.gather_rows(flat, rows), (len(rows),) + row_shape)
        loss = loss_fn(w, x_rows, data.mask[rows])
        # the inner gradient only needs cotangents at the current w; stopping
        # there keeps the forward build linear in T (the final meta backward
        # still flows through these nodes into the full history)
        gs = ad.grad(loss, [w[n] for n in names], stop=[w[n] for n in names])
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for n, g in zip(names, gs):
            m[n] = ad.const(b1) * m[n] + ad.const(1.0 - b1) * g
            v[n] = ad.const(b2) * v[n] + ad.const(1.0 - b2) * ad.mul(g, g)
            denom = ad.sqrt(v[n] / ad.const(c2) + ad.const(_V_JITTER)) + ad.const(eps)
            w[n] = w[n] - ad.const(a) * (m[n] / ad.const(c1)) / denom

    meta = meta_fn(w)
    targets = [pw[n] for n in names] + [pm[n] for n in names] + [x]
    gs = ad.grad(meta, targets)
    k = len(names)
    dw0 = ParamVector([(n, gs[i].val.copy()) for i, n in enumerate(names)])
    dm0 = ParamVector([(n, gs[k + i].val.copy()) for i, n in enumerate(names)])
    dx = gs[-1].val.copy()
    return float(meta.val), dw0, dm0, dx


def unrolled_sgd_meta_grads(w0: ParamVector, loss_fn, data, T: int,
                            hyper: SgdHyper, schedule: BatchSchedule, meta_fn):
    """Exact (dw0, dx) through T unrolled heavy-ball SGD steps."""
    names = w0.names
    pw = {n: ad.leaf(a) for n, a in w0.items()}
    x = ad.leaf(data.probs)
    n_rows = data.probs.shape[0]
    row_shape = data.probs.shape[1:]

    w = dict(pw)
    u = {n: ad.const(np.zeros_like(a)) for n, a in w0.items()}
    for t in range(1, T + 1):
        rows = schedule.rows(t)
        flat = ad.reshape(x, (n_rows, int(np.prod(row_shape))))
        x_rows = ad.reshape(ad.gather_rows(flat, rows), (len(rows),) + row_shape)
        loss = loss_fn(w, x_rows, data.mask[rows])
        gs = ad.grad(loss, [w[n] for n in names], stop=[w[n] for n in names])
        for n, g in zip(names, gs):
            u[n] = ad.const(hyper.momentum) * u[n] + g
            w[n] = w[n] - ad.const(hyper.lr) * u[n]

    meta = meta_fn(w)
    gs = ad.grad(meta, [pw[n] for n in names] + [x])
    dw0 = ParamVector([(n, gs[i].val.copy()) for i, n in enumerate(names)])
    return float(meta.val), dw0, gs[-1].val.copy()
