"""Hot elementwise kernels for the forward/reverse optimizer loops.

Each kernel has a numba ``@njit`` variant (loops) and a vectorized numpy
fallback computing the same thing; ``backend.USE_NUMBA`` picks one at
import time. All state is flat float64; callers own the allocation of
output buffers. The square-root update form ``w -= a*mhat/(sqrt(vhat)+eps)``
is used in both directions.
"""

import numpy as np

from .backend import USE_NUMBA, njit_or_plain

__all__ = [
    "adam_forward",
    "adam_reconstruct_w",
    "adam_reverse_mv",
    "adam_dm_accum",
    "sgd_forward",
]


@njit_or_plain
def _adam_forward_loop(w, m, v, g, t, alpha, b1, b2, eps,
                       out_w, out_m, out_v):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(w.shape[0]):
        mi = b1 * m[i] + (1.0 - b1) * g[i]
        vi = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        out_m[i] = mi
        out_v[i] = vi
        out_w[i] = w[i] - alpha * (mi / c1) / (np.sqrt(vi / c2) + eps)


def _adam_forward_numpy(w, m, v, g, t, alpha, b1, b2, eps,
                        out_w, out_m, out_v):
    np.multiply(m, b1, out=out_m)
    out_m += (1.0 - b1) * g
    np.multiply(v, b2, out=out_v)
    out_v += (1.0 - b2) * g * g
    mhat = out_m / (1.0 - b1 ** t)
    vhat = out_v / (1.0 - b2 ** t)
    np.subtract(w, alpha * mhat / (np.sqrt(vhat) + eps), out=out_w)


@njit_or_plain
def _adam_reconstruct_loop(w, m, v, t, alpha, b1, b2, eps, out_w):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i in range(w.shape[0]):
        out_w[i] = w[i] + alpha * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def _adam_reconstruct_numpy(w, m, v, t, alpha, b1, b2, eps, out_w):
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    np.add(w, alpha * mhat / (np.sqrt(vhat) + eps), out=out_w)


@njit_or_plain
def _adam_reverse_mv_loop(m, v, g, b1, b2, out_m, out_v):
    vmin = 0.0
    for i in range(m.shape[0]):
        out_m[i] = (m[i] - (1.0 - b1) * g[i]) / b1
        vi = (v[i] - (1.0 - b2) * g[i] * g[i]) / b2
        if vi < vmin:
            vmin = vi
        if vi < 0.0:
            vi = 0.0
        out_v[i] = vi
    return vmin


def _adam_reverse_mv_numpy(m, v, g, b1, b2, out_m, out_v):
    np.subtract(m, (1.0 - b1) * g, out=out_m)
    out_m /= b1
    np.subtract(v, (1.0 - b2) * g * g, out=out_v)
    out_v /= b2
    vmin = min(0.0, float(out_v.min())) if out_v.size else 0.0
    np.maximum(out_v, 0.0, out=out_v)
    return vmin


@njit_or_plain
def _adam_dm_accum_loop(dm, m, v, g, dw, ap, epsp, bp):
    for i in range(dm.shape[0]):
        sv = np.sqrt(v[i])
        denom = sv + epsp
        if sv > 0.0:
            term = bp * m[i] * g[i] / (sv * denom * denom)
        else:
            term = 0.0  # v=0 implies every past gradient was 0 there
        dm[i] += ap * (term - 1.0 / denom) * dw[i]


def _adam_dm_accum_numpy(dm, m, v, g, dw, ap, epsp, bp):
    sv = np.sqrt(v)
    denom = sv + epsp
    term = np.zeros_like(v)
    nz = sv > 0.0
    term[nz] = bp * m[nz] * g[nz] / (sv[nz] * denom[nz] ** 2)
    dm += ap * (term - 1.0 / denom) * dw


@njit_or_plain
def _sgd_forward_loop(w, u, g, lr, rho, out_w, out_u):
    for i in range(w.shape[0]):
        ui = rho * u[i] + g[i]
        out_u[i] = ui
        out_w[i] = w[i] - lr * ui


def _sgd_forward_numpy(w, u, g, lr, rho, out_w, out_u):
    np.multiply(u, rho, out=out_u)
    out_u += g
    np.subtract(w, lr * out_u, out=out_w)


if USE_NUMBA:
    adam_forward = _adam_forward_loop
    adam_reconstruct_w = _adam_reconstruct_loop
    adam_reverse_mv = _adam_reverse_mv_loop
    adam_dm_accum = _adam_dm_accum_loop
    sgd_forward = _sgd_forward_loop
else:
    adam_forward = _adam_forward_numpy
    adam_reconstruct_w = _adam_reconstruct_numpy
    adam_reverse_mv = _adam_reverse_mv_numpy
    adam_dm_accum = _adam_dm_accum_numpy
    sgd_forward = _sgd_forward_numpy
