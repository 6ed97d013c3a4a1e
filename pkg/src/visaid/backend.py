"""Hot numeric kernels in two interchangeable lanes: numba-jitted loops and pure numpy.

The attention core and layer norm (forward and backward) dominate a training
step at desk scale, so they get fused kernels. Lane selection is controlled by
the ``VISAID_NUMBA`` environment variable:

  * unset / ``auto`` -- use numba when importable, else numpy
  * ``0`` / ``off``  -- force the pure-numpy lane
  * ``1`` / ``on``   -- require numba (ImportError if missing)

Both lanes implement identical math; they may differ by float rounding only.
``benchmarks/bench_kernels.py`` compares their throughput.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "active_lane",
    "attn_core_forward",
    "attn_core_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "IMPLEMENTATIONS",
]


# ---------------------------------------------------------------------------
# pure-numpy lane
# ---------------------------------------------------------------------------

def _np_attn_core_forward(q, k, v, mask, scale):
    """softmax(mask(Q K^T * scale)) V for a stack of heads.

    q: (H, n, dh), k/v: (H, m, dh), mask: (n, m) bool with True = visible.
    Returns (ctx (H, n, dh), attn (H, n, m)); masked columns carry exact zeros.
    """
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    scores = np.where(mask[None, :, :], scores, -np.inf)
    peak = scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores - peak)
    attn = weights / weights.sum(axis=-1, keepdims=True)
    ctx = np.matmul(attn, v)
    return ctx, attn


def _np_attn_core_backward(dctx, q, k, v, attn, scale):
    """Gradients of the fused attention core w.r.t. q, k, v.

    Masked positions have attn == 0 exactly, which zeroes their gradient paths.
    """
    dv = np.matmul(attn.transpose(0, 2, 1), dctx)
    dattn = np.matmul(dctx, v.transpose(0, 2, 1))
    tmp = dattn * attn
    dscores = tmp - attn * tmp.sum(axis=-1, keepdims=True)
    dq = np.matmul(dscores, k) * scale
    dk = np.matmul(dscores.transpose(0, 2, 1), q) * scale
    return dq, dk, dv


def _np_layer_norm_forward(x, gain, bias, eps):
    """Row-wise layer norm. x: (n, d). Returns (y, mean (n,), rstd (n,))."""
    mean = x.mean(axis=-1, keepdims=True)
    var = np.square(x - mean).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * rstd * gain + bias
    return y, mean[:, 0], rstd[:, 0]


def _np_layer_norm_backward(dy, x, gain, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# numba lane
# ---------------------------------------------------------------------------

def _build_numba_lane():
    from numba import njit

    @njit(cache=True)
    def attn_fwd(q, k, v, mask, scale):
        heads, n, dh = q.shape
        m = k.shape[1]
        ctx = np.zeros((heads, n, dh), dtype=q.dtype)
        attn = np.zeros((heads, n, m), dtype=q.dtype)
        for h in range(heads):
            for i in range(n):
                peak = -np.inf
                for j in range(m):
                    if mask[i, j]:
                        s = 0.0
                        for t in range(dh):
                            s += q[h, i, t] * k[h, j, t]
                        s *= scale
                        attn[h, i, j] = s
                        if s > peak:
                            peak = s
                z = 0.0
                for j in range(m):
                    if mask[i, j]:
                        e = np.exp(attn[h, i, j] - peak)
                        attn[h, i, j] = e
                        z += e
                inv = 1.0 / z
                for j in range(m):
                    if mask[i, j]:
                        a = attn[h, i, j] * inv
                        attn[h, i, j] = a
                        for t in range(dh):
                            ctx[h, i, t] += a * v[h, j, t]
        return ctx, attn

    @njit(cache=True)
    def attn_bwd(dctx, q, k, v, attn, scale):
        heads, n, dh = q.shape
        m = k.shape[1]
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        for h in range(heads):
            for i in range(n):
                # masked positions carry attn == 0 exactly, so skipping them is exact
                row_dot = 0.0
                for j in range(m):
                    a = attn[h, i, j]
                    if a != 0.0:
                        da = 0.0
                        for t in range(dh):
                            da += dctx[h, i, t] * v[h, j, t]
                            dv[h, j, t] += a * dctx[h, i, t]
                        row_dot += da * a
                for j in range(m):
                    a = attn[h, i, j]
                    if a != 0.0:
                        da = 0.0
                        for t in range(dh):
                            da += dctx[h, i, t] * v[h, j, t]
                        ds = a * (da - row_dot) * scale
                        for t in range(dh):
                            dq[h, i, t] += ds * k[h, j, t]
                            dk[h, j, t] += ds * q[h, i, t]
        return dq, dk, dv

    @njit(cache=True)
    def ln_fwd(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        mean = np.empty(n, dtype=x.dtype)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mu
                var += diff * diff
            var /= d
            r = 1.0 / np.sqrt(var + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
        return y, mean, rstd

    @njit(cache=True)
    def ln_bwd(dy, x, gain, mean, rstd):
        n, d = x.shape
        dx = np.empty_like(x)
        dgain = np.zeros(d, dtype=x.dtype)
        dbias = np.zeros(d, dtype=x.dtype)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xhat = (x[i, j] - mean[i]) * rstd[i]
                dxh = dy[i, j] * gain[j]
                m1 += dxh
                m2 += dxh * xhat
                dgain[j] += dy[i, j] * xhat
                dbias[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                xhat = (x[i, j] - mean[i]) * rstd[i]
                dxh = dy[i, j] * gain[j]
                dx[i, j] = (dxh - m1 - xhat * m2) * rstd[i]
        return dx, dgain, dbias

    return {
        "attn_core_forward": attn_fwd,
        "attn_core_backward": attn_bwd,
        "layer_norm_forward": ln_fwd,
        "layer_norm_backward": ln_bwd,
    }


_NUMPY_LANE = {
    "attn_core_forward": _np_attn_core_forward,
    "attn_core_backward": _np_attn_core_backward,
    "layer_norm_forward": _np_layer_norm_forward,
    "layer_norm_backward": _np_layer_norm_backward,
}

IMPLEMENTATIONS: dict[str, dict | None] = {"numpy": _NUMPY_LANE, "numba": None}


def _select_lane() -> str:
    flag = os.environ.get("VISAID_NUMBA", "auto").strip().lower()
    if flag in ("0", "off", "false", "no"):
        return "numpy"
    if flag in ("1", "on", "true", "yes"):
        IMPLEMENTATIONS["numba"] = _build_numba_lane()
        return "numba"
    try:
        IMPLEMENTATIONS["numba"] = _build_numba_lane()
        return "numba"
    except ImportError:
        return "numpy"


_LANE = _select_lane()
_ACTIVE = IMPLEMENTATIONS[_LANE]


def active_lane() -> str:
    return _LANE


def numba_lane() -> dict | None:
    """The numba kernel set, building it on demand (None if unavailable)."""
    if IMPLEMENTATIONS["numba"] is None:
        try:
            IMPLEMENTATIONS["numba"] = _build_numba_lane()
        except ImportError:
            return None
    return IMPLEMENTATIONS["numba"]


def attn_core_forward(q, k, v, mask, scale):
    return _ACTIVE["attn_core_forward"](q, k, v, mask, scale)


def attn_core_backward(dctx, q, k, v, attn, scale):
    return _ACTIVE["attn_core_backward"](dctx, q, k, v, attn, scale)


def layer_norm_forward(x, gain, bias, eps):
    return _ACTIVE["layer_norm_forward"](x, gain, bias, eps)


def layer_norm_backward(dy, x, gain, mean, rstd):
    return _ACTIVE["layer_norm_backward"](dy, x, gain, mean, rstd)
