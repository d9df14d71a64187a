"""Hot inner loops: GRU recurrence and interval scoring.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin with
identical arithmetic.  The numba path is used when numba imports cleanly and
the environment variable ``TGALOC_DISABLE_NUMBA`` is unset (or ``0``).  The
flag only selects the implementation; it is read once at import time.

The GRU dispatchers always take the numpy path: the recurrence is dominated
by BLAS products and vectorized tanh, and numba's scalar tanh is far slower
(see benchmarks/bench_kernels.py).  The numba GRU twins stay for the benchmark
and the cross-backend tests.
"""

import os

import numpy as np

_disabled = os.environ.get("TGALOC_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by TGALOC_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def _sigmoid(x):
    # tanh form avoids exp overflow warnings for large negative inputs
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# GRU recurrence over a batch of equal-length sequences.
#
# xz, xr, xh hold the input projections W x_t + b for every step, shape
# (L, B, T).  Hidden state starts at zero.
# ---------------------------------------------------------------------------


def gru_forward_np(xz, xr, xh, Uz, Ur, Uh):
    L, B, T = xz.shape
    hs = np.zeros((L + 1, B, T), dtype=xz.dtype)
    zs = np.empty_like(xz)
    rs = np.empty_like(xz)
    cs = np.empty_like(xz)
    for t in range(L):
        h = hs[t]
        z = _sigmoid(xz[t] + h @ Uz.T)
        r = _sigmoid(xr[t] + h @ Ur.T)
        c = np.tanh(xh[t] + (r * h) @ Uh.T)
        hs[t + 1] = (1.0 - z) * h + z * c
        zs[t] = z
        rs[t] = r
        cs[t] = c
    return hs, zs, rs, cs


def gru_backward_np(dh_last, hs, zs, rs, cs, Uz, Ur, Uh):
    L, B, T = zs.shape
    dxz = np.empty_like(zs)
    dxr = np.empty_like(zs)
    dxh = np.empty_like(zs)
    dUz = np.zeros_like(Uz)
    dUr = np.zeros_like(Ur)
    dUh = np.zeros_like(Uh)
    dh = dh_last.copy()
    for t in range(L - 1, -1, -1):
        h_prev = hs[t]
        z, r, c = zs[t], rs[t], cs[t]
        dz = dh * (c - h_prev)
        dc = dh * z
        dh_prev = dh * (1.0 - z)

        dac = dc * (1.0 - c * c)
        dxh[t] = dac
        rh = r * h_prev
        dUh += dac.T @ rh
        drh = dac @ Uh
        dr = drh * h_prev
        dh_prev += drh * r

        daz = dz * z * (1.0 - z)
        dxz[t] = daz
        dUz += daz.T @ h_prev
        dh_prev += daz @ Uz

        dar = dr * r * (1.0 - r)
        dxr[t] = dar
        dUr += dar.T @ h_prev
        dh_prev += dar @ Ur

        dh = dh_prev
    return dxz, dxr, dxh, dUz, dUr, dUh


# ---------------------------------------------------------------------------
# Interval scoring and IoU
# ---------------------------------------------------------------------------


def interval_scores_np(weights, starts, ends, use_sum):
    out = np.empty(starts.shape[0], dtype=np.float64)
    for i in range(starts.shape[0]):
        s = 0.0
        for k in range(starts[i], ends[i]):
            s += weights[k]
        out[i] = s if use_sum else s / (ends[i] - starts[i])
    return out


def interval_iou_np(starts, ends, gt_start, gt_end):
    inter = np.clip(np.minimum(ends, gt_end) - np.maximum(starts, gt_start), 0, None)
    union = np.maximum(ends, gt_end) - np.minimum(starts, gt_start)
    return inter.astype(np.float64) / union.astype(np.float64)


if HAS_NUMBA:

    @njit(cache=True)
    def _sigmoid_nb(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    @njit(cache=True)
    def gru_forward_nb(xz, xr, xh, Uz, Ur, Uh):
        L, B, T = xz.shape
        hs = np.zeros((L + 1, B, T), dtype=xz.dtype)
        zs = np.empty_like(xz)
        rs = np.empty_like(xz)
        cs = np.empty_like(xz)
        UzT = np.ascontiguousarray(Uz.T)
        UrT = np.ascontiguousarray(Ur.T)
        UhT = np.ascontiguousarray(Uh.T)
        rh = np.empty((B, T), dtype=xz.dtype)
        for t in range(L):
            h = hs[t]
            hz = np.dot(h, UzT)
            hr = np.dot(h, UrT)
            for b in range(B):
                for j in range(T):
                    z = _sigmoid_nb(xz[t, b, j] + hz[b, j])
                    r = _sigmoid_nb(xr[t, b, j] + hr[b, j])
                    zs[t, b, j] = z
                    rs[t, b, j] = r
                    rh[b, j] = r * h[b, j]
            hc = np.dot(rh, UhT)
            for b in range(B):
                for j in range(T):
                    c = np.tanh(xh[t, b, j] + hc[b, j])
                    cs[t, b, j] = c
                    z = zs[t, b, j]
                    hs[t + 1, b, j] = (1.0 - z) * h[b, j] + z * c
        return hs, zs, rs, cs

    @njit(cache=True)
    def gru_backward_nb(dh_last, hs, zs, rs, cs, Uz, Ur, Uh):
        L, B, T = zs.shape
        dxz = np.empty_like(zs)
        dxr = np.empty_like(zs)
        dxh = np.empty_like(zs)
        dUz = np.zeros_like(Uz)
        dUr = np.zeros_like(Ur)
        dUh = np.zeros_like(Uh)
        dh = dh_last.copy()
        dac = np.empty((B, T), dtype=zs.dtype)
        daz = np.empty((B, T), dtype=zs.dtype)
        dar = np.empty((B, T), dtype=zs.dtype)
        rh = np.empty((B, T), dtype=zs.dtype)
        dh_prev = np.empty((B, T), dtype=zs.dtype)
        for t in range(L - 1, -1, -1):
            h_prev = hs[t]
            for b in range(B):
                for j in range(T):
                    z = zs[t, b, j]
                    c = cs[t, b, j]
                    g = dh[b, j]
                    daz[b, j] = g * (c - h_prev[b, j]) * z * (1.0 - z)
                    dac[b, j] = g * z * (1.0 - c * c)
                    dh_prev[b, j] = g * (1.0 - z)
                    rh[b, j] = rs[t, b, j] * h_prev[b, j]
            dxh[t] = dac
            dxz[t] = daz
            dUh += np.dot(dac.T, rh)
            drh = np.dot(dac, Uh)
            for b in range(B):
                for j in range(T):
                    r = rs[t, b, j]
                    dh_prev[b, j] += drh[b, j] * r
                    dar[b, j] = drh[b, j] * h_prev[b, j] * r * (1.0 - r)
            dxr[t] = dar
            dUz += np.dot(daz.T, h_prev)
            dUr += np.dot(dar.T, h_prev)
            dh_prev += np.dot(daz, Uz)
            dh_prev += np.dot(dar, Ur)
            dh[:, :] = dh_prev
        return dxz, dxr, dxh, dUz, dUr, dUh

    @njit(cache=True)
    def interval_scores_nb(weights, starts, ends, use_sum):
        out = np.empty(starts.shape[0], dtype=np.float64)
        for i in range(starts.shape[0]):
            s = 0.0
            for k in range(starts[i], ends[i]):
                s += weights[k]
            out[i] = s if use_sum else s / (ends[i] - starts[i])
        return out

    @njit(cache=True)
    def interval_iou_nb(starts, ends, gt_start, gt_end):
        n = starts.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            inter = min(ends[i], gt_end) - max(starts[i], gt_start)
            if inter < 0:
                inter = 0
            union = max(ends[i], gt_end) - min(starts[i], gt_start)
            out[i] = inter / union
        return out


def gru_forward(xz, xr, xh, Uz, Ur, Uh):
    """Run the GRU recurrence; returns ``(hs, zs, rs, cs)`` caches."""
    return gru_forward_np(xz, xr, xh, Uz, Ur, Uh)


def gru_backward(dh_last, hs, zs, rs, cs, Uz, Ur, Uh):
    """Backprop through time; returns input-projection and recurrent grads."""
    return gru_backward_np(dh_last, hs, zs, rs, cs, Uz, Ur, Uh)


def interval_scores(weights, starts, ends, use_sum=False):
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    ends = np.ascontiguousarray(ends, dtype=np.int64)
    if HAS_NUMBA:
        return interval_scores_nb(weights, starts, ends, bool(use_sum))
    return interval_scores_np(weights, starts, ends, bool(use_sum))


def interval_iou(starts, ends, gt_start, gt_end):
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    ends = np.ascontiguousarray(ends, dtype=np.int64)
    if HAS_NUMBA:
        return interval_iou_nb(starts, ends, int(gt_start), int(gt_end))
    return interval_iou_np(starts, ends, int(gt_start), int(gt_end))
