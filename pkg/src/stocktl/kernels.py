"""LSTM recursion kernels.

Each kernel exists twice: a batched numpy implementation that loops over
time only, and a numba-compiled version that keeps the per-step matrix
product in BLAS and runs the gate algebra as explicit loops.  The compiled
forward/backward pair is used unless ``STOCKTL_DISABLE_NUMBA`` is set (or
numba is not importable).  Feature extraction always takes the numpy path:
on large chunks numpy's vectorized exp/tanh beat numba's scalar calls
(see ``benchmarks/bench_kernels.py``).  Both follow the same gate layout ``[input, forget, output,
candidate]`` along the 4H axis.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_requested():
    flag = os.environ.get("STOCKTL_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


USE_NUMBA = numba is not None and _numba_requested()


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def lstm_forward_numpy(x, wx, wh, b):
    """Batched forward pass that keeps every activation for BPTT.

    Parameters
    ----------
    x : (N, T) array
    wx : (4H, 1) array
    wh : (4H, H) array
    b : (4H,) array

    Returns
    -------
    hs, cs : (T+1, N, H) arrays, index 0 holds the zero initial state
    acts : (T, N, 4H) array of post-nonlinearity gate values
    """
    n, steps = x.shape
    hidden = wh.shape[1]
    h3 = 3 * hidden
    hs = np.zeros((steps + 1, n, hidden))
    cs = np.zeros((steps + 1, n, hidden))
    acts = np.empty((steps, n, 4 * hidden))
    wx_row = wx[:, 0]
    wh_t = wh.T
    for t in range(steps):
        z = np.outer(x[:, t], wx_row) + hs[t] @ wh_t + b
        a = acts[t]
        a[:, :h3] = _sigmoid(z[:, :h3])
        a[:, h3:] = np.tanh(z[:, h3:])
        c = a[:, hidden:2 * hidden] * cs[t] + a[:, :hidden] * a[:, h3:]
        cs[t + 1] = c
        hs[t + 1] = a[:, 2 * hidden:h3] * np.tanh(c)
    return hs, cs, acts


def lstm_backward_numpy(x, wh, hs, cs, acts, dh_last):
    """Backpropagation through time from a gradient on the final hidden state.

    Returns ``(dwx, dwh, db)`` summed over the batch.
    """
    n, steps = x.shape
    hidden = wh.shape[1]
    h3 = 3 * hidden
    dwx = np.zeros((4 * hidden, 1))
    dwh = np.zeros((4 * hidden, hidden))
    db = np.zeros(4 * hidden)
    dh = np.array(dh_last, dtype=np.float64, copy=True)
    dc = np.zeros((n, hidden))
    dz = np.empty((n, 4 * hidden))
    for t in range(steps - 1, -1, -1):
        a = acts[t]
        i = a[:, :hidden]
        f = a[:, hidden:2 * hidden]
        o = a[:, 2 * hidden:h3]
        g = a[:, h3:]
        tc = np.tanh(cs[t + 1])
        dc = dc + dh * o * (1.0 - tc * tc)
        dz[:, :hidden] = dc * g * i * (1.0 - i)
        dz[:, hidden:2 * hidden] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * hidden:h3] = dh * tc * o * (1.0 - o)
        dz[:, h3:] = dc * i * (1.0 - g * g)
        dwx[:, 0] += dz.T @ x[:, t]
        dwh += dz.T @ hs[t]
        db += dz.sum(axis=0)
        dh = dz @ wh
        dc = dc * f
    return dwx, dwh, db


def lstm_final_state_numpy(x, wx, wh, b, chunk=4096):
    """Final hidden state only, processed in sample chunks to bound memory."""
    n, steps = x.shape
    hidden = wh.shape[1]
    h3 = 3 * hidden
    out = np.empty((n, hidden))
    wx_row = wx[:, 0]
    wh_t = wh.T
    for start in range(0, n, chunk):
        xb = x[start:start + chunk]
        h = np.zeros((xb.shape[0], hidden))
        c = np.zeros_like(h)
        for t in range(steps):
            z = np.outer(xb[:, t], wx_row) + h @ wh_t + b
            s = _sigmoid(z[:, :h3])
            g = np.tanh(z[:, h3:])
            c = s[:, hidden:2 * hidden] * c + s[:, :hidden] * g
            h = s[:, 2 * hidden:h3] * np.tanh(c)
        out[start:start + chunk] = h
    return out


# ---------------------------------------------------------------------------
# numba path: one BLAS call per step for the recurrent product, explicit
# loops for the elementwise gate algebra
# ---------------------------------------------------------------------------

def _gate_step(x_col, z, b, wx, c_prev, a, c_out, h_out):
    n = z.shape[0]
    hidden = c_prev.shape[1]
    h3 = 3 * hidden
    for s in range(n):
        xt = x_col[s]
        for r in range(h3):
            a[s, r] = 1.0 / (1.0 + np.exp(-(z[s, r] + b[r] + wx[r, 0] * xt)))
        for r in range(h3, 4 * hidden):
            a[s, r] = np.tanh(z[s, r] + b[r] + wx[r, 0] * xt)
        for k in range(hidden):
            c = a[s, hidden + k] * c_prev[s, k] + a[s, k] * a[s, h3 + k]
            c_out[s, k] = c
            h_out[s, k] = a[s, 2 * hidden + k] * np.tanh(c)


def _lstm_forward_hybrid(x, wx, wh, b):
    n, steps = x.shape
    hidden = wh.shape[1]
    hs = np.zeros((steps + 1, n, hidden))
    cs = np.zeros((steps + 1, n, hidden))
    acts = np.empty((steps, n, 4 * hidden))
    wh_t = np.ascontiguousarray(wh.T)
    xt = np.ascontiguousarray(x.T)
    for t in range(steps):
        z = np.dot(hs[t], wh_t)
        _gate_step(xt[t], z, b, wx, cs[t], acts[t], cs[t + 1], hs[t + 1])
    return hs, cs, acts


def _gate_grad_step(a, c_prev, c_cur, dh, dc, dz):
    n = a.shape[0]
    hidden = c_prev.shape[1]
    h3 = 3 * hidden
    for s in range(n):
        for k in range(hidden):
            i = a[s, k]
            f = a[s, hidden + k]
            o = a[s, 2 * hidden + k]
            g = a[s, h3 + k]
            tc = np.tanh(c_cur[s, k])
            dck = dc[s, k] + dh[s, k] * o * (1.0 - tc * tc)
            dz[s, k] = dck * g * i * (1.0 - i)
            dz[s, hidden + k] = dck * c_prev[s, k] * f * (1.0 - f)
            dz[s, 2 * hidden + k] = dh[s, k] * tc * o * (1.0 - o)
            dz[s, h3 + k] = dck * i * (1.0 - g * g)
            dc[s, k] = dck * f


def _lstm_backward_hybrid(x, wh, hs, cs, acts, dh_last):
    n, steps = x.shape
    hidden = wh.shape[1]
    g4 = 4 * hidden
    dwx = np.zeros((g4, 1))
    dwh = np.zeros((g4, hidden))
    db = np.zeros(g4)
    dh = dh_last.copy()
    dc = np.zeros((n, hidden))
    dz = np.empty((n, g4))
    xt = np.ascontiguousarray(x.T)
    for t in range(steps - 1, -1, -1):
        _gate_grad_step(acts[t], cs[t], cs[t + 1], dh, dc, dz)
        dz_t = np.ascontiguousarray(dz.T)
        dwx[:, 0] += np.dot(dz_t, xt[t])
        dwh += np.dot(dz_t, hs[t])
        for r in range(g4):
            acc = 0.0
            for s in range(n):
                acc += dz[s, r]
            db[r] += acc
        dh = np.dot(dz, wh)
    return dwx, dwh, db


def _lstm_final_state_hybrid(x, wx, wh, b):
    n, steps = x.shape
    hidden = wh.shape[1]
    out = np.empty((n, hidden))
    wh_t = np.ascontiguousarray(wh.T)
    chunk = 4096
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        xt = np.ascontiguousarray(x[start:stop].T)
        m = stop - start
        h = np.zeros((m, hidden))
        c = np.zeros((m, hidden))
        h_new = np.empty((m, hidden))
        c_new = np.empty((m, hidden))
        a = np.empty((m, 4 * hidden))
        for t in range(steps):
            z = np.dot(h, wh_t)
            _gate_step(xt[t], z, b, wx, c, a, c_new, h_new)
            h, h_new = h_new, h
            c, c_new = c_new, c
        out[start:stop] = h
    return out


if numba is not None:
    _jit_elementwise = numba.njit(cache=True, fastmath=True, error_model="numpy")
    _gate_step = _jit_elementwise(_gate_step)
    _gate_grad_step = _jit_elementwise(_gate_grad_step)
    lstm_forward_numba = numba.njit(cache=True)(_lstm_forward_hybrid)
    lstm_backward_numba = numba.njit(cache=True)(_lstm_backward_hybrid)
    lstm_final_state_numba = numba.njit(cache=True)(_lstm_final_state_hybrid)
else:  # pragma: no cover
    lstm_forward_numba = lstm_backward_numba = lstm_final_state_numba = None


def _contig(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def lstm_forward(x, wx, wh, b):
    x, wx, wh, b = _contig(np.atleast_2d(x), wx, wh, b)
    if USE_NUMBA:
        return lstm_forward_numba(x, wx, wh, b)
    return lstm_forward_numpy(x, wx, wh, b)


def lstm_backward(x, wh, hs, cs, acts, dh_last):
    x, wh, dh_last = _contig(np.atleast_2d(x), wh, np.atleast_2d(dh_last))
    if USE_NUMBA:
        return lstm_backward_numba(x, wh, hs, cs, acts, dh_last)
    return lstm_backward_numpy(x, wh, hs, cs, acts, dh_last)


def lstm_final_state(x, wx, wh, b):
    x, wx, wh, b = _contig(np.atleast_2d(x), wx, wh, b)
    return lstm_final_state_numpy(x, wx, wh, b)
