"""Pure-numpy sweep recurrence kernel (fallback for ``_sweep_ext``).

Both kernels share one contract.  Arrays use the canonical layout
``[T, C, N, L]``: ``T`` steps along the sweep, ``C`` state channels, ``N``
batch, ``L`` positions across the sweep.

forward(pre_zr, pre_c, Kzr, Kc, k) -> (h, zr, c)
    pre_zr  [T, 2C, N, L]  input contributions to update/reset gates
    pre_c   [T, C, N, L]   input contribution to the candidate
    Kzr     [2C, C*k]      stacked state kernels of update and reset gates
    Kc      [C, C*k]       state kernel of the candidate

backward(gh, h, zr, c, Kzr, Kc, k) -> (d_pre_zr, d_pre_c, dKzr, dKc)
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(s: np.ndarray, k: int) -> np.ndarray:
    # s: [C, N, L] -> [C*k, N*L]
    c, n, L = s.shape
    p = (k - 1) // 2
    sp = np.pad(s, ((0, 0), (0, 0), (p, p)))
    win = sliding_window_view(sp, k, axis=2)  # C,N,L,k
    return np.ascontiguousarray(win.transpose(0, 3, 1, 2)).reshape(c * k, n * L)


def _col2im(cols: np.ndarray, c: int, n: int, L: int, k: int) -> np.ndarray:
    p = (k - 1) // 2
    cols = cols.reshape(c, k, n, L)
    out = np.zeros((c, n, L + 2 * p), dtype=cols.dtype)
    for j in range(k):
        out[:, :, j:j + L] += cols[:, j]
    return out[:, :, p:p + L]


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def forward(pre_zr, pre_c, Kzr, Kc, k):
    T, C, N, L = pre_c.shape
    dtype = pre_c.dtype
    h = np.empty((T, C, N, L), dtype=dtype)
    zr = np.empty((T, 2 * C, N, L), dtype=dtype)
    c = np.empty((T, C, N, L), dtype=dtype)
    hprev = np.zeros((C, N, L), dtype=dtype)
    for t in range(T):
        a = (Kzr @ _im2col(hprev, k)).reshape(2 * C, N, L)
        g = _sigmoid(a + pre_zr[t])
        zr[t] = g
        z, r = g[:C], g[C:]
        b = (Kc @ _im2col(r * hprev, k)).reshape(C, N, L)
        ct = np.tanh(b + pre_c[t])
        c[t] = ct
        hprev = h[t] = hprev + z * (ct - hprev)
    return h, zr, c


def backward(gh, h, zr, c, Kzr, Kc, k):
    T, C, N, L = h.shape
    dtype = h.dtype
    d_pre_zr = np.empty_like(zr)
    d_pre_c = np.empty_like(c)
    dKzr = np.zeros_like(Kzr)
    dKc = np.zeros_like(Kc)
    carry = np.zeros((C, N, L), dtype=dtype)
    zeros = np.zeros((C, N, L), dtype=dtype)
    for t in range(T - 1, -1, -1):
        dh = gh[t] + carry
        hprev = h[t - 1] if t > 0 else zeros
        z, r = zr[t, :C], zr[t, C:]
        ct = c[t]
        dz = dh * (ct - hprev)
        dcp = dh * z * (1 - ct * ct)
        dhp = dh * (1 - z)
        d_pre_c[t] = dcp
        dcp2 = dcp.reshape(C, N * L)
        dKc += dcp2 @ _im2col(r * hprev, k).T
        drh = _col2im(Kc.T @ dcp2, C, N, L, k)
        dhp += drh * r
        dzr = d_pre_zr[t]
        dzr[:C] = dz * z * (1 - z)
        dzr[C:] = drh * hprev * r * (1 - r)
        dzr2 = dzr.reshape(2 * C, N * L)
        dKzr += dzr2 @ _im2col(hprev, k).T
        dhp += _col2im(Kzr.T @ dzr2, C, N, L, k)
        carry = dhp
    return d_pre_zr, d_pre_c, dKzr, dKc
