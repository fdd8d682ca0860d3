# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sweep recurrence kernel.

Same contract and canonical ``[T, C, N, L]`` layout as ``sdnet._sweep_py``.
The step loop runs without the GIL; the three per-step state convolutions
are single GEMM calls on an im2col buffer.
"""
import numpy as np
from libc.math cimport exp, expf, tanh
from libc.string cimport memset
from scipy.linalg.cython_blas cimport sgemm, dgemm

ctypedef fused real:
    float
    double


cdef inline void _gemm(char ta, char tb, int M, int N, int K, real alpha,
                       real *A, int lda, real *B, int ldb, real beta,
                       real *C, int ldc) noexcept nogil:
    # Row-major C[M,N] = alpha * op(A) @ op(B) + beta * C.
    if real is float:
        sgemm(&tb, &ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)
    else:
        dgemm(&tb, &ta, &N, &M, &K, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


cdef inline void _im2col(real *s, real *col, int C, int N, int L, int k) noexcept nogil:
    cdef int p = (k - 1) // 2
    cdef int i, j, n, l, src
    cdef Py_ssize_t NL = N * L
    cdef real *dst
    cdef real *row
    for i in range(C):
        for j in range(k):
            dst = col + (i * k + j) * NL
            for n in range(N):
                row = s + i * NL + n * L
                for l in range(L):
                    src = l + j - p
                    if src < 0 or src >= L:
                        dst[n * L + l] = 0
                    else:
                        dst[n * L + l] = row[src]


cdef inline void _col2im_add(real *col, real *s, int C, int N, int L, int k) noexcept nogil:
    cdef int p = (k - 1) // 2
    cdef int i, j, n, l, src
    cdef Py_ssize_t NL = N * L
    cdef real *srcrow
    cdef real *row
    for i in range(C):
        for j in range(k):
            srcrow = col + (i * k + j) * NL
            for n in range(N):
                row = s + i * NL + n * L
                for l in range(L):
                    src = l + j - p
                    if src >= 0 and src < L:
                        row[src] += srcrow[n * L + l]


# glibc tanhf is several times slower than expf; in single precision both
# activations go through expf (absolute error ~1e-7).
cdef inline real _sig(real v) noexcept nogil:
    if real is float:
        return 1 / (1 + expf(-v))
    else:
        return 1 / (1 + exp(-v))


cdef inline real _tanh(real v) noexcept nogil:
    if real is float:
        return 2 / (1 + expf(-2 * v)) - 1
    else:
        return tanh(v)


def _forward(real[::1] pre_zr, real[::1] pre_c, real[::1] Kzr, real[::1] Kc,
             real[::1] h, real[::1] zr, real[::1] c,
             int T, int C, int N, int L, int k):
    cdef Py_ssize_t NL = N * L
    cdef Py_ssize_t S = C * NL
    cdef int Ck = C * k
    cdef int t
    cdef Py_ssize_t q
    cdef real hp
    dt = np.float32 if real is float else np.float64
    cdef real[::1] zeros = np.zeros(S, dtype=dt)
    cdef real[::1] col = np.empty(Ck * NL, dtype=dt)
    cdef real[::1] acc = np.empty(2 * S, dtype=dt)
    cdef real[::1] rh = np.empty(S, dtype=dt)
    cdef real *hprev
    cdef real *ht
    cdef real *zrt
    cdef real *ct
    cdef real *pzr
    cdef real *pc
    with nogil:
        for t in range(T):
            hprev = &zeros[0] if t == 0 else &h[(t - 1) * S]
            ht = &h[t * S]
            zrt = &zr[t * 2 * S]
            ct = &c[t * S]
            pzr = &pre_zr[t * 2 * S]
            pc = &pre_c[t * S]
            _im2col(hprev, &col[0], C, N, L, k)
            _gemm(c'N', c'N', 2 * C, <int>NL, Ck, 1, &Kzr[0], Ck, &col[0], <int>NL, 0, &acc[0], <int>NL)
            for q in range(2 * S):
                zrt[q] = _sig(acc[q] + pzr[q])
            for q in range(S):
                rh[q] = zrt[S + q] * hprev[q]
            _im2col(&rh[0], &col[0], C, N, L, k)
            _gemm(c'N', c'N', C, <int>NL, Ck, 1, &Kc[0], Ck, &col[0], <int>NL, 0, &acc[0], <int>NL)
            for q in range(S):
                ct[q] = _tanh(acc[q] + pc[q])
                hp = hprev[q]
                ht[q] = hp + zrt[q] * (ct[q] - hp)


def _backward(real[::1] gh, real[::1] h, real[::1] zr, real[::1] c,
              real[::1] Kzr, real[::1] Kc,
              real[::1] d_pre_zr, real[::1] d_pre_c, real[::1] dKzr, real[::1] dKc,
              int T, int C, int N, int L, int k):
    cdef Py_ssize_t NL = N * L
    cdef Py_ssize_t S = C * NL
    cdef int Ck = C * k
    cdef int t
    cdef Py_ssize_t q
    cdef real dh, z, r, cv, hp, drh
    dt = np.float32 if real is float else np.float64
    cdef real[::1] zeros = np.zeros(S, dtype=dt)
    cdef real[::1] col = np.empty(Ck * NL, dtype=dt)
    cdef real[::1] dcol = np.empty(Ck * NL, dtype=dt)
    cdef real[::1] rh = np.empty(S, dtype=dt)
    cdef real[::1] carry = np.zeros(S, dtype=dt)
    cdef real[::1] drhbuf = np.empty(S, dtype=dt)
    cdef real *hprev
    cdef real *zrt
    cdef real *ct
    cdef real *dzr
    cdef real *dc
    memset(&dKzr[0], 0, 2 * C * Ck * sizeof(real))
    memset(&dKc[0], 0, C * Ck * sizeof(real))
    with nogil:
        for t in range(T - 1, -1, -1):
            hprev = &zeros[0] if t == 0 else &h[(t - 1) * S]
            zrt = &zr[t * 2 * S]
            ct = &c[t * S]
            dzr = &d_pre_zr[t * 2 * S]
            dc = &d_pre_c[t * S]
            for q in range(S):
                dh = gh[t * S + q] + carry[q]
                z = zrt[q]
                cv = ct[q]
                hp = hprev[q]
                dc[q] = dh * z * (1 - cv * cv)
                dzr[q] = dh * (cv - hp) * z * (1 - z)
                carry[q] = dh * (1 - z)
                rh[q] = zrt[S + q] * hp
            # candidate branch
            _im2col(&rh[0], &col[0], C, N, L, k)
            _gemm(c'N', c'T', C, Ck, <int>NL, 1, dc, <int>NL, &col[0], <int>NL, 1, &dKc[0], Ck)
            _gemm(c'T', c'N', Ck, <int>NL, C, 1, &Kc[0], Ck, dc, <int>NL, 0, &dcol[0], <int>NL)
            memset(&drhbuf[0], 0, S * sizeof(real))
            _col2im_add(&dcol[0], &drhbuf[0], C, N, L, k)
            for q in range(S):
                r = zrt[S + q]
                drh = drhbuf[q]
                carry[q] += drh * r
                dzr[S + q] = drh * hprev[q] * r * (1 - r)
            # gate branch
            _im2col(hprev, &col[0], C, N, L, k)
            _gemm(c'N', c'T', 2 * C, Ck, <int>NL, 1, dzr, <int>NL, &col[0], <int>NL, 1, &dKzr[0], Ck)
            _gemm(c'T', c'N', Ck, <int>NL, 2 * C, 1, &Kzr[0], Ck, dzr, <int>NL, 0, &dcol[0], <int>NL)
            _col2im_add(&dcol[0], &carry[0], C, N, L, k)


def forward(pre_zr, pre_c, Kzr, Kc, int k):
    T, C, N, L = pre_c.shape
    dt = pre_c.dtype
    h = np.empty((T, C, N, L), dtype=dt)
    zr = np.empty((T, 2 * C, N, L), dtype=dt)
    c = np.empty((T, C, N, L), dtype=dt)
    args = [np.ascontiguousarray(a, dtype=dt).reshape(-1) for a in (pre_zr, pre_c, Kzr, Kc)]
    _forward(*args, h.reshape(-1), zr.reshape(-1), c.reshape(-1), T, C, N, L, k)
    return h, zr, c


def backward(gh, h, zr, c, Kzr, Kc, int k):
    T, C, N, L = h.shape
    dt = h.dtype
    d_pre_zr = np.empty((T, 2 * C, N, L), dtype=dt)
    d_pre_c = np.empty((T, C, N, L), dtype=dt)
    dKzr = np.empty((2 * C, C * k), dtype=dt)
    dKc = np.empty((C, C * k), dtype=dt)
    args = [np.ascontiguousarray(a, dtype=dt).reshape(-1) for a in (gh, h, zr, c, Kzr, Kc)]
    _backward(*args, d_pre_zr.reshape(-1), d_pre_c.reshape(-1), dKzr.reshape(-1),
              dKc.reshape(-1), T, C, N, L, k)
    return d_pre_zr, d_pre_c, dKzr, dKc
