# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence (same contract as eend._kernels_py).

The per-step matrix products go through BLAS; the gate nonlinearities are
written as flat loops over raw pointers so the compiler can vectorize the
``exp`` calls. Arguments to ``exp`` are clamped to +-40, where sigmoid and
tanh are already saturated to working precision, so no infinities appear.
"""
import numpy as np

from cython cimport floating
from libc.math cimport exp, expf
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm, sgemm


cdef inline floating _clamp(floating x) noexcept nogil:
    return 40 if x > 40 else (-40 if x < -40 else x)


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is double:
        return exp(x)
    else:
        return expf(x)


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k, floating *a, int lda,
                       floating *b, int ldb, floating beta, floating *c, int ldc) noexcept nogil:
    cdef floating one = 1
    if floating is double:
        dgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        sgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


cdef void _sigmoid(floating *src, floating *dst, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(n):
        dst[j] = 1 / (1 + _exp(-_clamp(src[j])))


cdef void _tanh(floating *src, floating *dst, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(n):
        dst[j] = 2 / (1 + _exp(-2 * _clamp(src[j]))) - 1


def lstm_forward(floating[:, :, ::1] gates_in, floating[:, ::1] w_hh,
                 floating[:, ::1] h0, floating[:, ::1] c0):
    cdef Py_ssize_t B = gates_in.shape[0], T = gates_in.shape[1], D = gates_in.shape[2] // 4
    cdef Py_ssize_t G = 4 * D
    dtype = np.float64 if floating is double else np.float32
    hs_arr = np.empty((B, T, D), dtype=dtype)
    cs_arr = np.empty((B, T, D), dtype=dtype)
    acts_arr = np.empty((B, T, G), dtype=dtype)
    z_arr = np.empty((B, G), dtype=dtype)
    h_arr = np.array(h0, dtype=dtype, copy=True)
    tc_arr = np.empty(D, dtype=dtype)
    wt_arr = np.ascontiguousarray(np.asarray(w_hh).T)
    cdef floating[:, ::1] w_t = wt_arr
    cdef floating[:, :, ::1] hs = hs_arr
    cdef floating[:, :, ::1] cs = cs_arr
    cdef floating[:, :, ::1] acts = acts_arr
    cdef floating[:, ::1] z = z_arr
    cdef floating[:, ::1] h = h_arr
    cdef floating[::1] tc_buf = tc_arr
    cdef floating *a
    cdef floating *zp
    cdef floating *cp
    cdef floating *cprev
    cdef floating *hp
    cdef floating *tc = &tc_buf[0]
    cdef Py_ssize_t b, t, j
    cdef char *no = b"N"
    with nogil:
        for t in range(T):
            for b in range(B):
                memcpy(&z[b, 0], &gates_in[b, t, 0], G * sizeof(floating))
            # z (B x 4D, row-major) += h (B x D) @ w_hh^T
            _gemm(no, no, <int>G, <int>B, <int>D, &w_t[0, 0], <int>G,
                  &h[0, 0], <int>D, <floating>1, &z[0, 0], <int>G)
            for b in range(B):
                a = &acts[b, t, 0]
                zp = &z[b, 0]
                _sigmoid(zp, a, 2 * D)
                _tanh(zp + 2 * D, a + 2 * D, D)
                _sigmoid(zp + 3 * D, a + 3 * D, D)
                cp = &cs[b, t, 0]
                cprev = &cs[b, t - 1, 0] if t > 0 else &c0[b, 0]
                for j in range(D):
                    cp[j] = a[D + j] * cprev[j] + a[j] * a[2 * D + j]
                _tanh(cp, tc, D)
                hp = &hs[b, t, 0]
                for j in range(D):
                    hp[j] = a[3 * D + j] * tc[j]
                memcpy(&h[b, 0], hp, D * sizeof(floating))
    return hs_arr, cs_arr, acts_arr


def lstm_backward(floating[:, :, ::1] dh_seq, floating[:, ::1] dh_last, floating[:, ::1] dc_last,
                  floating[:, ::1] w_hh, floating[:, ::1] h0, floating[:, ::1] c0,
                  floating[:, :, ::1] cs, floating[:, :, ::1] acts):
    cdef Py_ssize_t B = cs.shape[0], T = cs.shape[1], D = cs.shape[2]
    cdef Py_ssize_t G = 4 * D
    dtype = np.float64 if floating is double else np.float32
    dgates_arr = np.empty((B, T, G), dtype=dtype)
    dh_arr = np.array(dh_last, dtype=dtype, copy=True)
    dc_arr = np.array(dc_last, dtype=dtype, copy=True)
    tc_arr = np.empty(D, dtype=dtype)
    cdef floating[:, :, ::1] dgates = dgates_arr
    cdef floating[:, ::1] dh_next = dh_arr
    cdef floating[:, ::1] dc_next = dc_arr
    cdef floating[::1] tc_buf = tc_arr
    cdef floating *tc = &tc_buf[0]
    cdef floating *a
    cdef floating *dz
    cdef floating *cprev
    cdef floating *dhs
    cdef floating *dhn
    cdef floating *dcn
    cdef Py_ssize_t b, t, j
    cdef floating dh, dc
    cdef char *no = b"N"
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                a = &acts[b, t, 0]
                dz = &dgates[b, t, 0]
                cprev = &cs[b, t - 1, 0] if t > 0 else &c0[b, 0]
                dhs = &dh_seq[b, t, 0]
                dhn = &dh_next[b, 0]
                dcn = &dc_next[b, 0]
                _tanh(&cs[b, t, 0], tc, D)
                for j in range(D):
                    dh = dhs[j] + dhn[j]
                    dc = dcn[j] + dh * a[3 * D + j] * (1 - tc[j] * tc[j])
                    dz[j] = dc * a[2 * D + j] * a[j] * (1 - a[j])
                    dz[D + j] = dc * cprev[j] * a[D + j] * (1 - a[D + j])
                    dz[2 * D + j] = dc * a[j] * (1 - a[2 * D + j] * a[2 * D + j])
                    dz[3 * D + j] = dh * tc[j] * a[3 * D + j] * (1 - a[3 * D + j])
                    dcn[j] = dc * a[D + j]
            # dh_next (B x D) = dgates[:, t] (B x 4D) @ w_hh (4D x D)
            _gemm(no, no, <int>D, <int>B, <int>G, &w_hh[0, 0], <int>D,
                  &dgates[0, t, 0], <int>(G * T), <floating>0, &dh_next[0, 0], <int>D)
    return dgates_arr, dh_arr, dc_arr
