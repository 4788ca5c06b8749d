# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: blocked attention, blocked anchor scores,
nearest-centroid assignment.  Mirrors antkv.kernels.pure."""

import numpy as np

from libc.math cimport exp, INFINITY


def flash_aux(object Qs_in, object Kr_in, object V_in,
              int block_q, int block_k, bint causal):
    cdef double[:, ::1] Qs = np.ascontiguousarray(Qs_in, dtype=np.float64)
    cdef double[:, ::1] Kr = np.ascontiguousarray(Kr_in, dtype=np.float64)
    cdef double[:, ::1] V = np.ascontiguousarray(V_in, dtype=np.float64)
    cdef Py_ssize_t n_q = Qs.shape[0]
    cdef Py_ssize_t d = Qs.shape[1]
    cdef Py_ssize_t n_k = Kr.shape[0]

    O_arr = np.zeros((n_q, d), dtype=np.float64)
    L_arr = np.zeros(n_q, dtype=np.float64)
    M_arr = np.full(n_q, -np.inf, dtype=np.float64)
    cdef double[:, ::1] O = O_arr
    cdef double[:] L = L_arr
    cdef double[:] M = M_arr

    cdef Py_ssize_t bq_cap = block_q if block_q < n_q else n_q
    cdef Py_ssize_t bk_cap = block_k if block_k < n_k else n_k
    m_run_arr = np.empty(bq_cap, dtype=np.float64)
    l_run_arr = np.empty(bq_cap, dtype=np.float64)
    s_row_arr = np.empty(bk_cap, dtype=np.float64)
    cdef double[:] m_run = m_run_arr
    cdef double[:] l_run = l_run_arr
    cdef double[:] s_row = s_row_arr

    cdef Py_ssize_t q0, q1, k0, k1, bq, bk, i, j, t, gi, jmax
    cdef double s, rowmax, m_new, alpha, p

    for q0 in range(0, n_q, block_q):
        q1 = q0 + block_q
        if q1 > n_q:
            q1 = n_q
        bq = q1 - q0
        for i in range(bq):
            m_run[i] = -INFINITY
            l_run[i] = 0.0
        for k0 in range(0, n_k, block_k):
            if causal and k0 > q1 - 1:
                break
            k1 = k0 + block_k
            if k1 > n_k:
                k1 = n_k
            bk = k1 - k0
            for i in range(bq):
                gi = q0 + i
                jmax = bk
                if causal and gi - k0 + 1 < bk:
                    jmax = gi - k0 + 1
                if jmax <= 0:
                    continue
                rowmax = -INFINITY
                for j in range(jmax):
                    s = 0.0
                    for t in range(d):
                        s += Qs[gi, t] * Kr[k0 + j, t]
                    s_row[j] = s
                    if s > rowmax:
                        rowmax = s
                m_new = m_run[i] if m_run[i] > rowmax else rowmax
                if m_run[i] == -INFINITY:
                    alpha = 0.0
                else:
                    alpha = exp(m_run[i] - m_new)
                l_run[i] = l_run[i] * alpha
                for t in range(d):
                    O[gi, t] *= alpha
                for j in range(jmax):
                    p = exp(s_row[j] - m_new)
                    l_run[i] += p
                    for t in range(d):
                        O[gi, t] += p * V[k0 + j, t]
                m_run[i] = m_new
        for i in range(bq):
            gi = q0 + i
            L[gi] = l_run[i]
            M[gi] = m_run[i]
            for t in range(d):
                O[gi, t] /= l_run[i]
    return O_arr, L_arr, M_arr


def ans_blocked(object Qs_in, object Kr_in, object M_in, object L_in,
                object qn_in, int block_q, int block_k, bint causal):
    cdef double[:, ::1] Qs = np.ascontiguousarray(Qs_in, dtype=np.float64)
    cdef double[:, ::1] Kr = np.ascontiguousarray(Kr_in, dtype=np.float64)
    cdef double[:] M = np.ascontiguousarray(M_in, dtype=np.float64)
    cdef double[:] L = np.ascontiguousarray(L_in, dtype=np.float64)
    cdef double[:] qn = np.ascontiguousarray(qn_in, dtype=np.float64)
    cdef Py_ssize_t n_q = Qs.shape[0]
    cdef Py_ssize_t d = Qs.shape[1]
    cdef Py_ssize_t n_k = Kr.shape[0]

    ans_k_arr = np.zeros(n_k, dtype=np.float64)
    ans_v_arr = np.zeros(n_k, dtype=np.float64)
    cdef double[:] ans_k = ans_k_arr
    cdef double[:] ans_v = ans_v_arr

    cdef Py_ssize_t q0, q1, k0, k1, i, j, t, jend
    cdef double s, a

    for k0 in range(0, n_k, block_k):
        k1 = k0 + block_k
        if k1 > n_k:
            k1 = n_k
        for q0 in range(0, n_q, block_q):
            q1 = q0 + block_q
            if q1 > n_q:
                q1 = n_q
            if causal and k0 > q1 - 1:
                continue
            for i in range(q0, q1):
                jend = k1
                if causal and i + 1 < k1:
                    jend = i + 1
                for j in range(k0, jend):
                    s = 0.0
                    for t in range(d):
                        s += Qs[i, t] * Kr[j, t]
                    a = exp(s - M[i]) / L[i]
                    ans_v[j] += a
                    ans_k[j] += a * (1.0 - a) * qn[i]
    return ans_k_arr, ans_v_arr


def assign_nearest(object X_in, object C_in):
    cdef double[:, ::1] X = np.ascontiguousarray(X_in, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(C_in, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t m = C.shape[0]

    idx_arr = np.empty(n, dtype=np.int64)
    d2_arr = np.empty(n, dtype=np.float64)
    cdef long long[:] idx = idx_arr
    cdef double[:] d2 = d2_arr

    cdef Py_ssize_t p, c, t
    cdef double best, s, diff
    cdef Py_ssize_t best_c

    for p in range(n):
        best = INFINITY
        best_c = 0
        for c in range(m):
            s = 0.0
            for t in range(d):
                diff = X[p, t] - C[c, t]
                s += diff * diff
            if s < best:
                best = s
                best_c = c
        idx[p] = best_c
        d2[p] = best
    return idx_arr, d2_arr
