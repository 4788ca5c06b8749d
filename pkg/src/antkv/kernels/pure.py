"""Pure numpy implementations of the hot kernels.

Block iteration order matches the compiled backend (query blocks outer
for attention, key blocks outer for score accumulation) so the two
backends agree to floating-point roundoff.
"""

import numpy as np

__all__ = ["flash_aux", "ans_blocked", "assign_nearest"]


def flash_aux(Qs, Kr, V, block_q, block_k, causal):
    """Blocked attention with online-softmax rescaling.

    Qs are the rotated queries already scaled by 1/sqrt(d); Kr the
    rotated keys.  Returns (O, L, M) where M is the per-query running
    max of the scaled logits and L the softmax normalizer at M.
    """
    Qs = np.ascontiguousarray(Qs, dtype=np.float64)
    Kr = np.ascontiguousarray(Kr, dtype=np.float64)
    V = np.ascontiguousarray(V, dtype=np.float64)
    n_q, d = Qs.shape
    n_k = Kr.shape[0]
    O = np.zeros((n_q, d))
    L = np.zeros(n_q)
    M = np.full(n_q, -np.inf)
    for q0 in range(0, n_q, block_q):
        q1 = min(q0 + block_q, n_q)
        m_run = np.full(q1 - q0, -np.inf)
        l_run = np.zeros(q1 - q0)
        acc = np.zeros((q1 - q0, d))
        for k0 in range(0, n_k, block_k):
            if causal and k0 > q1 - 1:
                break
            k1 = min(k0 + block_k, n_k)
            S = Qs[q0:q1] @ Kr[k0:k1].T
            if causal:
                qi = np.arange(q0, q1)[:, None]
                kj = np.arange(k0, k1)[None, :]
                S = np.where(kj <= qi, S, -np.inf)
            m_new = np.maximum(m_run, S.max(axis=1))
            with np.errstate(invalid="ignore"):
                alpha = np.where(m_run == -np.inf, 0.0, np.exp(m_run - m_new))
            P = np.exp(S - m_new[:, None])
            l_run = l_run * alpha + P.sum(axis=1)
            acc = acc * alpha[:, None] + P @ V[k0:k1]
            m_run = m_new
        O[q0:q1] = acc / l_run[:, None]
        L[q0:q1] = l_run
        M[q0:q1] = m_run
    return O, L, M


def ans_blocked(Qs, Kr, M, L, q_norms, block_q, block_k, causal):
    """Accumulate anchor scores blockwise from reconstructed attention.

    Per-block scores are rebuilt as exp(S - M_i) / L_i and reduced over
    the query dimension; key blocks iterate in the outer loop.
    """
    Qs = np.ascontiguousarray(Qs, dtype=np.float64)
    Kr = np.ascontiguousarray(Kr, dtype=np.float64)
    n_q = Qs.shape[0]
    n_k = Kr.shape[0]
    ans_k = np.zeros(n_k)
    ans_v = np.zeros(n_k)
    for k0 in range(0, n_k, block_k):
        k1 = min(k0 + block_k, n_k)
        for q0 in range(0, n_q, block_q):
            q1 = min(q0 + block_q, n_q)
            if causal and k0 > q1 - 1:
                continue
            S = Qs[q0:q1] @ Kr[k0:k1].T
            if causal:
                qi = np.arange(q0, q1)[:, None]
                kj = np.arange(k0, k1)[None, :]
                S = np.where(kj <= qi, S, -np.inf)
            A = np.exp(S - M[q0:q1, None]) / L[q0:q1, None]
            ans_v[k0:k1] += A.sum(axis=0)
            ans_k[k0:k1] += (A * (1.0 - A) * q_norms[q0:q1, None]).sum(axis=0)
    return ans_k, ans_v


def assign_nearest(X, C):
    """Index of the nearest centroid per row, squared distances included.

    Ties resolve to the lowest centroid index (argmin semantics).
    Chunked so the (chunk, m, d) distance block stays within a fixed
    memory budget.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    n = X.shape[0]
    m, d = C.shape
    chunk = max(1, int(2 ** 24 / max(1, m * d)))
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        D = ((X[s:e, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(D, axis=1)
        idx[s:e] = best
        d2[s:e] = D[np.arange(e - s), best]
    return idx, d2
