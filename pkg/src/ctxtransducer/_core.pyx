# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: LSTM recurrences, transducer lattice recursions, Levenshtein table.

Semantics match :mod:`ctxtransducer._core_py`; the test suite runs both
backends against the same oracles. Matrix products go through BLAS
``dgemm`` with strided leading dimensions so no per-step copies are made.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _logaddexp(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def lattice_forward_backward(const double[:, ::1] lp_blank, const double[:, ::1] lp_label):
    """Return ``(alpha, beta, loglik)`` for one segment lattice.

    ``lp_blank`` is ``(T, U+1)``, ``lp_label`` is ``(T, U)`` holding the
    log-probability of the next reference label at each node.
    """
    cdef Py_ssize_t T = lp_blank.shape[0]
    cdef Py_ssize_t U1 = lp_blank.shape[1]
    cdef Py_ssize_t U = U1 - 1
    cdef Py_ssize_t t, u
    cdef double a, b
    if lp_label.shape[0] != T or lp_label.shape[1] != U:
        raise ValueError("lp_label must have shape (T, U)")
    alpha_arr = np.empty((T, U1), dtype=np.float64)
    beta_arr = np.empty((T, U1), dtype=np.float64)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr

    with nogil:
        for t in range(T):
            for u in range(U1):
                if t == 0 and u == 0:
                    alpha[0, 0] = 0.0
                    continue
                a = -INFINITY
                b = -INFINITY
                if t > 0:
                    a = alpha[t - 1, u] + lp_blank[t - 1, u]
                if u > 0:
                    b = alpha[t, u - 1] + lp_label[t, u - 1]
                alpha[t, u] = _logaddexp(a, b)

        for t in range(T - 1, -1, -1):
            for u in range(U, -1, -1):
                if t == T - 1 and u == U:
                    beta[t, u] = lp_blank[t, u]
                    continue
                a = -INFINITY
                b = -INFINITY
                if t < T - 1:
                    a = beta[t + 1, u] + lp_blank[t, u]
                if u < U:
                    b = beta[t, u + 1] + lp_label[t, u]
                beta[t, u] = _logaddexp(a, b)

    return alpha_arr, beta_arr, float(beta[0, 0])


def levenshtein_table(const long long[::1] ref, const long long[::1] hyp):
    """Full unit-cost edit-distance table of shape ``(len(ref)+1, len(hyp)+1)``."""
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long long best, cand
    table_arr = np.empty((n + 1, m + 1), dtype=np.int64)
    cdef long long[:, ::1] d = table_arr
    with nogil:
        for i in range(n + 1):
            d[i, 0] = i
        for j in range(m + 1):
            d[0, j] = j
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                best = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
                cand = d[i - 1, j] + 1
                if cand < best:
                    best = cand
                cand = d[i, j - 1] + 1
                if cand < best:
                    best = cand
                d[i, j] = best
    return table_arr


def lstm_recurrence_forward(const double[:, :, ::1] xw, const double[:, ::1] wh):
    """Run the recurrence given input projections ``xw = x @ W_x + b`` of shape ``(B, T, 4H)``.

    Returns ``(gates, c, h)``: post-activation gates ``(B, T, 4H)`` ordered
    ``[i, f, g, o]`` and cell/hidden states ``(B, T+1, H)`` with the zero
    initial state at index 0. Transcendentals go through NumPy's vectorised
    ``tanh`` once per step over the whole batch slab; libm's scalar ``tanh``
    is several times slower.
    """
    cdef int B = xw.shape[0]
    cdef int T = xw.shape[1]
    cdef int G = xw.shape[2]
    cdef int H = G // 4
    if wh.shape[0] != H or wh.shape[1] != G:
        raise ValueError("recurrent weight must have shape (H, 4H)")
    gates_arr = np.array(xw, dtype=np.float64, copy=True)
    c_arr = np.zeros((B, T + 1, H), dtype=np.float64)
    h_arr = np.zeros((B, T + 1, H), dtype=np.float64)
    tc_arr = np.empty((B, H), dtype=np.float64)
    cdef double[:, :, ::1] gates = gates_arr
    cdef double[:, :, ::1] c = c_arr
    cdef double[:, :, ::1] h = h_arr
    cdef double[:, ::1] tc = tc_arr
    cdef int b, t, k
    cdef int ldh = (T + 1) * H
    cdef int ldg = T * G
    cdef double one = 1.0
    cdef char trans = b'N'
    cdef double *zp
    if B == 0 or T == 0:
        return gates_arr, c_arr, h_arr
    for t in range(T):
        slab = gates_arr[:, t]
        with nogil:
            if t > 0:
                # gates[:, t] += h[:, t] @ wh   (column-major view: G x B result)
                dgemm(&trans, &trans, &G, &B, &H, &one, <double*>&wh[0, 0], &G,
                      &h[0, t, 0], &ldh, &one, &gates[0, t, 0], &ldg)
            # sigmoid(z) = (1 + tanh(z / 2)) / 2 on the i, f, o blocks
            for b in range(B):
                zp = &gates[b, t, 0]
                for k in range(2 * H):
                    zp[k] = 0.5 * zp[k]
                for k in range(3 * H, G):
                    zp[k] = 0.5 * zp[k]
        np.tanh(slab, out=slab)
        with nogil:
            for b in range(B):
                zp = &gates[b, t, 0]
                for k in range(2 * H):
                    zp[k] = 0.5 * (1.0 + zp[k])
                for k in range(3 * H, G):
                    zp[k] = 0.5 * (1.0 + zp[k])
                for k in range(H):
                    c[b, t + 1, k] = zp[H + k] * c[b, t, k] + zp[k] * zp[2 * H + k]
                    tc[b, k] = c[b, t + 1, k]
        np.tanh(tc_arr, out=tc_arr)
        with nogil:
            for b in range(B):
                zp = &gates[b, t, 0]
                for k in range(H):
                    h[b, t + 1, k] = zp[3 * H + k] * tc[b, k]
    return gates_arr, c_arr, h_arr


def lstm_recurrence_backward(const double[:, :, ::1] dh_out, const double[:, :, ::1] gates,
                             const double[:, :, ::1] c, const double[:, ::1] wh):
    """Gradient w.r.t. the gate pre-activations, shape ``(B, T, 4H)``."""
    cdef int B = gates.shape[0]
    cdef int T = gates.shape[1]
    cdef int G = gates.shape[2]
    cdef int H = G // 4
    dz_arr = np.empty((B, T, G), dtype=np.float64)
    dh_next_arr = np.zeros((B, H), dtype=np.float64)
    dc_next_arr = np.zeros((B, H), dtype=np.float64)
    tanh_c_arr = np.tanh(np.asarray(c)[:, 1:])
    cdef double[:, :, ::1] dz = dz_arr
    cdef double[:, ::1] dh_next = dh_next_arr
    cdef double[:, ::1] dc_next = dc_next_arr
    cdef double[:, :, ::1] tanh_c = tanh_c_arr
    cdef int b, t, k
    cdef int ldg = T * G
    cdef double one = 1.0
    cdef double zero = 0.0
    cdef char transT = b'T'
    cdef char transN = b'N'
    cdef double i, f, g, o, tc, dh, dc
    if B == 0 or T == 0:
        return dz_arr
    with nogil:
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for k in range(H):
                    i = gates[b, t, k]
                    f = gates[b, t, H + k]
                    g = gates[b, t, 2 * H + k]
                    o = gates[b, t, 3 * H + k]
                    tc = tanh_c[b, t, k]
                    dh = dh_out[b, t, k] + dh_next[b, k]
                    dc = dh * o * (1.0 - tc * tc) + dc_next[b, k]
                    dz[b, t, k] = dc * g * i * (1.0 - i)
                    dz[b, t, H + k] = dc * c[b, t, k] * f * (1.0 - f)
                    dz[b, t, 2 * H + k] = dc * i * (1.0 - g * g)
                    dz[b, t, 3 * H + k] = dh * tc * o * (1.0 - o)
                    dc_next[b, k] = dc * f
            # dh_next = dz[:, t] @ wh.T   (column-major view: H x B result)
            dgemm(&transT, &transN, &H, &B, &G, &one, <double*>&wh[0, 0], &G,
                  &dz[0, t, 0], &ldg, &zero, &dh_next[0, 0], &H)
    return dz_arr
