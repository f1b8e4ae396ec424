"""Pure NumPy fallback for the compiled kernels in ``_core.pyx``.

The LSTM recurrences loop over time with batched NumPy ops. The lattice recursions are vectorised over anti-diagonals: every cell on
diagonal ``t + u = d`` depends only on cells of diagonal ``d - 1``.
"""

import numpy as np


def lattice_forward_backward(lp_blank, lp_label):
    lp_blank = np.ascontiguousarray(lp_blank, dtype=np.float64)
    lp_label = np.ascontiguousarray(lp_label, dtype=np.float64)
    T, U1 = lp_blank.shape
    U = U1 - 1
    if lp_label.shape != (T, U):
        raise ValueError("lp_label must have shape (T, U)")

    alpha = np.full((T, U1), -np.inf)
    alpha[0, 0] = 0.0
    for d in range(1, T + U):
        u = np.arange(max(0, d - T + 1), min(d, U) + 1)
        t = d - u
        from_blank = np.full(u.shape, -np.inf)
        m = t > 0
        from_blank[m] = alpha[t[m] - 1, u[m]] + lp_blank[t[m] - 1, u[m]]
        from_label = np.full(u.shape, -np.inf)
        m = u > 0
        from_label[m] = alpha[t[m], u[m] - 1] + lp_label[t[m], u[m] - 1]
        alpha[t, u] = np.logaddexp(from_blank, from_label)

    beta = np.full((T, U1), -np.inf)
    beta[T - 1, U] = lp_blank[T - 1, U]
    for d in range(T + U - 2, -1, -1):
        u = np.arange(max(0, d - T + 1), min(d, U) + 1)
        t = d - u
        from_blank = np.full(u.shape, -np.inf)
        m = t < T - 1
        from_blank[m] = beta[t[m] + 1, u[m]] + lp_blank[t[m], u[m]]
        from_label = np.full(u.shape, -np.inf)
        m = u < U
        from_label[m] = beta[t[m], u[m] + 1] + lp_label[t[m], u[m]]
        beta[t, u] = np.logaddexp(from_blank, from_label)

    return alpha, beta, float(beta[0, 0])


def levenshtein_table(ref, hyp):
    ref = [int(r) for r in ref]
    hyp = [int(h) for h in hyp]
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        prev = d[i - 1]
        row = d[i]
        for j in range(1, m + 1):
            row[j] = min(
                prev[j - 1] + (ref[i - 1] != hyp[j - 1]),
                prev[j] + 1,
                row[j - 1] + 1,
            )
    return d


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lstm_recurrence_forward(xw, wh):
    B, T, G = xw.shape
    H = G // 4
    gates = np.array(xw, dtype=np.float64, copy=True)
    c = np.zeros((B, T + 1, H))
    h = np.zeros((B, T + 1, H))
    for t in range(T):
        a = gates[:, t]
        if t > 0:
            a += h[:, t] @ wh
        a[:, : 2 * H] = _sigmoid(a[:, : 2 * H])
        a[:, 2 * H : 3 * H] = np.tanh(a[:, 2 * H : 3 * H])
        a[:, 3 * H :] = _sigmoid(a[:, 3 * H :])
        c[:, t + 1] = a[:, H : 2 * H] * c[:, t] + a[:, :H] * a[:, 2 * H : 3 * H]
        h[:, t + 1] = a[:, 3 * H :] * np.tanh(c[:, t + 1])
    return gates, c, h


def lstm_recurrence_backward(dh_out, gates, c, wh):
    B, T, G = gates.shape
    H = G // 4
    dz = np.empty((B, T, G))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    tanh_c = np.tanh(c[:, 1:])
    for t in range(T - 1, -1, -1):
        i = gates[:, t, :H]
        f = gates[:, t, H : 2 * H]
        g = gates[:, t, 2 * H : 3 * H]
        o = gates[:, t, 3 * H :]
        tc = tanh_c[:, t]
        dh = dh_out[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        d = dz[:, t]
        d[:, :H] = dc * g * i * (1.0 - i)
        d[:, H : 2 * H] = dc * c[:, t] * f * (1.0 - f)
        d[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        d[:, 3 * H :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = d @ wh.T
    return dz
