# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: CTC forward-backward and Levenshtein alignment."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, INFINITY

cnp.import_array()


cdef inline double _lae(double a, double b) noexcept nogil:
    # log(exp(a) + exp(b)) with -inf as identity
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def ctc_forward_backward(double[:, ::1] log_probs, long[::1] target, long blank=0):
    """Return ``(loss, grad)`` with ``grad = d loss / d log_probs``.

    ``loss`` is ``inf`` and ``grad`` all zeros when no alignment exists.
    """
    cdef Py_ssize_t T = log_probs.shape[0]
    cdef Py_ssize_t V = log_probs.shape[1]
    cdef Py_ssize_t U = target.shape[0]
    cdef Py_ssize_t S = 2 * U + 1
    cdef Py_ssize_t t, s
    cdef double a, logp, occ

    grad_arr = np.zeros((T, V), dtype=np.float64)
    if T == 0:
        return float("inf"), grad_arr
    cdef double[:, ::1] grad = grad_arr

    z_arr = np.full(S, blank, dtype=np.int64)
    cdef long[::1] z = z_arr
    for s in range(U):
        z[2 * s + 1] = target[s]

    alpha_arr = np.full((T, S), -np.inf)
    beta_arr = np.full((T, S), -np.inf)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr

    with nogil:
        alpha[0, 0] = log_probs[0, blank]
        if S > 1:
            alpha[0, 1] = log_probs[0, z[1]]
        for t in range(1, T):
            for s in range(S):
                a = alpha[t - 1, s]
                if s >= 1:
                    a = _lae(a, alpha[t - 1, s - 1])
                if s >= 2 and z[s] != blank and z[s] != z[s - 2]:
                    a = _lae(a, alpha[t - 1, s - 2])
                if a != -INFINITY:
                    alpha[t, s] = a + log_probs[t, z[s]]

        logp = alpha[T - 1, S - 1]
        if S > 1:
            logp = _lae(logp, alpha[T - 1, S - 2])

    if logp == -INFINITY:
        return float("inf"), np.zeros((T, V), dtype=np.float64)

    with nogil:
        beta[T - 1, S - 1] = log_probs[T - 1, z[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = log_probs[T - 1, z[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                a = beta[t + 1, s]
                if s + 1 < S:
                    a = _lae(a, beta[t + 1, s + 1])
                if s + 2 < S and z[s + 2] != blank and z[s + 2] != z[s]:
                    a = _lae(a, beta[t + 1, s + 2])
                if a != -INFINITY:
                    beta[t, s] = a + log_probs[t, z[s]]

        for t in range(T):
            for s in range(S):
                if alpha[t, s] == -INFINITY or beta[t, s] == -INFINITY:
                    continue
                occ = exp(alpha[t, s] + beta[t, s] - log_probs[t, z[s]] - logp)
                grad[t, z[s]] -= occ

    return -logp, grad_arr


def edit_ops(long[::1] ref, long[::1] hyp):
    """Return ``(substitutions, deletions, insertions)`` of a minimum-cost alignment.

    Backtrace prefers the diagonal move, then deletion, then insertion.
    """
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long c, best
    d_arr = np.empty((n + 1, m + 1), dtype=np.int64)
    cdef long[:, ::1] d = d_arr
    for i in range(n + 1):
        d[i, 0] = i
    for j in range(m + 1):
        d[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = 0 if ref[i - 1] == hyp[j - 1] else 1
            best = d[i - 1, j - 1] + c
            if d[i - 1, j] + 1 < best:
                best = d[i - 1, j] + 1
            if d[i, j - 1] + 1 < best:
                best = d[i, j - 1] + 1
            d[i, j] = best

    cdef long sub = 0, dele = 0, ins = 0
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            c = 0 if ref[i - 1] == hyp[j - 1] else 1
            if d[i, j] == d[i - 1, j - 1] + c:
                sub += c
                i -= 1
                j -= 1
                continue
        if i > 0 and d[i, j] == d[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return sub, dele, ins
