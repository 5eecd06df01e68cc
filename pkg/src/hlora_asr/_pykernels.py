"""Pure-Python/numpy versions of the compiled kernels in ``_ckernels.pyx``.

Same signatures and semantics; used when the extension is unavailable or
when ``HLORA_PURE_PYTHON=1`` is set.
"""
import numpy as np


def _skip_mask(z, blank):
    # s may be entered from s-2 when z[s] is a label different from z[s-2]
    allow = np.zeros(len(z), dtype=bool)
    allow[2:] = (z[2:] != blank) & (z[2:] != z[:-2])
    return allow


def ctc_forward_backward(log_probs, target, blank=0):
    log_probs = np.asarray(log_probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T, V = log_probs.shape
    U = len(target)
    S = 2 * U + 1
    if T == 0:
        return float("inf"), np.zeros((T, V))
    z = np.full(S, blank, dtype=np.int64)
    z[1::2] = target
    skip = _skip_mask(z, blank)
    emit = log_probs[:, z]

    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            a = prev.copy()
            a[1:] = np.logaddexp(a[1:], prev[:-1])
            a[skip] = np.logaddexp(a[skip], prev[np.flatnonzero(skip) - 2])
            alpha[t] = a + emit[t]
        logp = alpha[T - 1, S - 1]
        if S > 1:
            logp = np.logaddexp(logp, alpha[T - 1, S - 2])
    if logp == -np.inf:
        return float("inf"), np.zeros((T, V))

    # beta[t, s] may move to s+2 when skip[s+2] holds
    from_skip = np.flatnonzero(skip) - 2
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    with np.errstate(invalid="ignore"):
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            b = nxt.copy()
            b[:-1] = np.logaddexp(b[:-1], nxt[1:])
            b[from_skip] = np.logaddexp(b[from_skip], nxt[from_skip + 2])
            beta[t] = b + emit[t]

    with np.errstate(invalid="ignore", over="ignore"):
        occ = np.exp(alpha + beta - emit - logp)
    occ[~np.isfinite(occ)] = 0.0
    grad = np.zeros((T, V))
    for s in range(S):
        grad[:, z[s]] -= occ[:, s]
    return float(-logp), grad


def edit_ops(ref, hyp):
    ref = list(ref)
    hyp = list(hyp)
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + c, d[i - 1][j] + 1, d[i][j - 1] + 1)

    sub = dele = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            c = 0 if ref[i - 1] == hyp[j - 1] else 1
            if d[i][j] == d[i - 1][j - 1] + c:
                sub += c
                i -= 1
                j -= 1
                continue
        if i > 0 and d[i][j] == d[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return sub, dele, ins
