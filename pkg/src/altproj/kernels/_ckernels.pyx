# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled chain kernels: forward-backward, Viterbi, Gibbs sweeps.

Arithmetic mirrors the NumPy fallback (max-subtracted log-sum-exp,
left-to-right accumulation) so the two backends agree to rounding.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def _forward_backward2(double[:, ::1] node, double[:, :, ::1] edge):
    # fully unrolled binary-label variant: the K=2 inner loops are short
    # enough that loop setup dominates, so spelling them out roughly
    # halves the per-position cost for the most common chain size
    cdef Py_ssize_t L = node.shape[0]
    cdef cnp.ndarray[double, ndim=2] alpha_arr = np.empty((L, 2))
    cdef cnp.ndarray[double, ndim=2] beta_arr = np.zeros((L, 2))
    cdef cnp.ndarray[double, ndim=2] node_marg = np.empty((L, 2))
    cdef cnp.ndarray[double, ndim=3] edge_marg = np.zeros((max(L - 1, 0), 2, 2))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] nm = node_marg
    cdef double[:, :, ::1] em = edge_marg
    cdef Py_ssize_t t
    cdef double a0, a1, b0, b1, v0, v1, mx, n0, log_z
    cdef double e00, e01, e10, e11, s0, s1

    a0 = node[0, 0]
    a1 = node[0, 1]
    alpha[0, 0] = a0
    alpha[0, 1] = a1
    for t in range(1, L):
        v0 = a0 + edge[t - 1, 0, 0]
        v1 = a1 + edge[t - 1, 1, 0]
        mx = v0 if v0 >= v1 else v1
        n0 = node[t, 0] + mx + log(exp(v0 - mx) + exp(v1 - mx))
        v0 = a0 + edge[t - 1, 0, 1]
        v1 = a1 + edge[t - 1, 1, 1]
        mx = v0 if v0 >= v1 else v1
        a1 = node[t, 1] + mx + log(exp(v0 - mx) + exp(v1 - mx))
        a0 = n0
        alpha[t, 0] = a0
        alpha[t, 1] = a1

    mx = a0 if a0 >= a1 else a1
    log_z = mx + log(exp(a0 - mx) + exp(a1 - mx))

    b0 = 0.0
    b1 = 0.0
    for t in range(L - 2, -1, -1):
        s0 = node[t + 1, 0] + b0
        s1 = node[t + 1, 1] + b1
        v0 = edge[t, 0, 0] + s0
        v1 = edge[t, 0, 1] + s1
        mx = v0 if v0 >= v1 else v1
        n0 = mx + log(exp(v0 - mx) + exp(v1 - mx))
        v0 = edge[t, 1, 0] + s0
        v1 = edge[t, 1, 1] + s1
        mx = v0 if v0 >= v1 else v1
        b1 = mx + log(exp(v0 - mx) + exp(v1 - mx))
        b0 = n0
        beta[t, 0] = b0
        beta[t, 1] = b1

    for t in range(L):
        nm[t, 0] = exp(alpha[t, 0] + beta[t, 0] - log_z)
        nm[t, 1] = exp(alpha[t, 1] + beta[t, 1] - log_z)
    for t in range(L - 1):
        s0 = node[t + 1, 0] + beta[t + 1, 0] - log_z
        s1 = node[t + 1, 1] + beta[t + 1, 1] - log_z
        e00 = alpha[t, 0]
        e11 = alpha[t, 1]
        em[t, 0, 0] = exp(e00 + edge[t, 0, 0] + s0)
        em[t, 0, 1] = exp(e00 + edge[t, 0, 1] + s1)
        em[t, 1, 0] = exp(e11 + edge[t, 1, 0] + s0)
        em[t, 1, 1] = exp(e11 + edge[t, 1, 1] + s1)
    return node_marg, edge_marg, log_z


def forward_backward(double[:, ::1] node, double[:, :, ::1] edge):
    cdef Py_ssize_t L = node.shape[0]
    cdef Py_ssize_t K = node.shape[1]
    if K == 2:
        return _forward_backward2(node, edge)
    cdef cnp.ndarray[double, ndim=2] alpha_arr = np.empty((L, K))
    cdef cnp.ndarray[double, ndim=2] beta_arr = np.zeros((L, K))
    cdef cnp.ndarray[double, ndim=2] node_marg = np.empty((L, K))
    cdef cnp.ndarray[double, ndim=3] edge_marg = np.zeros((max(L - 1, 0), K, K))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] nm = node_marg
    cdef double[:, :, ::1] em = edge_marg
    cdef Py_ssize_t t, a, b
    cdef double mx, acc, v, log_z

    for b in range(K):
        alpha[0, b] = node[0, b]
    for t in range(1, L):
        for b in range(K):
            mx = alpha[t - 1, 0] + edge[t - 1, 0, b]
            for a in range(1, K):
                v = alpha[t - 1, a] + edge[t - 1, a, b]
                if v > mx:
                    mx = v
            acc = 0.0
            for a in range(K):
                acc += exp(alpha[t - 1, a] + edge[t - 1, a, b] - mx)
            alpha[t, b] = node[t, b] + mx + log(acc)

    mx = alpha[L - 1, 0]
    for b in range(1, K):
        if alpha[L - 1, b] > mx:
            mx = alpha[L - 1, b]
    acc = 0.0
    for b in range(K):
        acc += exp(alpha[L - 1, b] - mx)
    log_z = mx + log(acc)

    for t in range(L - 2, -1, -1):
        for a in range(K):
            mx = edge[t, a, 0] + node[t + 1, 0] + beta[t + 1, 0]
            for b in range(1, K):
                v = edge[t, a, b] + node[t + 1, b] + beta[t + 1, b]
                if v > mx:
                    mx = v
            acc = 0.0
            for b in range(K):
                acc += exp(edge[t, a, b] + node[t + 1, b] + beta[t + 1, b] - mx)
            beta[t, a] = mx + log(acc)

    for t in range(L):
        for b in range(K):
            nm[t, b] = exp(alpha[t, b] + beta[t, b] - log_z)
    for t in range(L - 1):
        for a in range(K):
            for b in range(K):
                em[t, a, b] = exp(alpha[t, a] + edge[t, a, b]
                                  + node[t + 1, b] + beta[t + 1, b] - log_z)
    return node_marg, edge_marg, log_z


def viterbi_path(double[:, ::1] node, double[:, :, ::1] edge):
    cdef Py_ssize_t L = node.shape[0]
    cdef Py_ssize_t K = node.shape[1]
    cdef cnp.ndarray[double, ndim=1] score_arr = np.empty(K)
    cdef cnp.ndarray[double, ndim=1] nxt_arr = np.empty(K)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] back_arr = np.zeros((L, K), dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] path_arr = np.empty(L, dtype=np.int64)
    cdef double[::1] score = score_arr
    cdef double[::1] nxt = nxt_arr
    cdef cnp.int64_t[:, ::1] back = back_arr
    cdef cnp.int64_t[::1] path = path_arr
    cdef Py_ssize_t t, a, b, best
    cdef double mx, v

    for b in range(K):
        score[b] = node[0, b]
    for t in range(1, L):
        for b in range(K):
            best = 0
            mx = score[0] + edge[t - 1, 0, b]
            for a in range(1, K):
                v = score[a] + edge[t - 1, a, b]
                if v > mx:          # strict: ties keep the lowest index
                    mx = v
                    best = a
            back[t, b] = best
            nxt[b] = node[t, b] + mx
        for b in range(K):
            score[b] = nxt[b]

    best = 0
    mx = score[0]
    for b in range(1, K):
        if score[b] > mx:
            mx = score[b]
            best = b
    path[L - 1] = best
    for t in range(L - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path_arr


def gibbs_paths(double[:, ::1] node, double[:, :, ::1] edge, double rep_weight,
                cnp.int64_t[::1] init, double[:, ::1] uniforms,
                Py_ssize_t burn_in, Py_ssize_t thinning):
    cdef Py_ssize_t L = node.shape[0]
    cdef Py_ssize_t K = node.shape[1]
    cdef Py_ssize_t total = uniforms.shape[0]
    cdef Py_ssize_t n_keep = (total - burn_in) // thinning
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out_arr = np.empty((n_keep, L), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] y_arr = np.empty(L, dtype=np.int64)
    cdef cnp.int64_t[::1] y = y_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts_arr = np.zeros(K, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef cnp.ndarray[double, ndim=1] sc_arr = np.empty(K)
    cdef cnp.ndarray[double, ndim=1] p_arr = np.empty(K)
    cdef double[::1] sc = sc_arr
    cdef double[::1] p = p_arr
    cdef Py_ssize_t s, t, z, kept, old, left, right, new, distinct, n_seg, dseg, ddist
    cdef double mx, tot, u, acc

    for t in range(L):
        y[t] = init[t]
        counts[y[t]] += 1
    distinct = 0
    for z in range(K):
        if counts[z] > 0:
            distinct += 1
    n_seg = 1
    for t in range(1, L):
        if y[t] != y[t - 1]:
            n_seg += 1

    kept = 0
    for s in range(total):
        for t in range(L):
            old = y[t]
            left = y[t - 1] if t > 0 else -1
            right = y[t + 1] if t < L - 1 else -1
            for z in range(K):
                sc[z] = node[t, z]
                if t > 0:
                    sc[z] += edge[t - 1, left, z]
                if t < L - 1:
                    sc[z] += edge[t, z, right]
            if rep_weight != 0.0:
                for z in range(K):
                    dseg = 0
                    if t > 0:
                        dseg += (1 if left != z else 0) - (1 if left != old else 0)
                    if t < L - 1:
                        dseg += (1 if z != right else 0) - (1 if old != right else 0)
                    ddist = 0
                    if z != old:
                        if counts[old] == 1:
                            ddist -= 1
                        if counts[z] == 0:
                            ddist += 1
                    sc[z] += rep_weight * <double>((n_seg + dseg) - (distinct + ddist))

            mx = sc[0]
            for z in range(1, K):
                if sc[z] > mx:
                    mx = sc[z]
            tot = 0.0
            for z in range(K):
                p[z] = exp(sc[z] - mx)
                tot += p[z]
            u = uniforms[s, t] * tot
            acc = 0.0
            new = K - 1
            for z in range(K):
                acc += p[z]
                if acc >= u:
                    new = z
                    break

            if new != old:
                if t > 0:
                    n_seg += (1 if left != new else 0) - (1 if left != old else 0)
                if t < L - 1:
                    n_seg += (1 if new != right else 0) - (1 if old != right else 0)
                counts[old] -= 1
                if counts[old] == 0:
                    distinct -= 1
                if counts[new] == 0:
                    distinct += 1
                counts[new] += 1
                y[t] = new

        if s >= burn_in and (s - burn_in + 1) % thinning == 0:
            for t in range(L):
                out[kept, t] = y[t]
            kept += 1
    return out_arr
