"""NumPy reference implementations of the chain kernels.

These mirror the compiled extension exactly; they are used when the
extension is unavailable or when ALTPROJ_BACKEND=pure is set.  All inputs
are float64 C-contiguous arrays (the dispatching package guarantees this).
"""
from __future__ import annotations

import math

import numpy as np


def forward_backward(node, edge):
    """Log-space forward-backward over per-position score tables.

    node: (L, K) unnormalized log-potentials per position/label.
    edge: (L-1, K, K) log-potentials per adjacent label pair.

    Returns (node_marginals (L,K), edge_marginals (L-1,K,K), log_z).
    """
    L, K = node.shape
    alpha = np.empty((L, K))
    alpha[0] = node[0]
    for t in range(1, L):
        m = alpha[t - 1][:, None] + edge[t - 1]
        mx = m.max(axis=0)
        alpha[t] = node[t] + mx + np.log(np.exp(m - mx[None, :]).sum(axis=0))
    mx = alpha[L - 1].max()
    log_z = mx + math.log(np.exp(alpha[L - 1] - mx).sum())

    beta = np.zeros((L, K))
    for t in range(L - 2, -1, -1):
        m = edge[t] + (node[t + 1] + beta[t + 1])[None, :]
        mx = m.max(axis=1)
        beta[t] = mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))

    node_marg = np.exp(alpha + beta - log_z)
    if L > 1:
        edge_marg = np.exp(alpha[:-1, :, None] + edge
                           + (node[1:] + beta[1:])[:, None, :] - log_z)
    else:
        edge_marg = np.zeros((0, K, K))
    return node_marg, edge_marg, log_z


def viterbi_path(node, edge):
    """Highest-scoring label path; ties resolve to the lowest label index."""
    L, K = node.shape
    score = node[0].copy()
    back = np.zeros((L, K), dtype=np.int64)
    for t in range(1, L):
        cand = score[:, None] + edge[t - 1]
        best = cand.argmax(axis=0)          # first maximum = lowest index
        back[t] = best
        score = node[t] + cand[best, np.arange(K)]
    path = np.empty(L, dtype=np.int64)
    path[L - 1] = int(score.argmax())
    for t in range(L - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


def gibbs_paths(node, edge, rep_weight, init, uniforms, burn_in, thinning,
                extra=None):
    """Single-site Gibbs sweeps over a chain, returning retained paths.

    Sites are resampled left to right from their exact conditionals under
    scores = node + edge (+ rep_weight * segment-repetition value, and any
    ``extra(y, t) -> (K,)`` callback scores).  ``uniforms`` supplies one
    uniform draw per (sweep, site); the first ``burn_in`` sweeps are
    discarded, then every ``thinning``-th sweep is retained.
    """
    L, K = node.shape
    y = np.asarray(init, dtype=np.int64).copy()
    total = uniforms.shape[0]
    n_keep = (total - burn_in) // thinning
    out = np.empty((n_keep, L), dtype=np.int64)
    kept = 0

    # Bookkeeping for the repetition feature: value(y) = segments - distinct.
    counts = np.bincount(y, minlength=K)
    distinct = int((counts > 0).sum())
    n_seg = 1 + int((y[1:] != y[:-1]).sum()) if L > 1 else 1

    for s in range(total):
        for t in range(L):
            old = int(y[t])
            left = int(y[t - 1]) if t > 0 else -1
            right = int(y[t + 1]) if t < L - 1 else -1
            sc = node[t].copy()
            if t > 0:
                sc += edge[t - 1, left, :]
            if t < L - 1:
                sc += edge[t, :, right]
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
                    sc[z] += rep_weight * float((n_seg + dseg) - (distinct + ddist))
            if extra is not None:
                sc = sc + extra(y, t)

            # Sample from the conditional using one uniform draw.  The same
            # arithmetic (libm exp, left-to-right accumulation) is used in the
            # compiled kernel so both backends trace identical paths.
            mx = sc[0]
            for z in range(1, K):
                if sc[z] > mx:
                    mx = sc[z]
            p = [math.exp(sc[z] - mx) for z in range(K)]
            tot = 0.0
            for z in range(K):
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
            out[kept] = y
            kept += 1
    return out
